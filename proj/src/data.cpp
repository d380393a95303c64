#include "gdla/data.hpp"

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gdla/hash.hpp"
#include "gdla/rng.hpp"
#include "json.hpp"

namespace gdla {

namespace {

using nlohmann::json;

std::vector<std::string> tokenize(const std::string& line, bool comma) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : line) {
    bool sep = comma ? (c == ',') : (c == ' ' || c == '\t');
    if (sep) {
      if (comma || !current.empty()) tokens.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current += c;
    }
  }
  if (comma || !current.empty()) tokens.push_back(current);
  if (comma) {
    // Trim surrounding spaces inside comma-separated cells.
    for (std::string& t : tokens) {
      size_t b = t.find_first_not_of(" \t");
      size_t e = t.find_last_not_of(" \t");
      t = b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
    }
  }
  return tokens;
}

bool parse_double(const std::string& token, double& out) {
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return buffer.str();
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> keys,
                         const std::string& what) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known)
      throw ConfigError(what + ": unknown key '" + item.key() + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Run loading

RawRun load_run(const std::filesystem::path& path, int fault_class,
                size_t onset_index, size_t expected_features) {
  if (fault_class < 0)
    throw ContractError("load_run: negative fault class");
  std::ifstream is(path);
  if (!is) throw IoError("cannot open run file '" + path.string() + "'");

  std::vector<double> flat;
  size_t n_cols = 0;
  size_t n_rows = 0;
  std::string line;
  size_t line_no = 0;
  bool first_content_line = true;
  bool had_header = false;
  // Trailing header columns named fault / onset carry run metadata and
  // override the caller's values; they are stripped from the features.
  size_t meta_cols = 0;
  bool has_onset_col = false;
  bool meta_read = false;
  while (std::getline(is, line)) {
    ++line_no;
    bool comma = line.find(',') != std::string::npos;
    std::vector<std::string> tokens = tokenize(line, comma);
    while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    if (tokens.empty()) continue;

    if (first_content_line) {
      first_content_line = false;
      bool all_numeric = true;
      double ignored;
      for (const std::string& t : tokens)
        all_numeric = all_numeric && parse_double(t, ignored);
      if (!all_numeric) {
        had_header = true;
        if (!tokens.empty() && tokens.back() == "onset") {
          has_onset_col = true;
          ++meta_cols;
          tokens.pop_back();
        }
        if (!tokens.empty() && tokens.back() == "fault") {
          ++meta_cols;
        } else if (has_onset_col) {
          throw ParseError("'" + path.string() +
                           "': an onset column requires a fault column");
        }
        continue;
      }
    }

    if (n_cols == 0) n_cols = tokens.size();
    if (tokens.size() != n_cols) {
      throw ParseError("'" + path.string() + "' line " +
                       std::to_string(line_no) + ": expected " +
                       std::to_string(n_cols) + " columns, found " +
                       std::to_string(tokens.size()));
    }
    if (meta_cols > 0 && n_cols <= meta_cols) {
      throw ParseError("'" + path.string() + "': only metadata columns");
    }
    for (size_t c = 0; c < tokens.size(); ++c) {
      double v;
      if (!parse_double(tokens[c], v)) {
        throw ParseError("'" + path.string() + "' line " +
                         std::to_string(line_no) + ", column " +
                         std::to_string(c + 1) + ": not a number: '" +
                         tokens[c] + "'");
      }
      if (c < n_cols - meta_cols) {
        flat.push_back(v);
      } else if (!meta_read) {
        bool is_fault_col = c == n_cols - meta_cols;
        if (is_fault_col) {
          fault_class = static_cast<int>(v);
        } else {
          onset_index = static_cast<size_t>(v);
        }
      }
    }
    meta_read = true;
    ++n_rows;
  }
  if (n_rows == 0)
    throw ParseError("'" + path.string() + "': no data rows");
  n_cols -= meta_cols;

  // Orientation auto-fix for headerless files stored features-by-time.
  if (!had_header && n_rows == expected_features &&
      n_cols > expected_features) {
    std::vector<double> transposed(flat.size());
    for (size_t r = 0; r < n_rows; ++r)
      for (size_t c = 0; c < n_cols; ++c)
        transposed[c * n_rows + r] = flat[r * n_cols + c];
    flat = std::move(transposed);
    std::swap(n_rows, n_cols);
  }
  if (n_cols != expected_features) {
    throw DimensionError("'" + path.string() + "': " + std::to_string(n_cols) +
                         " features, expected " +
                         std::to_string(expected_features));
  }
  if (fault_class < 0) {
    throw ParseError("'" + path.string() + "': negative fault class");
  }
  if (onset_index > n_rows) {
    throw ContractError("load_run: onset " + std::to_string(onset_index) +
                        " beyond run length " + std::to_string(n_rows));
  }

  RawRun run;
  run.samples = Tensor({n_rows, n_cols}, std::move(flat));
  run.fault_class = fault_class;
  run.onset_index = fault_class == 0 ? 0 : onset_index;
  return run;
}

void save_run_csv(const RawRun& run, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write run file '" + path.string() + "'");
  size_t n = run.n_features();
  for (size_t c = 0; c < n; ++c) os << (c ? "," : "") << "var_" << (c + 1);
  os << "\n";
  char buffer[40];
  const std::vector<double>& values = run.samples.values();
  for (size_t r = 0; r < run.length(); ++r) {
    for (size_t c = 0; c < n; ++c) {
      std::snprintf(buffer, sizeof buffer, "%.17g", values[r * n + c]);
      os << (c ? "," : "") << buffer;
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Standardization

Standardizer fit_standardizer(const std::vector<RawRun>& training_runs) {
  if (training_runs.empty())
    throw ContractError("fit_standardizer: no training runs");
  size_t n = training_runs[0].n_features();
  size_t total = 0;
  for (const RawRun& run : training_runs) {
    if (run.n_features() != n) {
      throw DimensionError("fit_standardizer: feature count mismatch, " +
                           std::to_string(n) + " vs " +
                           std::to_string(run.n_features()));
    }
    total += run.length();
  }
  if (total < 2)
    throw ContractError("fit_standardizer: need at least 2 pooled samples");

  Standardizer std_out;
  std_out.means.assign(n, 0.0);
  std_out.stds.assign(n, 0.0);
  for (const RawRun& run : training_runs) {
    const std::vector<double>& v = run.samples.values();
    for (size_t r = 0; r < run.length(); ++r)
      for (size_t c = 0; c < n; ++c) std_out.means[c] += v[r * n + c];
  }
  for (size_t c = 0; c < n; ++c) std_out.means[c] /= static_cast<double>(total);
  for (const RawRun& run : training_runs) {
    const std::vector<double>& v = run.samples.values();
    for (size_t r = 0; r < run.length(); ++r)
      for (size_t c = 0; c < n; ++c) {
        double d = v[r * n + c] - std_out.means[c];
        std_out.stds[c] += d * d;
      }
  }
  for (size_t c = 0; c < n; ++c) {
    std_out.stds[c] =
        std::max(std::sqrt(std_out.stds[c] / static_cast<double>(total)), 1e-8);
  }
  return std_out;
}

RawRun Standardizer::apply(const RawRun& run) const {
  size_t n = run.n_features();
  if (means.size() != n) {
    throw DimensionError("Standardizer: fitted on " +
                         std::to_string(means.size()) + " features, run has " +
                         std::to_string(n));
  }
  const std::vector<double>& v = run.samples.values();
  std::vector<double> out(v.size());
  for (size_t r = 0; r < run.length(); ++r)
    for (size_t c = 0; c < n; ++c)
      out[r * n + c] = (v[r * n + c] - means[c]) / stds[c];
  RawRun result;
  result.samples = Tensor({run.length(), n}, std::move(out));
  result.fault_class = run.fault_class;
  result.onset_index = run.onset_index;
  return result;
}

void Standardizer::save(const std::filesystem::path& path) const {
  json j;
  j["means"] = means;
  j["stds"] = stds;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write standardizer '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

Standardizer Standardizer::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ParseError("standardizer '" + path.string() + "': " + e.what());
  }
  reject_unknown_keys(j, {"means", "stds"}, "standardizer");
  Standardizer s;
  s.means = j.at("means").get<std::vector<double>>();
  s.stds = j.at("stds").get<std::vector<double>>();
  if (s.means.size() != s.stds.size())
    throw ParseError("standardizer '" + path.string() +
                     "': means/stds length mismatch");
  return s;
}

// ---------------------------------------------------------------------------
// Windowing

WindowBatch make_windows(const RawRun& run, size_t window_len, size_t stride) {
  if (stride == 0) throw ContractError("make_windows: stride must be positive");
  if (window_len == 0 || window_len > run.length()) {
    throw ContractError("make_windows: window " + std::to_string(window_len) +
                        " invalid for run of length " +
                        std::to_string(run.length()));
  }
  size_t n = run.n_features();
  const std::vector<double>& v = run.samples.values();
  WindowBatch batch;
  for (size_t start = 0; start + window_len <= run.length(); start += stride) {
    std::vector<double> slice(v.begin() + static_cast<long>(start * n),
                              v.begin() +
                                  static_cast<long>((start + window_len) * n));
    batch.windows.emplace_back(std::vector<size_t>{window_len, n},
                               std::move(slice));
    batch.labels.push_back(start >= run.onset_index ? run.fault_class : 0);
    batch.starts.push_back(start);
  }
  return batch;
}

std::vector<int> WindowedDataset::present_labels() const {
  std::set<int> seen(labels.begin(), labels.end());
  return std::vector<int>(seen.begin(), seen.end());
}

WindowedDataset exclude_classes(const WindowedDataset& ds,
                                const std::set<int>& excluded) {
  std::set<int> remaining;
  for (int label : ds.labels) {
    if (!excluded.count(label)) remaining.insert(label);
  }
  if (remaining.empty()) {
    throw ContractError("exclude_classes: exclusion empties the dataset");
  }
  std::map<int, int> remap;
  int next = 0;
  for (int old_label : remaining) remap[old_label] = next++;

  WindowedDataset out;
  for (size_t i = 0; i < ds.labels.size(); ++i) {
    if (excluded.count(ds.labels[i])) continue;
    out.windows.push_back(ds.windows[i]);
    out.labels.push_back(remap.at(ds.labels[i]));
  }
  for (const auto& [old_label, new_label] : remap) {
    auto it = ds.class_names.find(old_label);
    out.class_names[new_label] = it != ds.class_names.end()
                                     ? it->second
                                     : "class_" + std::to_string(old_label);
  }
  return out;
}

std::pair<WindowedDataset, WindowedDataset> train_val_split(
    const WindowedDataset& ds, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw ContractError("train_val_split: fraction " +
                        std::to_string(fraction) + " outside (0, 1)");
  }
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < ds.labels.size(); ++i)
    by_class[ds.labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<size_t> train_idx, val_idx;
  for (auto& [label, indices] : by_class) {
    if (indices.size() < 2) {
      throw ContractError("train_val_split: class " + std::to_string(label) +
                          " has fewer than 2 windows");
    }
    rng.shuffle(indices);
    size_t take = static_cast<size_t>(
        std::llround(fraction * static_cast<double>(indices.size())));
    take = std::clamp<size_t>(take, 1, indices.size() - 1);
    train_idx.insert(train_idx.end(), indices.begin(),
                     indices.begin() + static_cast<long>(take));
    val_idx.insert(val_idx.end(), indices.begin() + static_cast<long>(take),
                   indices.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  auto gather = [&](const std::vector<size_t>& idx) {
    WindowedDataset part;
    part.class_names = ds.class_names;
    for (size_t i : idx) {
      part.windows.push_back(ds.windows[i]);
      part.labels.push_back(ds.labels[i]);
    }
    return part;
  };
  return {gather(train_idx), gather(val_idx)};
}

// ---------------------------------------------------------------------------
// Synthetic data

std::string to_string(Archetype a) {
  switch (a) {
    case Archetype::None: return "none";
    case Archetype::Step: return "step";
    case Archetype::Drift: return "drift";
    case Archetype::Oscillation: return "oscillation";
    case Archetype::Overlap: return "overlap";
  }
  throw ContractError("to_string: unknown archetype");
}

Archetype archetype_from_string(const std::string& name) {
  if (name == "none") return Archetype::None;
  if (name == "step") return Archetype::Step;
  if (name == "drift") return Archetype::Drift;
  if (name == "oscillation") return Archetype::Oscillation;
  if (name == "overlap") return Archetype::Overlap;
  throw ConfigError("unknown archetype '" + name + "'");
}

void SyntheticSpec::validate() const {
  if (n_classes == 0) throw ConfigError("synthetic spec: n_classes must be positive");
  if (archetypes.size() != n_classes) {
    throw ConfigError("synthetic spec: " + std::to_string(archetypes.size()) +
                      " archetypes for " + std::to_string(n_classes) +
                      " classes");
  }
  if (runs_per_class == 0)
    throw ConfigError("synthetic spec: runs_per_class must be positive");
  if (n_features == 0)
    throw ConfigError("synthetic spec: n_features must be positive");
  if (noise_std <= 0.0)
    throw ConfigError("synthetic spec: noise_std must be positive");
  if (window_len == 0 || window_len > samples_per_run) {
    throw ConfigError("synthetic spec: window " + std::to_string(window_len) +
                      " invalid for runs of " +
                      std::to_string(samples_per_run) + " samples");
  }
  if (stride == 0) throw ConfigError("synthetic spec: stride must be positive");
  if (test_onset >= samples_per_run) {
    throw ConfigError("synthetic spec: test_onset " +
                      std::to_string(test_onset) + " beyond run length");
  }
}

std::vector<size_t> SyntheticSpec::class_features(size_t class_index) const {
  std::vector<size_t> features;
  for (size_t k = 0; k < 3; ++k)
    features.push_back((3 * class_index + k) % n_features);
  return features;
}

SyntheticSpec parse_synthetic_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic spec: ") + e.what());
  }
  reject_unknown_keys(j,
                      {"n_classes", "runs_per_class", "test_runs_per_class",
                       "samples_per_run", "n_features", "archetypes",
                       "noise_std", "seed", "window", "stride", "test_onset"},
                      "synthetic spec");
  SyntheticSpec spec;
  try {
    spec.n_classes = j.at("n_classes").get<size_t>();
    spec.runs_per_class = j.at("runs_per_class").get<size_t>();
    spec.samples_per_run = j.at("samples_per_run").get<size_t>();
    spec.n_features = j.at("n_features").get<size_t>();
    spec.noise_std = j.at("noise_std").get<double>();
    spec.seed = j.at("seed").get<uint64_t>();
    if (j.count("test_runs_per_class"))
      spec.test_runs_per_class = j["test_runs_per_class"].get<size_t>();
    if (j.count("window")) spec.window_len = j["window"].get<size_t>();
    if (j.count("stride")) spec.stride = j["stride"].get<size_t>();
    if (j.count("test_onset")) spec.test_onset = j["test_onset"].get<size_t>();
    for (const json& a : j.at("archetypes")) {
      reject_unknown_keys(a, {"kind", "magnitude"}, "synthetic spec archetype");
      ClassSpec cs;
      cs.kind = archetype_from_string(a.at("kind").get<std::string>());
      if (a.count("magnitude")) cs.magnitude = a["magnitude"].get<double>();
      spec.archetypes.push_back(cs);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  return parse_synthetic_spec(read_text_file(path));
}

namespace {

RawRun generate_run(const SyntheticSpec& spec, size_t class_index,
                    size_t onset, Rng& rng) {
  size_t t_len = spec.samples_per_run;
  size_t n = spec.n_features;
  std::vector<double> values(t_len * n);
  for (double& v : values) v = rng.normal() * spec.noise_std;

  const ClassSpec& cs = spec.archetypes[class_index];
  if (cs.kind != Archetype::None) {
    double magnitude = cs.magnitude;
    if (cs.kind == Archetype::Overlap) {
      // Keep the shift below the noise floor so the class stays hard.
      magnitude = std::min(magnitude, 0.8 * spec.noise_std);
    }
    std::vector<size_t> features = spec.class_features(class_index);
    double ramp_len =
        std::max<double>(1.0, static_cast<double>(t_len - 1 - onset));
    for (size_t t = onset; t < t_len; ++t) {
      double signal = 0.0;
      double rel = static_cast<double>(t - onset);
      switch (cs.kind) {
        case Archetype::Step:
        case Archetype::Overlap:
          signal = magnitude;
          break;
        case Archetype::Drift:
          signal = magnitude * rel / ramp_len;
          break;
        case Archetype::Oscillation:
          signal = magnitude * std::sin(2.0 * 3.14159265358979323846 * rel /
                                        20.0);
          break;
        case Archetype::None:
          break;
      }
      for (size_t f : features) values[t * n + f] += signal;
    }
  }

  RawRun run;
  run.samples = Tensor({t_len, n}, std::move(values));
  run.fault_class = static_cast<int>(class_index);
  run.onset_index = class_index == 0 ? 0 : onset;
  return run;
}

std::map<int, std::string> synth_class_names(const SyntheticSpec& spec) {
  std::map<int, std::string> names;
  for (size_t c = 0; c < spec.n_classes; ++c) {
    const ClassSpec& cs = spec.archetypes[c];
    names[static_cast<int>(c)] =
        cs.kind == Archetype::None
            ? "normal"
            : to_string(cs.kind) + "_" + std::to_string(c);
  }
  return names;
}

DatasetBundle bundle_runs(std::vector<RawRun> runs, size_t window_len,
                          size_t stride, std::map<int, std::string> names,
                          std::string dataset_id) {
  DatasetBundle bundle;
  bundle.window_len = window_len;
  bundle.stride = stride;
  bundle.class_names = std::move(names);
  bundle.dataset_id = std::move(dataset_id);
  for (size_t r = 0; r < runs.size(); ++r) {
    WindowBatch batch = make_windows(runs[r], window_len, stride);
    for (size_t i = 0; i < batch.windows.size(); ++i) {
      bundle.windows.push_back(WindowRef{r, batch.starts[i], batch.labels[i]});
    }
  }
  bundle.runs = std::move(runs);
  return bundle;
}

std::string synth_dataset_id(const SyntheticSpec& spec, const char* part) {
  std::ostringstream os;
  os << spec.n_classes << ':' << spec.runs_per_class << ':'
     << spec.test_runs_per_class << ':' << spec.samples_per_run << ':'
     << spec.n_features << ':' << spec.noise_std << ':' << spec.seed << ':'
     << spec.window_len << ':' << spec.stride << ':' << spec.test_onset;
  for (const ClassSpec& cs : spec.archetypes)
    os << ':' << to_string(cs.kind) << ':' << cs.magnitude;
  return std::string("synth-") + part + "-" + fnv1a64_hex(os.str());
}

}  // namespace

SynthOutput synthesize_full(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  std::vector<RawRun> train_runs;
  for (size_t c = 0; c < spec.n_classes; ++c) {
    for (size_t r = 0; r < spec.runs_per_class; ++r) {
      train_runs.push_back(generate_run(spec, c, 0, rng));
    }
  }
  std::vector<RawRun> test_runs;
  for (size_t c = 0; c < spec.n_classes; ++c) {
    for (size_t r = 0; r < spec.test_runs_per_class; ++r) {
      test_runs.push_back(
          generate_run(spec, c, c == 0 ? 0 : spec.test_onset, rng));
    }
  }

  SynthOutput out;
  out.standardizer = fit_standardizer(train_runs);
  for (RawRun& run : train_runs) run = out.standardizer.apply(run);
  for (RawRun& run : test_runs) run = out.standardizer.apply(run);

  std::map<int, std::string> names = synth_class_names(spec);
  out.train = bundle_runs(std::move(train_runs), spec.window_len, spec.stride,
                          names, synth_dataset_id(spec, "train"));
  out.test = bundle_runs(std::move(test_runs), spec.window_len, spec.stride,
                         names, synth_dataset_id(spec, "test"));
  return out;
}

std::pair<WindowedDataset, WindowedDataset> synthesize(
    const SyntheticSpec& spec) {
  SynthOutput out = synthesize_full(spec);
  return {out.train.materialize(), out.test.materialize()};
}

// ---------------------------------------------------------------------------
// Dataset cache

WindowedDataset DatasetBundle::materialize() const {
  WindowedDataset ds;
  ds.class_names = class_names;
  for (const WindowRef& ref : windows) {
    if (ref.run_index >= runs.size()) {
      throw ContractError("dataset: window references run " +
                          std::to_string(ref.run_index) + " of " +
                          std::to_string(runs.size()));
    }
    const RawRun& run = runs[ref.run_index];
    size_t n = run.n_features();
    if (ref.start + window_len > run.length()) {
      throw ContractError("dataset: window at " + std::to_string(ref.start) +
                          " overruns run of length " +
                          std::to_string(run.length()));
    }
    const std::vector<double>& v = run.samples.values();
    std::vector<double> slice(
        v.begin() + static_cast<long>(ref.start * n),
        v.begin() + static_cast<long>((ref.start + window_len) * n));
    ds.windows.emplace_back(std::vector<size_t>{window_len, n},
                            std::move(slice));
    ds.labels.push_back(ref.label);
  }
  return ds;
}

void save_dataset(const DatasetBundle& bundle,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "runs");

  json meta;
  meta["format"] = "gdla-dataset-v1";
  meta["window"] = bundle.window_len;
  meta["stride"] = bundle.stride;
  meta["n_features"] =
      bundle.runs.empty() ? 0 : bundle.runs[0].n_features();
  meta["dataset_id"] = bundle.dataset_id;
  json names = json::object();
  for (const auto& [label, name] : bundle.class_names)
    names[std::to_string(label)] = name;
  meta["class_names"] = names;
  {
    std::ofstream os(dir / "dataset.json");
    if (!os) throw IoError("cannot write '" + (dir / "dataset.json").string() + "'");
    os << meta.dump(2) << "\n";
  }

  {
    std::ofstream os(dir / "runs.csv");
    if (!os) throw IoError("cannot write '" + (dir / "runs.csv").string() + "'");
    os << "run_index,file,fault_class,onset_index\n";
    for (size_t r = 0; r < bundle.runs.size(); ++r) {
      char name[32];
      std::snprintf(name, sizeof name, "runs/run_%04zu.csv", r);
      os << r << ',' << name << ',' << bundle.runs[r].fault_class << ','
         << bundle.runs[r].onset_index << "\n";
      save_run_csv(bundle.runs[r], dir / name);
    }
  }

  {
    std::ofstream os(dir / "windows.csv");
    if (!os) throw IoError("cannot write '" + (dir / "windows.csv").string() + "'");
    os << "run_index,start,label\n";
    for (const WindowRef& ref : bundle.windows)
      os << ref.run_index << ',' << ref.start << ',' << ref.label << "\n";
  }
}

bool is_dataset_dir(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "dataset.json");
}

DatasetBundle load_dataset(const std::filesystem::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text_file(dir / "dataset.json"));
  } catch (const json::exception& e) {
    throw ParseError("dataset.json: " + std::string(e.what()));
  }
  if (meta.value("format", "") != "gdla-dataset-v1") {
    throw ParseError("'" + dir.string() + "' is not a dataset directory");
  }
  DatasetBundle bundle;
  bundle.window_len = meta.at("window").get<size_t>();
  bundle.stride = meta.at("stride").get<size_t>();
  bundle.dataset_id = meta.value("dataset_id", "");
  size_t n_features = meta.at("n_features").get<size_t>();
  for (const auto& item : meta.at("class_names").items()) {
    bundle.class_names[std::stoi(item.key())] =
        item.value().get<std::string>();
  }

  std::ifstream runs_csv(dir / "runs.csv");
  if (!runs_csv) throw IoError("cannot open '" + (dir / "runs.csv").string() + "'");
  std::string line;
  std::getline(runs_csv, line);  // header
  while (std::getline(runs_csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = tokenize(line, true);
    if (cells.size() != 4)
      throw ParseError("runs.csv: expected 4 columns, got " +
                       std::to_string(cells.size()));
    bundle.runs.push_back(load_run(dir / cells[1], std::stoi(cells[2]),
                                   static_cast<size_t>(std::stoul(cells[3])),
                                   n_features));
  }

  std::ifstream windows_csv(dir / "windows.csv");
  if (!windows_csv)
    throw IoError("cannot open '" + (dir / "windows.csv").string() + "'");
  std::getline(windows_csv, line);  // header
  while (std::getline(windows_csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = tokenize(line, true);
    if (cells.size() != 3)
      throw ParseError("windows.csv: expected 3 columns, got " +
                       std::to_string(cells.size()));
    bundle.windows.push_back(WindowRef{static_cast<size_t>(std::stoul(cells[0])),
                                       static_cast<size_t>(std::stoul(cells[1])),
                                       std::stoi(cells[2])});
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Raw corpus ingestion

bool is_corpus_dir(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "corpus.csv");
}

std::vector<CorpusEntry> read_corpus_manifest(
    const std::filesystem::path& dir) {
  std::ifstream is(dir / "corpus.csv");
  if (!is) throw IoError("cannot open '" + (dir / "corpus.csv").string() + "'");
  std::vector<CorpusEntry> entries;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells = tokenize(line, true);
    if (line_no == 1 && !cells.empty() && cells[0] == "file") continue;
    if (cells.size() < 2 || cells.size() > 3) {
      throw ParseError("corpus.csv line " + std::to_string(line_no) +
                       ": expected file,fault_class[,onset]");
    }
    CorpusEntry entry;
    entry.file = dir / cells[0];
    try {
      entry.fault_class = std::stoi(cells[1]);
      if (cells.size() == 3 && !cells[2].empty())
        entry.onset = static_cast<size_t>(std::stoul(cells[2]));
    } catch (const std::exception&) {
      throw ParseError("corpus.csv line " + std::to_string(line_no) +
                       ": bad integer field");
    }
    entries.push_back(std::move(entry));
  }
  if (entries.empty()) throw ParseError("corpus.csv: no entries");
  return entries;
}

std::map<int, std::string> tep_class_names(int max_class) {
  std::map<int, std::string> names;
  names[0] = "normal";
  for (int c = 1; c <= max_class; ++c) {
    char buffer[16];
    std::snprintf(buffer, sizeof buffer, "fault_%02d", c);
    names[c] = buffer;
  }
  return names;
}

WindowedDataset ingest_corpus(const std::filesystem::path& dir,
                              const IngestOptions& options) {
  std::vector<CorpusEntry> entries = read_corpus_manifest(dir);
  std::vector<RawRun> runs;
  int max_class = 0;
  for (const CorpusEntry& entry : entries) {
    size_t onset = entry.onset.value_or(
        entry.fault_class > 0 ? options.default_onset : 0);
    runs.push_back(load_run(entry.file, entry.fault_class, onset,
                            options.expected_features));
    max_class = std::max(max_class, entry.fault_class);
  }

  Standardizer standardizer =
      options.standardizer ? *options.standardizer : fit_standardizer(runs);
  WindowedDataset ds;
  ds.class_names = tep_class_names(max_class);
  for (const RawRun& raw : runs) {
    RawRun run = standardizer.apply(raw);
    WindowBatch batch = make_windows(run, options.window_len, options.stride);
    for (size_t i = 0; i < batch.windows.size(); ++i) {
      ds.windows.push_back(std::move(batch.windows[i]));
      ds.labels.push_back(batch.labels[i]);
    }
  }
  if (!options.excluded_classes.empty()) {
    ds = exclude_classes(ds, options.excluded_classes);
  }
  return ds;
}

}  // namespace gdla
