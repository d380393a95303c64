#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gdla/tensor.hpp"

namespace gdla {

// Number of monitored process variables in a standard TEP run.
inline constexpr size_t kTepFeatures = 52;
// Default fault onset in test runs: 8 hours at one sample per 3 minutes.
inline constexpr size_t kDefaultOnset = 160;

// One recorded run: T samples of n_features sensor readings, the fault
// class active in the run (0 = normal), and the sample index at which the
// fault becomes active (0 for normal runs and for training runs, whose
// whole length carries the class).
struct RawRun {
  Tensor samples;  // T x n_features
  int fault_class = 0;
  size_t onset_index = 0;

  size_t length() const { return samples.rows(); }
  size_t n_features() const { return samples.cols(); }
};

// Parses a whitespace- or comma-separated numeric matrix. A non-numeric
// first line is treated as a header and skipped. A parsed F x T matrix
// with T > F is transposed (the classic orientation quirk of TEP training
// files); the resulting feature count must equal expected_features.
RawRun load_run(const std::filesystem::path& path, int fault_class,
                size_t onset_index, size_t expected_features = kTepFeatures);

// Writes the samples matrix as CSV with a var_1..var_N header, full
// precision (round-trips through load_run bit-exactly).
void save_run_csv(const RawRun& run, const std::filesystem::path& path);

// Per-feature affine transform fitted on training data only.
struct Standardizer {
  std::vector<double> means;
  std::vector<double> stds;  // population std, floored at 1e-8

  RawRun apply(const RawRun& run) const;
  void save(const std::filesystem::path& path) const;
  static Standardizer load(const std::filesystem::path& path);
};

Standardizer fit_standardizer(const std::vector<RawRun>& training_runs);

// Windows labeled by the fault-onset rule: a window takes the run's class
// iff its start index is at or past the onset, otherwise it is normal.
struct WindowBatch {
  std::vector<Tensor> windows;  // each W x n_features
  std::vector<int> labels;
  std::vector<size_t> starts;
};

WindowBatch make_windows(const RawRun& run, size_t window_len, size_t stride);

struct WindowedDataset {
  std::vector<Tensor> windows;
  std::vector<int> labels;
  std::map<int, std::string> class_names;

  size_t size() const { return windows.size(); }
  // Distinct labels present, ascending.
  std::vector<int> present_labels() const;
};

// Drops windows whose label is excluded and remaps the remaining labels to
// a dense 0..C'-1 range (ascending original order); class_names records
// the original names under the new labels.
WindowedDataset exclude_classes(const WindowedDataset& ds,
                                const std::set<int>& excluded);

// Deterministic stratified split; every class contributes to both parts.
std::pair<WindowedDataset, WindowedDataset> train_val_split(
    const WindowedDataset& ds, double fraction, uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic desk-scale data

// Fault archetypes: Step shifts a class-specific feature subset, Drift
// ramps it linearly after onset, Oscillation superimposes a sinusoid, and
// Overlap applies a shift kept below the noise floor (deliberately hard,
// standing in for incipient faults). None is the normal condition.
enum class Archetype { None, Step, Drift, Oscillation, Overlap };

std::string to_string(Archetype a);
Archetype archetype_from_string(const std::string& name);

struct ClassSpec {
  Archetype kind = Archetype::None;
  double magnitude = 0.0;
};

struct SyntheticSpec {
  size_t n_classes = 2;
  size_t runs_per_class = 4;        // training runs
  size_t test_runs_per_class = 2;
  size_t samples_per_run = 115;
  size_t n_features = 8;
  std::vector<ClassSpec> archetypes;  // one per class
  double noise_std = 1.0;
  uint64_t seed = 0;
  size_t window_len = 20;
  size_t stride = 5;
  size_t test_onset = 40;  // fault onset in test runs

  void validate() const;
  // Feature columns carrying the archetype signal for a class.
  std::vector<size_t> class_features(size_t class_index) const;
};

SyntheticSpec parse_synthetic_spec(const std::string& json_text);
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// On-disk dataset cache: dataset.json + runs.csv + windows.csv + runs/.
// Reload is bit-exact; the windows manifest carries final labels, so
// exclusions survive the round trip.

struct WindowRef {
  size_t run_index = 0;
  size_t start = 0;
  int label = 0;
};

struct DatasetBundle {
  std::vector<RawRun> runs;
  std::vector<WindowRef> windows;
  size_t window_len = 0;
  size_t stride = 0;
  std::map<int, std::string> class_names;
  std::string dataset_id;

  WindowedDataset materialize() const;
};

struct SynthOutput {
  DatasetBundle train;  // runs standardized with the training fit
  DatasetBundle test;
  Standardizer standardizer;
};

// Generates runs (Gaussian baseline plus per-class archetype), fits the
// standardizer on the training runs, applies it to both splits, and
// windows everything. Byte-identical for identical spec + seed.
SynthOutput synthesize_full(const SyntheticSpec& spec);
std::pair<WindowedDataset, WindowedDataset> synthesize(
    const SyntheticSpec& spec);

void save_dataset(const DatasetBundle& bundle,
                  const std::filesystem::path& dir);
DatasetBundle load_dataset(const std::filesystem::path& dir);
bool is_dataset_dir(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Raw corpus ingestion: a directory with corpus.csv listing
// file,fault_class[,onset] rows relative to the directory.

struct CorpusEntry {
  std::filesystem::path file;
  int fault_class = 0;
  std::optional<size_t> onset;  // when absent: default_onset for faults, 0 otherwise
};

std::vector<CorpusEntry> read_corpus_manifest(
    const std::filesystem::path& dir);
bool is_corpus_dir(const std::filesystem::path& dir);

struct IngestOptions {
  size_t window_len = 20;
  size_t stride = 5;
  size_t default_onset = kDefaultOnset;
  std::set<int> excluded_classes;
  size_t expected_features = kTepFeatures;
  // When absent, a standardizer is fitted on the ingested runs themselves;
  // pass the training-corpus fit for a faithful protocol.
  std::optional<Standardizer> standardizer;
};

WindowedDataset ingest_corpus(const std::filesystem::path& dir,
                              const IngestOptions& options);

// Human-readable class names for a TEP-style roster: 0 -> "normal",
// c -> "fault_XX".
std::map<int, std::string> tep_class_names(int max_class);

}  // namespace gdla
