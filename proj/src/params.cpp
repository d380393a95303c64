#include "gdla/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace gdla {

namespace detail {
// Defined in tensor.cpp.
const std::vector<double>* leaf_gradient(const Tensor& t);
bool run_backward_from(const Tensor& loss);
}  // namespace detail

void ParameterSet::insert(const std::string& name, Tensor value) {
  if (entries_.count(name)) {
    throw ContractError("ParameterSet: duplicate parameter name '" + name +
                        "'");
  }
  value.set_grad_enabled(true);
  entries_.emplace(name, std::move(value));
}

void ParameterSet::assign(const std::string& name, Tensor value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ContractError("ParameterSet: unknown parameter '" + name + "'");
  }
  if (value.shape() != it->second.shape()) {
    throw DimensionError("ParameterSet: cannot assign shape " +
                         value.shape_str() + " to '" + name + "' of shape " +
                         it->second.shape_str());
  }
  value.set_grad_enabled(true);
  it->second = std::move(value);
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ContractError("ParameterSet: unknown parameter '" + name + "'");
  }
  return it->second;
}

bool ParameterSet::contains(const std::string& name) const {
  return entries_.count(name) > 0;
}

ParameterSet ParameterSet::perturbed(const std::string& name,
                                     size_t flat_index, double delta) const {
  const Tensor& original = at(name);
  std::vector<double> values = original.values();
  if (flat_index >= values.size()) {
    throw IndexError("ParameterSet::perturbed: index " +
                     std::to_string(flat_index) + " out of range for '" +
                     name + "'");
  }
  values[flat_index] += delta;
  ParameterSet copy = *this;
  copy.assign(name, Tensor(original.shape(), std::move(values)));
  return copy;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

constexpr char kMagic[8] = {'G', 'D', 'L', 'A', 'P', 'R', 'M', '1'};
constexpr uint32_t kVersion = 1;

}  // namespace

void ParameterSet::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  write_u64(os, entries_.size());
  for (const auto& [name, tensor] : entries_) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(tensor.shape().size()));
    for (size_t e : tensor.shape()) write_u64(os, e);
    for (double v : tensor.values()) write_f64(os, v);
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

ParameterSet ParameterSet::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a parameter checkpoint");
  }
  uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " in '" + path.string() + "'");
  }
  uint64_t count = read_u64(is);
  ParameterSet result;
  for (uint64_t p = 0; p < count; ++p) {
    uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = read_u32(is);
    std::vector<size_t> shape(rank);
    size_t total = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<size_t>(read_u64(is));
      total *= shape[d];
    }
    std::vector<double> values(total);
    for (size_t i = 0; i < total; ++i) values[i] = read_f64(is);
    if (!is) throw IoError("truncated checkpoint '" + path.string() + "'");
    result.insert(name, Tensor(std::move(shape), std::move(values)));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradients

std::map<std::string, Tensor> backward(const Tensor& loss,
                                       const ParameterSet& params) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        loss.shape_str());
  }
  bool ran = detail::run_backward_from(loss);
  std::map<std::string, Tensor> grads;
  for (const auto& [name, p] : params) {
    const std::vector<double>* g =
        ran ? detail::leaf_gradient(p) : nullptr;
    grads.emplace(name, g ? Tensor(p.shape(), *g) : Tensor::zeros(p.shape()));
  }
  return grads;
}

GradReport finite_diff_check(
    const std::function<Tensor(const ParameterSet&)>& f,
    const ParameterSet& params, double step, double tolerance) {
  if (step <= 0.0) throw ContractError("finite_diff_check: step must be positive");

  auto value_of = [&](const ParameterSet& p) {
    NoGradGuard off;
    return f(p).scalar_value();
  };

  double baseline = value_of(params);
  double baseline_again = value_of(params);
  if (baseline != baseline_again) {
    throw DeterminismError(
        "finite_diff_check: two baseline evaluations differ (" +
        std::to_string(baseline) + " vs " + std::to_string(baseline_again) +
        ")");
  }

  new_graph();
  Tensor loss = f(params);
  std::map<std::string, Tensor> analytic = backward(loss, params);

  GradReport report;
  for (const auto& [name, p] : params) {
    const Tensor& grad = analytic.at(name);
    double worst = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      double plus = value_of(params.perturbed(name, i, step));
      double minus = value_of(params.perturbed(name, i, -step));
      double numeric = (plus - minus) / (2.0 * step);
      double a = grad.at(i);
      double rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
    report.per_param_max_rel_error[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

}  // namespace gdla
