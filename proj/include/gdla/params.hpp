#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include "gdla/tensor.hpp"

namespace gdla {

// Named collection of learnable tensors. Every entry is grad-enabled and
// names are unique; iteration is sorted by name, so save/load and gradient
// maps are deterministic.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;
  using const_iterator = Map::const_iterator;

  void insert(const std::string& name, Tensor value);
  // Replaces an existing entry; the new value keeps the same shape.
  void assign(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  size_t size() const { return entries_.size(); }
  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }

  // Returns a copy with one coordinate of one parameter shifted by delta.
  ParameterSet perturbed(const std::string& name, size_t flat_index,
                         double delta) const;

  // Binary checkpoint, bitwise lossless. Layout (documented in
  // docs/formats.md): magic "GDLAPRM1", u32 version, u64 count, then per
  // parameter sorted by name: u32 name length, name bytes, u32 rank,
  // u64 extents, f64 values; all integers and reals little-endian.
  void save(const std::filesystem::path& path) const;
  static ParameterSet load(const std::filesystem::path& path);

 private:
  Map entries_;
};

// Gradient of a scalar loss with respect to every parameter. Parameters
// that did not contribute to the loss get zero gradients of matching shape.
std::map<std::string, Tensor> backward(const Tensor& loss,
                                       const ParameterSet& params);

// Outcome of a finite-difference gradient comparison.
struct GradReport {
  std::map<std::string, double> per_param_max_rel_error;
  double max_rel_error = 0.0;
  bool pass = false;
};

// Compares backward() gradients of f against central finite differences
// over every coordinate of every parameter. Relative error per coordinate
// is |a - b| / max(|a|, |b|, 1e-8). f must be deterministic; two baseline
// evaluations are compared to detect violations. Resets the active graph.
GradReport finite_diff_check(
    const std::function<Tensor(const ParameterSet&)>& f,
    const ParameterSet& params, double step, double tolerance);

}  // namespace gdla
