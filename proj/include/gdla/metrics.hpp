#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gdla/errors.hpp"

namespace gdla {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::vector<int64_t> counts;  // C x C, row-major
  size_t n_classes = 0;
  int64_t total = 0;

  int64_t at(size_t true_class, size_t predicted) const {
    return counts[true_class * n_classes + predicted];
  }
};

ConfusionMatrix confusion(const std::vector<int>& predictions,
                          const std::vector<int>& labels, size_t n_classes);

// One-vs-rest metrics for a single class. far is the false-alarm rate
// FP/(TN+FP); mar is the per-class misclassification share (FP+FN)/total.
// Any 0/0 ratio is reported as 0 so reports stay finite.
struct PerClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double far = 0.0;
  double mar = 0.0;
  int64_t support = 0;
};

// Precision is computed as TP/(TP+FP); the source formula sheet prints
// TP/(TP+FN) for it, identical to recall, which contradicts its own prose
// definition and is treated as a misprint here.
std::vector<PerClassMetrics> per_class_metrics(const ConfusionMatrix& cm);

struct ClassificationReport {
  ConfusionMatrix matrix;
  std::vector<PerClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double macro_far = 0.0;
  double macro_mar = 0.0;
  double f1_variance = 0.0;  // population variance of per-class F1
  double accuracy = 0.0;
  // Presentation metadata.
  std::map<int, std::string> class_names;
  std::string dataset_id;
  std::string model_config_hash;
};

ClassificationReport report(const ConfusionMatrix& cm);

// JSON document with the full matrix, per-class rows, macro row, and
// metadata. Key order and number formatting are deterministic.
std::string report_to_json(const ClassificationReport& rep);
void save_report_json(const ClassificationReport& rep,
                      const std::filesystem::path& path);
ClassificationReport report_from_json(const std::string& text);

// Flat per-class CSV in the column order class, precision, recall, f1,
// far, mar (values in percent), with a trailing macro-average row.
std::string report_to_csv(const ClassificationReport& rep);
void save_report_csv(const ClassificationReport& rep,
                     const std::filesystem::path& path);

// Fixed-width text rendering of the same table.
std::string render_report_table(const ClassificationReport& rep);

}  // namespace gdla
