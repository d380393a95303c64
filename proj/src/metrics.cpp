#include "gdla/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace gdla {

namespace {
using nlohmann::json;
}

ConfusionMatrix confusion(const std::vector<int>& predictions,
                          const std::vector<int>& labels, size_t n_classes) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("confusion: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) +
                         " labels");
  }
  if (n_classes == 0) throw ContractError("confusion: n_classes must be positive");
  ConfusionMatrix cm;
  cm.n_classes = n_classes;
  cm.counts.assign(n_classes * n_classes, 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    int t = labels[i];
    int p = predictions[i];
    if (t < 0 || static_cast<size_t>(t) >= n_classes) {
      throw IndexError("confusion: label " + std::to_string(t) +
                       " at position " + std::to_string(i) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
    if (p < 0 || static_cast<size_t>(p) >= n_classes) {
      throw IndexError("confusion: prediction " + std::to_string(p) +
                       " at position " + std::to_string(i) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
    ++cm.counts[static_cast<size_t>(t) * n_classes + static_cast<size_t>(p)];
  }
  cm.total = static_cast<int64_t>(labels.size());
  return cm;
}

std::vector<PerClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  if (cm.total <= 0) throw ContractError("per_class_metrics: empty matrix");
  size_t c_count = cm.n_classes;
  std::vector<PerClassMetrics> out(c_count);
  auto ratio = [](int64_t num, int64_t den) {
    return den == 0 ? 0.0
                    : static_cast<double>(num) / static_cast<double>(den);
  };
  for (size_t c = 0; c < c_count; ++c) {
    int64_t tp = cm.at(c, c);
    int64_t fn = 0, fp = 0;
    for (size_t other = 0; other < c_count; ++other) {
      if (other == c) continue;
      fn += cm.at(c, other);
      fp += cm.at(other, c);
    }
    int64_t tn = cm.total - tp - fn - fp;
    PerClassMetrics& m = out[c];
    m.support = tp + fn;
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    m.far = ratio(fp, tn + fp);
    m.mar = ratio(fp + fn, cm.total);
  }
  return out;
}

ClassificationReport report(const ConfusionMatrix& cm) {
  ClassificationReport rep;
  rep.matrix = cm;
  rep.per_class = per_class_metrics(cm);
  size_t c_count = rep.per_class.size();
  int64_t trace = 0;
  for (size_t c = 0; c < c_count; ++c) trace += cm.at(c, c);
  rep.accuracy = static_cast<double>(trace) / static_cast<double>(cm.total);

  for (const PerClassMetrics& m : rep.per_class) {
    rep.macro_precision += m.precision;
    rep.macro_recall += m.recall;
    rep.macro_f1 += m.f1;
    rep.macro_far += m.far;
    rep.macro_mar += m.mar;
  }
  double cn = static_cast<double>(c_count);
  rep.macro_precision /= cn;
  rep.macro_recall /= cn;
  rep.macro_f1 /= cn;
  rep.macro_far /= cn;
  rep.macro_mar /= cn;

  for (const PerClassMetrics& m : rep.per_class) {
    double d = m.f1 - rep.macro_f1;
    rep.f1_variance += d * d;
  }
  rep.f1_variance /= cn;
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string class_label(const ClassificationReport& rep, size_t c) {
  auto it = rep.class_names.find(static_cast<int>(c));
  return it != rep.class_names.end() ? it->second
                                     : "class_" + std::to_string(c);
}

json per_class_json(const ClassificationReport& rep) {
  json rows = json::array();
  for (size_t c = 0; c < rep.per_class.size(); ++c) {
    const PerClassMetrics& m = rep.per_class[c];
    json row;
    row["class"] = c;
    row["name"] = class_label(rep, c);
    row["precision"] = m.precision;
    row["recall"] = m.recall;
    row["f1"] = m.f1;
    row["far"] = m.far;
    row["mar"] = m.mar;
    row["support"] = m.support;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::string report_to_json(const ClassificationReport& rep) {
  json j;
  j["accuracy"] = rep.accuracy;
  j["classes"] = rep.per_class.size();
  j["confusion"] = rep.matrix.counts;
  j["dataset_id"] = rep.dataset_id;
  j["f1_variance"] = rep.f1_variance;
  j["macro"] = {{"precision", rep.macro_precision},
                {"recall", rep.macro_recall},
                {"f1", rep.macro_f1},
                {"far", rep.macro_far},
                {"mar", rep.macro_mar}};
  j["model_config_hash"] = rep.model_config_hash;
  j["per_class"] = per_class_json(rep);
  j["total"] = rep.matrix.total;
  return j.dump(2) + "\n";
}

void save_report_json(const ClassificationReport& rep,
                      const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write report '" + path.string() + "'");
  os << report_to_json(rep);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

ClassificationReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  ClassificationReport rep;
  try {
    size_t c_count = j.at("classes").get<size_t>();
    rep.matrix.n_classes = c_count;
    rep.matrix.counts = j.at("confusion").get<std::vector<int64_t>>();
    rep.matrix.total = j.at("total").get<int64_t>();
    rep.accuracy = j.at("accuracy").get<double>();
    rep.f1_variance = j.at("f1_variance").get<double>();
    rep.dataset_id = j.value("dataset_id", "");
    rep.model_config_hash = j.value("model_config_hash", "");
    const json& macro = j.at("macro");
    rep.macro_precision = macro.at("precision").get<double>();
    rep.macro_recall = macro.at("recall").get<double>();
    rep.macro_f1 = macro.at("f1").get<double>();
    rep.macro_far = macro.at("far").get<double>();
    rep.macro_mar = macro.at("mar").get<double>();
    for (const json& row : j.at("per_class")) {
      PerClassMetrics m;
      m.precision = row.at("precision").get<double>();
      m.recall = row.at("recall").get<double>();
      m.f1 = row.at("f1").get<double>();
      m.far = row.at("far").get<double>();
      m.mar = row.at("mar").get<double>();
      m.support = row.at("support").get<int64_t>();
      int c = row.at("class").get<int>();
      rep.class_names[c] = row.at("name").get<std::string>();
      rep.per_class.push_back(m);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  return rep;
}

namespace {

std::string percent(double fraction) {
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "%.6g", fraction * 100.0);
  return buffer;
}

}  // namespace

std::string report_to_csv(const ClassificationReport& rep) {
  std::ostringstream os;
  os << "class,precision,recall,f1,far,mar\n";
  for (size_t c = 0; c < rep.per_class.size(); ++c) {
    const PerClassMetrics& m = rep.per_class[c];
    os << class_label(rep, c) << ',' << percent(m.precision) << ','
       << percent(m.recall) << ',' << percent(m.f1) << ',' << percent(m.far)
       << ',' << percent(m.mar) << "\n";
  }
  os << "average," << percent(rep.macro_precision) << ','
     << percent(rep.macro_recall) << ',' << percent(rep.macro_f1) << ','
     << percent(rep.macro_far) << ',' << percent(rep.macro_mar) << "\n";
  return os.str();
}

void save_report_csv(const ClassificationReport& rep,
                     const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write report '" + path.string() + "'");
  os << report_to_csv(rep);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

std::string render_report_table(const ClassificationReport& rep) {
  std::ostringstream os;
  auto cell = [](double fraction) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%8.2f", fraction * 100.0);
    return std::string(buffer);
  };
  size_t name_width = 8;
  for (size_t c = 0; c < rep.per_class.size(); ++c)
    name_width = std::max(name_width, class_label(rep, c).size() + 1);

  os << std::left << std::setw(static_cast<int>(name_width)) << "Faults"
     << std::right << std::setw(14) << "Precision (%)" << std::setw(12)
     << "Recall (%)" << std::setw(14) << "F1-score (%)" << std::setw(10)
     << "FAR (%)" << std::setw(10) << "MAR (%)" << "\n";
  for (size_t c = 0; c < rep.per_class.size(); ++c) {
    const PerClassMetrics& m = rep.per_class[c];
    os << std::left << std::setw(static_cast<int>(name_width))
       << class_label(rep, c) << std::right << std::setw(14)
       << cell(m.precision) << std::setw(12) << cell(m.recall) << std::setw(14)
       << cell(m.f1) << std::setw(10) << cell(m.far) << std::setw(10)
       << cell(m.mar) << "\n";
  }
  os << std::left << std::setw(static_cast<int>(name_width)) << "Average"
     << std::right << std::setw(14) << cell(rep.macro_precision)
     << std::setw(12) << cell(rep.macro_recall) << std::setw(14)
     << cell(rep.macro_f1) << std::setw(10) << cell(rep.macro_far)
     << std::setw(10) << cell(rep.macro_mar) << "\n";
  os << "\nAccuracy: " << cell(rep.accuracy)
     << " %   F1 variance (fraction^2): " << rep.f1_variance << "\n";
  return os.str();
}

}  // namespace gdla
