#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcnn/errors.hpp"

namespace mmcnn {

// K x K counts, rows = true class, cols = predicted class.
struct ConfusionMatrix {
  int k = 0;
  std::vector<long long> counts;

  explicit ConfusionMatrix(int classes = 3)
      : k(classes), counts(std::size_t(classes) * classes, 0) {}

  static ConfusionMatrix from(int classes, std::vector<long long> c) {
    ConfusionMatrix cm(classes);
    if (c.size() != cm.counts.size())
      throw DimensionError("ConfusionMatrix::from: wrong count size");
    cm.counts = std::move(c);
    return cm;
  }

  long long& at(int true_c, int pred_c) {
    return counts[std::size_t(true_c) * k + pred_c];
  }
  long long at(int true_c, int pred_c) const {
    return counts[std::size_t(true_c) * k + pred_c];
  }
  void add(int true_c, int pred_c, long long n = 1) { at(true_c, pred_c) += n; }

  long long total() const {
    long long t = 0;
    for (auto v : counts) t += v;
    return t;
  }
  long long trace() const {
    long long t = 0;
    for (int i = 0; i < k; ++i) t += at(i, i);
    return t;
  }
};

// One-vs-rest counts and derived metrics for a single class. f1_pr is the
// precision/sensitivity harmonic mean; f1_hm the sensitivity/specificity one.
// A 0/0 denominator yields 0 with the degenerate flag set.
struct ClassMetrics {
  long long tp = 0, fn = 0, fp = 0, tn = 0;
  double sensitivity = 0, specificity = 0, precision = 0;
  double f1_pr = 0, f1_hm = 0;
  bool degenerate = false;
};

namespace detail {

inline double safe_ratio(long long num, long long den, bool& flag) {
  if (den == 0) {
    flag = true;
    return 0.0;
  }
  return double(num) / double(den);
}

inline double harmonic(double a, double b, bool& flag) {
  if (a + b == 0.0) {
    flag = true;
    return 0.0;
  }
  return 2.0 * a * b / (a + b);
}

}  // namespace detail

inline std::vector<ClassMetrics> per_class(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ConfigError("per_class: empty confusion matrix");
  std::vector<ClassMetrics> out(std::size_t(cm.k));
  long long total = cm.total();
  for (int c = 0; c < cm.k; ++c) {
    ClassMetrics& m = out[std::size_t(c)];
    m.tp = cm.at(c, c);
    for (int j = 0; j < cm.k; ++j)
      if (j != c) m.fn += cm.at(c, j);
    for (int i = 0; i < cm.k; ++i)
      if (i != c) m.fp += cm.at(i, c);
    m.tn = total - m.tp - m.fn - m.fp;
    m.sensitivity = detail::safe_ratio(m.tp, m.tp + m.fn, m.degenerate);
    m.specificity = detail::safe_ratio(m.tn, m.tn + m.fp, m.degenerate);
    m.precision = detail::safe_ratio(m.tp, m.tp + m.fp, m.degenerate);
    m.f1_pr = detail::harmonic(m.precision, m.sensitivity, m.degenerate);
    m.f1_hm = detail::harmonic(m.sensitivity, m.specificity, m.degenerate);
  }
  return out;
}

enum class F1Variant { precision_recall, sensitivity_specificity };

struct OverallMetrics {
  double overall_f1 = 0;
  double accuracy = 0;
};

// Unweighted class mean of the chosen F1 variant, plus trace/total accuracy.
inline OverallMetrics overall(const std::vector<ClassMetrics>& per_cls,
                              const ConfusionMatrix& cm,
                              F1Variant variant = F1Variant::precision_recall) {
  if (per_cls.empty()) throw ConfigError("overall: no per-class metrics");
  OverallMetrics o;
  for (const auto& m : per_cls)
    o.overall_f1 += variant == F1Variant::precision_recall ? m.f1_pr : m.f1_hm;
  o.overall_f1 /= double(per_cls.size());
  o.accuracy = double(cm.trace()) / double(cm.total());
  return o;
}

// Half-up rounding to 3 decimals, matching the reporting convention.
inline double round3(double v) { return std::floor(v * 1000.0 + 0.5) / 1000.0; }

inline std::string format3(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(3) << round3(v);
  return ss.str();
}

// Aligned table: Sen/Spe/F1 per class, then Overall F1 and Accuracy.
inline std::string metrics_table(const std::vector<std::string>& class_names,
                                 const std::vector<ClassMetrics>& per_cls,
                                 const OverallMetrics& ov) {
  std::ostringstream ss;
  ss << std::left << std::setw(10) << "Class" << std::right << std::setw(8)
     << "Sen." << std::setw(8) << "Spe." << std::setw(8) << "F1" << "\n";
  for (std::size_t c = 0; c < per_cls.size(); ++c) {
    const auto& m = per_cls[c];
    ss << std::left << std::setw(10) << class_names[c] << std::right
       << std::setw(8) << format3(m.sensitivity) << std::setw(8)
       << format3(m.specificity) << std::setw(8) << format3(m.f1_pr) << "\n";
  }
  ss << std::left << std::setw(10) << "Overall" << std::right << std::setw(8)
     << "F1=" + format3(ov.overall_f1) << "  "
     << "Accuracy=" + format3(ov.accuracy) << "\n";
  return ss.str();
}

inline nlohmann::json metrics_json(const std::vector<std::string>& class_names,
                                   const ConfusionMatrix& cm,
                                   const std::vector<ClassMetrics>& per_cls,
                                   const OverallMetrics& ov) {
  nlohmann::json j;
  j["confusion_matrix"] = nlohmann::json::array();
  for (int i = 0; i < cm.k; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < cm.k; ++c) row.push_back(cm.at(i, c));
    j["confusion_matrix"].push_back(row);
  }
  for (std::size_t c = 0; c < per_cls.size(); ++c) {
    const auto& m = per_cls[c];
    nlohmann::json cj;
    cj["tp"] = m.tp;
    cj["fn"] = m.fn;
    cj["fp"] = m.fp;
    cj["tn"] = m.tn;
    cj["sensitivity"] = round3(m.sensitivity);
    cj["specificity"] = round3(m.specificity);
    cj["precision"] = round3(m.precision);
    cj["f1_pr"] = round3(m.f1_pr);
    cj["f1_hm"] = round3(m.f1_hm);
    cj["degenerate"] = m.degenerate;
    j["per_class"][class_names[c]] = cj;
  }
  j["overall_f1"] = round3(ov.overall_f1);
  j["accuracy"] = round3(ov.accuracy);
  return j;
}

}  // namespace mmcnn
