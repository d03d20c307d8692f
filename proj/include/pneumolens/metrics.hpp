#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pneumolens {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// ROC needs both classes present.
class SingleClassError : public MetricsError {
 public:
  using MetricsError::MetricsError;
};

inline constexpr double kDefaultThreshold = 0.5;

struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  std::uint64_t positives() const noexcept { return tp + fn; }
  std::uint64_t negatives() const noexcept { return fp + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct ScoredPrediction {
  double score = 0;  // probability of Pneumonia
  int label = 0;     // 1 = Pneumonia
};

namespace detail {

inline void check_predictions(std::span<const ScoredPrediction> preds, const char* op) {
  if (preds.empty()) throw MetricsError(std::string(op) + ": empty prediction list");
  for (const auto& p : preds) {
    if (!(p.score >= 0.0 && p.score <= 1.0)) {
      throw MetricsError(std::string(op) + ": score " + std::to_string(p.score) + " outside [0,1]");
    }
    if (p.label != 0 && p.label != 1) throw MetricsError(std::string(op) + ": label must be 0 or 1");
  }
}

inline void check_total(const ConfusionMatrix& cm, const char* op) {
  if (cm.total() == 0) throw MetricsError(std::string(op) + ": empty confusion matrix");
}

}  // namespace detail

/// score ≥ threshold is a positive (Pneumonia) prediction.
inline ConfusionMatrix confusion(std::span<const ScoredPrediction> preds, double threshold = kDefaultThreshold) {
  detail::check_predictions(preds, "confusion");
  ConfusionMatrix cm;
  for (const auto& p : preds) {
    const bool predicted = p.score >= threshold;
    if (p.label == 1) {
      (predicted ? cm.tp : cm.fn)++;
    } else {
      (predicted ? cm.fp : cm.tn)++;
    }
  }
  return cm;
}

struct BasicMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  // set when the metric's denominator is zero and it was reported as 0
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

inline BasicMetrics basic_metrics(const ConfusionMatrix& cm) {
  detail::check_total(cm, "basic_metrics");
  BasicMetrics m;
  const auto d = [](std::uint64_t v) { return static_cast<double>(v); };
  m.accuracy = d(cm.tp + cm.tn) / d(cm.total());
  if (cm.tp + cm.fp > 0) {
    m.precision = d(cm.tp) / d(cm.tp + cm.fp);
  } else {
    m.precision_undefined = true;
  }
  if (cm.tp + cm.fn > 0) {
    m.recall = d(cm.tp) / d(cm.tp + cm.fn);
  } else {
    m.recall_undefined = true;
  }
  if (m.precision + m.recall > 0) {
    m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1_undefined = true;
  }
  return m;
}

/// Matthews correlation; 0 when any marginal is empty.
inline double mcc(const ConfusionMatrix& cm) {
  detail::check_total(cm, "mcc");
  const double tp = static_cast<double>(cm.tp), fp = static_cast<double>(cm.fp);
  const double fn = static_cast<double>(cm.fn), tn = static_cast<double>(cm.tn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) return 0.0;
  return std::clamp((tp * tn - fp * fn) / std::sqrt(den), -1.0, 1.0);
}

/// Cohen's kappa against marginal-product chance agreement; 0 when p_e = 1.
inline double cohens_kappa(const ConfusionMatrix& cm) {
  detail::check_total(cm, "cohens_kappa");
  const double n = static_cast<double>(cm.total());
  const double po = static_cast<double>(cm.tp + cm.tn) / n;
  const double pe = (static_cast<double>(cm.tp + cm.fp) * static_cast<double>(cm.tp + cm.fn) +
                     static_cast<double>(cm.fn + cm.tn) * static_cast<double>(cm.fp + cm.tn)) /
                    (n * n);
  if (pe >= 1.0) return 0.0;
  return std::clamp((po - pe) / (1.0 - pe), -1.0, 1.0);
}

inline double brier(std::span<const ScoredPrediction> preds) {
  detail::check_predictions(preds, "brier");
  double acc = 0;
  for (const auto& p : preds) acc += (p.score - p.label) * (p.score - p.label);
  return acc / static_cast<double>(preds.size());
}

struct CurvePoint {
  double x = 0, y = 0;
  double threshold = 0;  // +inf for the (0,0) sentinel
};

struct RocResult {
  std::vector<CurvePoint> points;  // (fpr, tpr), nondecreasing in both
  double auc = 0;
};

namespace detail {

struct SweepStep {
  double threshold;
  std::uint64_t tp, fp;
};

// Cumulative counts at each unique score, highest first.
inline std::vector<SweepStep> sweep(std::span<const ScoredPrediction> preds) {
  std::vector<ScoredPrediction> sorted(preds.begin(), preds.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<SweepStep> steps;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    (sorted[i].label == 1 ? tp : fp)++;
    if (i + 1 == sorted.size() || sorted[i + 1].score != sorted[i].score) steps.push_back({sorted[i].score, tp, fp});
  }
  return steps;
}

}  // namespace detail

/// ROC over every unique score as threshold, preceded by the (0,0) sentinel;
/// trapezoidal AUC (tied scores contribute the diagonal, i.e. ½ per tie).
inline RocResult roc_curve_auc(std::span<const ScoredPrediction> preds) {
  detail::check_predictions(preds, "roc_curve_auc");
  const auto steps = detail::sweep(preds);
  const double pos = static_cast<double>(steps.back().tp), neg = static_cast<double>(steps.back().fp);
  if (pos == 0 || neg == 0) throw SingleClassError("roc_curve_auc: needs at least one positive and one negative label");
  RocResult r;
  r.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  for (const auto& s : steps) {
    const CurvePoint p{static_cast<double>(s.fp) / neg, static_cast<double>(s.tp) / pos, s.threshold};
    const CurvePoint& q = r.points.back();
    r.auc += (p.x - q.x) * (p.y + q.y) / 2;
    r.points.push_back(p);
  }
  return r;
}

/// (recall, precision) at every unique score as threshold, highest first.
inline std::vector<CurvePoint> pr_curve(std::span<const ScoredPrediction> preds) {
  detail::check_predictions(preds, "pr_curve");
  const auto steps = detail::sweep(preds);
  const double pos = static_cast<double>(steps.back().tp);
  if (pos == 0) throw SingleClassError("pr_curve: needs at least one positive label");
  std::vector<CurvePoint> pts;
  for (const auto& s : steps) {
    pts.push_back({static_cast<double>(s.tp) / pos, static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp),
                   s.threshold});
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Report

struct MetricsReport {
  double threshold = kDefaultThreshold;
  ConfusionMatrix confusion;
  BasicMetrics basic;
  double mcc = 0, kappa = 0;
  std::optional<double> brier;    // needs scores
  std::optional<double> roc_auc;  // needs scores of both classes
  std::vector<CurvePoint> roc_points, pr_points;
};

/// Threshold metrics only, from confusion counts alone.
inline MetricsReport report_from_confusion(const ConfusionMatrix& cm, double threshold = kDefaultThreshold) {
  MetricsReport r;
  r.threshold = threshold;
  r.confusion = cm;
  r.basic = basic_metrics(cm);
  r.mcc = mcc(cm);
  r.kappa = cohens_kappa(cm);
  return r;
}

/// Full report; curves and AUC are omitted (null) when a class is absent.
inline MetricsReport evaluate_predictions(std::span<const ScoredPrediction> preds,
                                          double threshold = kDefaultThreshold) {
  auto r = report_from_confusion(confusion(preds, threshold), threshold);
  r.brier = brier(preds);
  const auto cm = r.confusion;
  if (cm.positives() > 0 && cm.negatives() > 0) {
    auto roc = roc_curve_auc(preds);
    r.roc_auc = roc.auc;
    r.roc_points = std::move(roc.points);
  }
  if (cm.positives() > 0) r.pr_points = pr_curve(preds);
  return r;
}

inline std::string format4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Full-precision numbers plus a "display" block rounded to 4 decimals.
inline nlohmann::json to_json(const MetricsReport& r) {
  using nlohmann::json;
  json j;
  j["threshold"] = r.threshold;
  j["n"] = r.confusion.total();
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}};
  j["accuracy"] = r.basic.accuracy;
  j["precision"] = r.basic.precision;
  j["recall"] = r.basic.recall;
  j["f1"] = r.basic.f1;
  j["mcc"] = r.mcc;
  j["kappa"] = r.kappa;
  j["brier"] = r.brier ? json(*r.brier) : json(nullptr);
  j["roc_auc"] = r.roc_auc ? json(*r.roc_auc) : json(nullptr);
  j["flags"] = {{"precision_undefined", r.basic.precision_undefined},
                {"recall_undefined", r.basic.recall_undefined},
                {"f1_undefined", r.basic.f1_undefined},
                {"roc_undefined", !r.roc_auc.has_value()}};
  json display{{"accuracy", format4(r.basic.accuracy)}, {"precision", format4(r.basic.precision)},
               {"recall", format4(r.basic.recall)},     {"f1", format4(r.basic.f1)},
               {"mcc", format4(r.mcc)},                 {"kappa", format4(r.kappa)}};
  display["brier"] = r.brier ? json(format4(*r.brier)) : json(nullptr);
  display["roc_auc"] = r.roc_auc ? json(format4(*r.roc_auc)) : json(nullptr);
  j["display"] = display;
  j["roc_points"] = json::array();
  for (const auto& p : r.roc_points) j["roc_points"].push_back({p.x, p.y});
  j["pr_points"] = json::array();
  for (const auto& p : r.pr_points) j["pr_points"].push_back({p.x, p.y});
  return j;
}

inline nlohmann::json confusion_json(const ConfusionMatrix& cm, double threshold) {
  return {{"threshold", threshold},
          {"tp", cm.tp},
          {"fp", cm.fp},
          {"fn", cm.fn},
          {"tn", cm.tn},
          {"matrix", {{"rows", {"actual_pneumonia", "actual_normal"}},
                      {"cols", {"predicted_pneumonia", "predicted_normal"}},
                      {"values", {{cm.tp, cm.fn}, {cm.fp, cm.tn}}}}}};
}

/// Two-column CSV with a header row; values at round-trip precision.
inline std::string curve_csv(const std::vector<CurvePoint>& pts, const std::string& x_name, const std::string& y_name) {
  std::string out = x_name + "," + y_name + "\n";
  char buf[64];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.x, p.y);
    out += buf;
  }
  return out;
}

}  // namespace pneumolens
