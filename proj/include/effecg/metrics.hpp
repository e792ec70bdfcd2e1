#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace effecg {

/// K x K counts, row = true class, column = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}

  std::size_t classes() const { return k_; }
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  void add(std::size_t truth, std::size_t predicted);
  std::size_t total() const;
  std::size_t row_sum(std::size_t truth) const;
  std::size_t column_sum(std::size_t predicted) const;
  std::vector<std::vector<std::size_t>> rows() const;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

/// Throws std::out_of_range for labels outside [0, k).
ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t k);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // true instances
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct F1Report {
  std::vector<ClassScores> per_class;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
};

/// Precision, recall and F1 from pooled counts; every 0/0 ratio is 0.
double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);
F1Report f1_scores(const ConfusionMatrix& cm);

/// One-vs-rest 2x2 matrices for multi-label data: [[tn, fp], [fn, tp]].
std::vector<ConfusionMatrix> one_vs_rest(const std::vector<std::vector<std::size_t>>& truth,
                                         const std::vector<std::vector<std::size_t>>& predicted,
                                         std::size_t k);
/// Per-class F1 from one-vs-rest matrices; micro pools tp/fp/fn over classes.
F1Report f1_scores(const std::vector<ConfusionMatrix>& per_class);

/// Mean per-class F1 over `classes` (all classes when the span is empty is
/// not assumed: an empty subset is rejected).
double cinc_score(std::span<const double> per_class_f1, std::span<const std::size_t> classes);

struct RocCurve {
  std::vector<double> fpr;
  std::vector<double> tpr;
  /// Threshold for each point (score >= threshold is positive); the first
  /// point uses +infinity.
  std::vector<double> thresholds;
};

/// Probability that a random positive outscores a random negative, ties 0.5.
double rank_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);
double trapezoid_auc(const RocCurve& curve);
/// Throws std::invalid_argument unless both classes are present.
RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct ClassAuc {
  std::size_t label = 0;
  std::optional<double> auc;  // absent when the class is missing or universal
  RocCurve curve;
};

/// Everything the eval command reports.
struct EvalReport {
  std::size_t samples = 0;
  std::size_t class_count = 0;
  bool multi_label = false;
  std::size_t parameter_count = 0;
  double loss = 0.0;
  std::vector<double> thresholds;
  F1Report f1;
  double cinc = 0.0;
  std::vector<std::size_t> cinc_classes;
  double accuracy = 0.0;  // exact-match ratio for multi-label
  std::optional<ConfusionMatrix> confusion;  // single-label
  std::vector<ConfusionMatrix> one_vs_rest;  // multi-label
  std::vector<ClassAuc> auc;
};

/// Scores are row-major [samples x classes]. Single-label: argmax
/// prediction and one-vs-rest AUC on the class score. Multi-label:
/// per-class threshold compare.
EvalReport evaluate_scores(std::span<const double> scores,
                           const std::vector<std::vector<std::size_t>>& labels,
                           std::size_t class_count, bool multi_label,
                           std::span<const double> thresholds,
                           std::span<const std::size_t> cinc_classes = {});

nlohmann::json to_json(const EvalReport& report);
/// `class,threshold,fpr,tpr` rows.
std::string roc_csv(const EvalReport& report);

/// Standalone SVG renderings.
std::string roc_svg(const EvalReport& report);
std::string confusion_svg(const ConfusionMatrix& cm);
/// Line chart of several named series over a shared x axis.
std::string line_chart_svg(const std::string& title, const std::vector<double>& x,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace effecg
