#include "effecg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace effecg {

using nlohmann::json;

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= k_ || predicted >= k_) {
    throw std::out_of_range("label " + std::to_string(std::max(truth, predicted)) +
                            " outside [0, " + std::to_string(k_) + ")");
  }
  ++counts_[truth * k_ + predicted];
}

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

std::size_t ConfusionMatrix::column_sum(std::size_t predicted) const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) s += at(i, predicted);
  return s;
}

std::vector<std::vector<std::size_t>> ConfusionMatrix::rows() const {
  std::vector<std::vector<std::size_t>> out(k_);
  for (std::size_t i = 0; i < k_; ++i) out[i].assign(counts_.begin() + i * k_, counts_.begin() + (i + 1) * k_);
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t k) {
  if (truth.size() != predicted.size()) {
    throw std::invalid_argument("confusion_matrix: " + std::to_string(truth.size()) + " labels vs " +
                                std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

namespace {

double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

ClassScores scores_from(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassScores s;
  s.tp = tp;
  s.fp = fp;
  s.fn = fn;
  s.support = tp + fn;
  s.precision = ratio(tp, tp + fp);
  s.recall = ratio(tp, tp + fn);
  s.f1 = f1_from_counts(tp, fp, fn);
  return s;
}

F1Report finish(std::vector<ClassScores> per_class) {
  F1Report r;
  std::size_t tp = 0, fp = 0, fn = 0;
  double macro = 0.0;
  for (const auto& s : per_class) {
    tp += s.tp;
    fp += s.fp;
    fn += s.fn;
    macro += s.f1;
  }
  r.micro_f1 = f1_from_counts(tp, fp, fn);
  r.macro_f1 = per_class.empty() ? 0.0 : macro / static_cast<double>(per_class.size());
  r.per_class = std::move(per_class);
  return r;
}

}  // namespace

double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  // 2PR / (P + R) simplifies to 2tp / (2tp + fp + fn); 0/0 -> 0
  return ratio(2 * tp, 2 * tp + fp + fn);
}

F1Report f1_scores(const ConfusionMatrix& cm) {
  std::vector<ClassScores> per;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::size_t tp = cm.at(c, c);
    per.push_back(scores_from(tp, cm.column_sum(c) - tp, cm.row_sum(c) - tp));
  }
  return finish(std::move(per));
}

std::vector<ConfusionMatrix> one_vs_rest(const std::vector<std::vector<std::size_t>>& truth,
                                         const std::vector<std::vector<std::size_t>>& predicted,
                                         std::size_t k) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("one_vs_rest: length mismatch");
  std::vector<ConfusionMatrix> out(k, ConfusionMatrix(2));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    std::vector<bool> t(k, false), p(k, false);
    for (auto c : truth[i]) {
      if (c >= k) throw std::out_of_range("label " + std::to_string(c) + " outside [0, " + std::to_string(k) + ")");
      t[c] = true;
    }
    for (auto c : predicted[i]) {
      if (c >= k) throw std::out_of_range("label " + std::to_string(c) + " outside [0, " + std::to_string(k) + ")");
      p[c] = true;
    }
    for (std::size_t c = 0; c < k; ++c) out[c].add(t[c] ? 1 : 0, p[c] ? 1 : 0);
  }
  return out;
}

F1Report f1_scores(const std::vector<ConfusionMatrix>& per_class) {
  std::vector<ClassScores> per;
  for (const auto& m : per_class) {
    if (m.classes() != 2) throw std::invalid_argument("one-vs-rest matrices must be 2 x 2");
    per.push_back(scores_from(m.at(1, 1), m.at(0, 1), m.at(1, 0)));
  }
  return finish(std::move(per));
}

double cinc_score(std::span<const double> per_class_f1, std::span<const std::size_t> classes) {
  if (classes.empty()) throw std::invalid_argument("cinc_score: empty class set");
  double s = 0.0;
  for (auto c : classes) {
    if (c >= per_class_f1.size()) throw std::out_of_range("cinc_score: class " + std::to_string(c));
    s += per_class_f1[c];
  }
  return s / static_cast<double>(classes.size());
}

// ---- ROC ----

namespace {

void check_binary(std::span<const double> scores, std::span<const std::uint8_t> labels,
                  std::size_t& pos, std::size_t& neg) {
  if (scores.size() != labels.size()) throw std::invalid_argument("ROC: scores and labels differ in length");
  pos = neg = 0;
  for (auto l : labels) (l ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw std::invalid_argument("ROC needs both positive and negative labels");
}

}  // namespace

double rank_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  check_binary(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // midranks (1-based) summed over positives
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) rank_sum += mid;
    }
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos, neg;
  check_binary(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  RocCurve c;
  c.fpr.push_back(0.0);
  c.tpr.push_back(0.0);
  c.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(neg));
    c.tpr.push_back(static_cast<double>(tp) / static_cast<double>(pos));
    c.thresholds.push_back(s);
  }
  return c;
}

double trapezoid_auc(const RocCurve& curve) {
  double a = 0.0;
  for (std::size_t i = 1; i < curve.fpr.size(); ++i) {
    a += (curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2.0;
  }
  return a;
}

// ---- report ----

EvalReport evaluate_scores(std::span<const double> scores,
                           const std::vector<std::vector<std::size_t>>& labels,
                           std::size_t class_count, bool multi_label,
                           std::span<const double> thresholds,
                           std::span<const std::size_t> cinc_classes) {
  const std::size_t n = labels.size(), k = class_count;
  if (scores.size() != n * k) {
    throw std::invalid_argument("evaluate: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(n) + " samples x " + std::to_string(k) + " classes");
  }
  EvalReport r;
  r.samples = n;
  r.class_count = k;
  r.multi_label = multi_label;
  r.thresholds.assign(thresholds.begin(), thresholds.end());

  std::size_t exact = 0;
  if (multi_label) {
    if (thresholds.size() != k) {
      throw std::invalid_argument("evaluate: need " + std::to_string(k) + " thresholds, got " +
                                  std::to_string(thresholds.size()));
    }
    std::vector<std::vector<std::size_t>> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        if (scores[i * k + c] >= thresholds[c]) pred[i].push_back(c);
      }
      auto t = labels[i];
      std::sort(t.begin(), t.end());
      if (t == pred[i]) ++exact;
    }
    r.one_vs_rest = one_vs_rest(labels, pred, k);
    r.f1 = f1_scores(r.one_vs_rest);
  } else {
    std::vector<std::size_t> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i].size() != 1) {
        throw std::invalid_argument("single-label evaluation got " + std::to_string(labels[i].size()) +
                                    " labels for sample " + std::to_string(i));
      }
      truth[i] = labels[i][0];
      const double* row = scores.data() + i * k;
      pred[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      if (pred[i] == truth[i]) ++exact;
    }
    r.confusion = confusion_matrix(truth, pred, k);
    r.f1 = f1_scores(*r.confusion);
  }
  r.accuracy = n ? static_cast<double>(exact) / static_cast<double>(n) : 0.0;

  if (cinc_classes.empty()) {
    r.cinc_classes.resize(k);
    std::iota(r.cinc_classes.begin(), r.cinc_classes.end(), 0);
  } else {
    r.cinc_classes.assign(cinc_classes.begin(), cinc_classes.end());
  }
  std::vector<double> f1s;
  for (const auto& s : r.f1.per_class) f1s.push_back(s.f1);
  r.cinc = cinc_score(f1s, r.cinc_classes);

  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n, 0);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * k + c];
      for (auto l : labels[i]) {
        if (l == c) y[i] = 1;
      }
      pos += y[i];
    }
    ClassAuc a;
    a.label = c;
    if (pos > 0 && pos < n) {
      a.curve = roc_curve(s, y);
      a.auc = rank_auc(s, y);
    }
    r.auc.push_back(std::move(a));
  }
  return r;
}

json to_json(const EvalReport& r) {
  json per = json::array();
  for (std::size_t c = 0; c < r.f1.per_class.size(); ++c) {
    const auto& s = r.f1.per_class[c];
    json row = {{"class", c},         {"precision", s.precision}, {"recall", s.recall},
                {"f1", s.f1},         {"support", s.support},     {"tp", s.tp},
                {"fp", s.fp},         {"fn", s.fn}};
    row["auc"] = r.auc.size() > c && r.auc[c].auc ? json(*r.auc[c].auc) : json(nullptr);
    per.push_back(row);
  }
  json j = {{"samples", r.samples},
            {"class_count", r.class_count},
            {"label_mode", r.multi_label ? "multi" : "single"},
            {"parameter_count", r.parameter_count},
            {"loss", r.loss},
            {"accuracy", r.accuracy},
            {"micro_f1", r.f1.micro_f1},
            {"macro_f1", r.f1.macro_f1},
            {"cinc_score", r.cinc},
            {"cinc_classes", r.cinc_classes},
            {"thresholds", r.thresholds},
            {"per_class", per}};
  if (r.confusion) j["confusion_matrix"] = r.confusion->rows();
  if (!r.one_vs_rest.empty()) {
    json m = json::array();
    for (const auto& cm : r.one_vs_rest) m.push_back(cm.rows());
    j["one_vs_rest"] = m;
  }
  return j;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string svg_open(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle") {
  return "<text x=\"" + px(x) + "\" y=\"" + px(y) + "\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
}

}  // namespace

std::string roc_csv(const EvalReport& r) {
  std::string out = "class,threshold,fpr,tpr\n";
  for (const auto& a : r.auc) {
    for (std::size_t i = 0; i < a.curve.fpr.size(); ++i) {
      const double t = a.curve.thresholds[i];
      out += std::to_string(a.label) + "," + (std::isinf(t) ? std::string("inf") : num(t)) + "," +
             num(a.curve.fpr[i]) + "," + num(a.curve.tpr[i]) + "\n";
    }
  }
  return out;
}

std::string roc_svg(const EvalReport& r) {
  const double left = 50, top = 30, size = 300;
  std::string s = svg_open(520, 380);
  s += text(left + size / 2, 18, "ROC");
  s += "<rect x=\"" + px(left) + "\" y=\"" + px(top) + "\" width=\"" + px(size) + "\" height=\"" +
       px(size) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + px(left) + "\" y1=\"" + px(top + size) + "\" x2=\"" + px(left + size) +
       "\" y2=\"" + px(top) + "\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>\n";
  s += text(left + size / 2, top + size + 30, "false positive rate");
  s += text(15, top + size / 2, "TPR");
  std::size_t legend = 0;
  for (const auto& a : r.auc) {
    if (!a.auc) continue;
    const char* color = kPalette[a.label % 10];
    std::string pts;
    for (std::size_t i = 0; i < a.curve.fpr.size(); ++i) {
      pts += px(left + a.curve.fpr[i] * size) + "," + px(top + size - a.curve.tpr[i] * size) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" points=\"" + pts + "\"/>\n";
    char label[64];
    std::snprintf(label, sizeof label, "class %zu (AUC %.3f)", a.label, *a.auc);
    s += "<text x=\"" + px(left + size + 15) + "\" y=\"" + px(top + 15 + 16.0 * legend) +
         "\" fill=\"" + color + "\">" + label + "</text>\n";
    ++legend;
  }
  return s + "</svg>\n";
}

std::string confusion_svg(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  const double cell = k > 12 ? 24 : 48, left = 60, top = 40;
  const int w = static_cast<int>(left + cell * static_cast<double>(k) + 20);
  const int h = static_cast<int>(top + cell * static_cast<double>(k) + 40);
  std::string s = svg_open(w, h);
  s += text(left + cell * static_cast<double>(k) / 2, 20, "confusion matrix (rows: true, columns: predicted)");
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t row = cm.row_sum(i);
    for (std::size_t j = 0; j < k; ++j) {
      const double frac = row ? static_cast<double>(cm.at(i, j)) / static_cast<double>(row) : 0.0;
      const int shade = static_cast<int>(255 - 200 * frac);
      char fill[32];
      std::snprintf(fill, sizeof fill, "rgb(%d,%d,255)", shade, shade);
      const double x = left + cell * static_cast<double>(j), y = top + cell * static_cast<double>(i);
      s += "<rect x=\"" + px(x) + "\" y=\"" + px(y) + "\" width=\"" + px(cell) + "\" height=\"" +
           px(cell) + "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      s += text(x + cell / 2, y + cell / 2 + 4, std::to_string(cm.at(i, j)));
    }
    s += text(left - 8, top + cell * (static_cast<double>(i) + 0.5) + 4, std::to_string(i), "end");
    s += text(left + cell * (static_cast<double>(i) + 0.5), top + cell * static_cast<double>(k) + 16,
              std::to_string(i));
  }
  return s + "</svg>\n";
}

std::string line_chart_svg(const std::string& title, const std::vector<double>& x,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const double left = 60, top = 30, width = 420, height = 240;
  std::string s = svg_open(600, 320);
  s += text(left + width / 2, 18, title);
  s += "<rect x=\"" + px(left) + "\" y=\"" + px(top) + "\" width=\"" + px(width) + "\" height=\"" +
       px(height) + "\" fill=\"none\" stroke=\"black\"/>\n";
  if (x.empty()) return s + "</svg>\n";
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [_, ys] : series) {
    for (double v : ys) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;
  const double x0 = x.front(), x1 = x.size() > 1 ? x.back() : x.front() + 1;
  auto sx = [&](double v) { return left + (v - x0) / (x1 - x0) * width; };
  auto sy = [&](double v) { return top + height - (v - lo) / (hi - lo) * height; };
  s += text(left - 6, top + 4, num(hi).substr(0, 8), "end");
  s += text(left - 6, top + height, num(lo).substr(0, 8), "end");
  s += text(left, top + height + 16, num(x0));
  s += text(left + width, top + height + 16, num(x1));
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& [name, ys] = series[k];
    std::string pts;
    for (std::size_t i = 0; i < x.size() && i < ys.size(); ++i) {
      if (std::isfinite(ys[i])) pts += px(sx(x[i])) + "," + px(sy(ys[i])) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[k % 10]) + "\" points=\"" + pts + "\"/>\n";
    s += "<text x=\"" + px(left + width + 10) + "\" y=\"" + px(top + 14 + 16.0 * static_cast<double>(k)) +
         "\" fill=\"" + kPalette[k % 10] + "\">" + name + "</text>\n";
  }
  return s + "</svg>\n";
}

}  // namespace effecg
