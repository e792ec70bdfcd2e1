#include <cmath>
#include <random>

#include "doctest.h"
#include "effecg/metrics.hpp"

using namespace effecg;

namespace {

// Pairwise count over every positive/negative pair.
double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double hits = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      if (s[i] > s[j]) hits += 1.0;
      if (s[i] == s[j]) hits += 0.5;
    }
  }
  return hits / pairs;
}

struct Instance {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_dist(2, 60), grid(0, 9);
  std::bernoulli_distribution coin(0.5), coarse(0.3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance in;
  const int n = n_dist(rng);
  // coarse scores give plenty of ties
  const bool tied = coarse(rng);
  for (int i = 0; i < n; ++i) {
    in.scores.push_back(tied ? grid(rng) / 10.0 : u(rng));
    in.labels.push_back(coin(rng) ? 1 : 0);
  }
  in.labels[0] = 1;
  in.labels[1] = 0;
  return in;
}

}  // namespace

TEST_CASE("confusion matrix") {
  const std::vector<std::size_t> y{0, 1, 1}, yhat{0, 1, 0};
  const auto cm = confusion_matrix(y, yhat, 2);
  CHECK(cm.rows() == std::vector<std::vector<std::size_t>>{{1, 0}, {1, 1}});
  CHECK(cm.total() == 3);

  const auto perfect = confusion_matrix(y, y, 2);
  CHECK(perfect.at(0, 1) == 0);
  CHECK(perfect.at(1, 0) == 0);

  const auto empty = confusion_matrix({}, {}, 3);
  CHECK(empty.total() == 0);
  CHECK(empty.classes() == 3);

  const std::vector<std::size_t> bad{0, 2};
  CHECK_THROWS_AS(confusion_matrix(bad, bad, 2), std::out_of_range);
  CHECK_THROWS_AS(confusion_matrix(y, bad, 2), std::invalid_argument);
}

TEST_CASE("F1 fixtures") {
  // precision 1, recall 0.5
  CHECK(f1_from_counts(1, 0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(f1_from_counts(0, 0, 0) == 0.0);

  const std::vector<std::size_t> y{0, 1, 2, 2};
  const auto diag = f1_scores(confusion_matrix(y, y, 3));
  for (const auto& s : diag.per_class) CHECK(s.f1 == 1.0);
  CHECK(diag.micro_f1 == 1.0);
  CHECK(diag.macro_f1 == 1.0);

  // class 2 never appears and is never predicted
  const std::vector<std::size_t> t{0, 1, 1}, p{0, 1, 0};
  const auto r = f1_scores(confusion_matrix(t, p, 3));
  CHECK(r.per_class[2].f1 == 0.0);
  CHECK(r.per_class[1].precision == 1.0);
  CHECK(r.per_class[1].recall == 0.5);
  CHECK(r.per_class[1].f1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class[0].f1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.macro_f1 == doctest::Approx((4.0 / 3.0) / 3.0));
  CHECK(r.micro_f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("CinC score") {
  const std::vector<double> ones{1, 1, 1, 1}, two{0.8, 0.6};
  const std::vector<std::size_t> all4{0, 1, 2, 3}, both{0, 1}, only{1};
  CHECK(cinc_score(ones, all4) == 1.0);
  CHECK(cinc_score(two, both) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(cinc_score(two, only) == 0.6);
  CHECK_THROWS_AS(cinc_score(two, {}), std::invalid_argument);
  const std::vector<std::size_t> outside{5};
  CHECK_THROWS_AS(cinc_score(two, outside), std::out_of_range);
}

TEST_CASE("micro F1 equals accuracy on single-label data") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng() % 5, n = 1 + rng() % 80;
    std::vector<std::size_t> t(n), p(n);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng() % k;
      p[i] = rng() % k;
      correct += t[i] == p[i];
    }
    const auto r = f1_scores(confusion_matrix(t, p, k));
    CHECK(r.micro_f1 == doctest::Approx(static_cast<double>(correct) / n).epsilon(1e-12));
  }
}

TEST_CASE("one-vs-rest matrices") {
  const std::vector<std::vector<std::size_t>> truth{{0, 2}, {1}, {}}, pred{{0}, {1, 2}, {2}};
  const auto m = one_vs_rest(truth, pred, 3);
  REQUIRE(m.size() == 3);
  // class 2: true in sample 0 only, predicted in samples 1 and 2
  CHECK(m[2].rows() == std::vector<std::vector<std::size_t>>{{0, 2}, {1, 0}});
  CHECK(m[0].rows() == std::vector<std::vector<std::size_t>>{{2, 0}, {0, 1}});
  const auto r = f1_scores(m);
  CHECK(r.per_class[0].f1 == 1.0);
  CHECK(r.per_class[2].f1 == 0.0);
  // pooled tp 2, fp 2, fn 1
  CHECK(r.micro_f1 == doctest::Approx(4.0 / 7.0));
}

TEST_CASE("AUC fixtures") {
  auto auc = [](std::vector<double> pos, std::vector<double> neg) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (double v : pos) s.push_back(v), y.push_back(1);
    for (double v : neg) s.push_back(v), y.push_back(0);
    const double r = rank_auc(s, y);
    CHECK(trapezoid_auc(roc_curve(s, y)) == doctest::Approx(r).epsilon(1e-12));
    return r;
  };
  CHECK(auc({0.9, 0.8}, {0.1, 0.7}) == 1.0);
  CHECK(auc({0.4}, {0.6}) == 0.0);
  CHECK(auc({0.5}, {0.5}) == 0.5);

  const std::vector<double> s{0.1, 0.2};
  const std::vector<std::uint8_t> same{1, 1};
  CHECK_THROWS_AS(rank_auc(s, same), std::invalid_argument);
  CHECK_THROWS_AS(roc_curve(s, same), std::invalid_argument);
}

TEST_CASE("ROC curve shape") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto in = random_instance(rng);
    const auto c = roc_curve(in.scores, in.labels);
    CHECK(c.fpr.front() == 0.0);
    CHECK(c.tpr.front() == 0.0);
    CHECK(c.fpr.back() == 1.0);
    CHECK(c.tpr.back() == 1.0);
    CHECK(std::isinf(c.thresholds.front()));
    for (std::size_t i = 1; i < c.fpr.size(); ++i) {
      CHECK(c.fpr[i] >= c.fpr[i - 1]);
      CHECK(c.tpr[i] >= c.tpr[i - 1]);
      CHECK(c.thresholds[i] < c.thresholds[i - 1]);
    }
  }
}

TEST_CASE("trapezoid AUC matches the pairwise statistic") {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 150; ++trial) {
    const auto in = random_instance(rng);
    const double oracle = pairwise_auc(in.scores, in.labels);
    worst = std::max(worst, std::abs(trapezoid_auc(roc_curve(in.scores, in.labels)) - oracle));
    worst = std::max(worst, std::abs(rank_auc(in.scores, in.labels) - oracle));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("strictly increasing transforms leave ROC unchanged") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const auto in = random_instance(rng);
    std::vector<double> t;
    for (double v : in.scores) t.push_back(std::exp(3.0 * v) - 7.0);
    const auto a = roc_curve(in.scores, in.labels), b = roc_curve(t, in.labels);
    CHECK(a.fpr == b.fpr);
    CHECK(a.tpr == b.tpr);
    CHECK(rank_auc(in.scores, in.labels) == rank_auc(t, in.labels));
  }
}

TEST_CASE("evaluate_scores single-label") {
  const std::vector<double> scores{0.9, 0.1, 0.3, 0.7, 0.6, 0.4};
  const std::vector<std::vector<std::size_t>> labels{{0}, {1}, {1}};
  const auto r = evaluate_scores(scores, labels, 2, false, {});
  REQUIRE(r.confusion);
  CHECK(r.confusion->rows() == std::vector<std::vector<std::size_t>>{{1, 0}, {1, 1}});
  CHECK(r.accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(r.cinc_classes == std::vector<std::size_t>{0, 1});
  REQUIRE(r.auc[1].auc);
  CHECK(*r.auc[1].auc == 1.0);

  const auto j = to_json(r);
  CHECK(j["confusion_matrix"][1][0] == 1);
  CHECK(j["per_class"].size() == 2);
  const auto csv = roc_csv(r);
  CHECK(csv.rfind("class,threshold,fpr,tpr\n", 0) == 0);
  CHECK(csv.find("0,inf,0,0\n") != std::string::npos);
  CHECK(roc_svg(r).find("<polyline") != std::string::npos);
  CHECK(confusion_svg(*r.confusion).find("</svg>") != std::string::npos);

  const std::vector<std::vector<std::size_t>> two{{0, 1}, {1}, {1}};
  CHECK_THROWS_AS(evaluate_scores(scores, two, 2, false, {}), std::invalid_argument);
}

TEST_CASE("evaluate_scores multi-label") {
  const std::vector<double> scores{0.9, 0.8, 0.2, 0.6, 0.1, 0.1};
  const std::vector<std::vector<std::size_t>> labels{{0, 1}, {1}, {}};
  const std::vector<double> thr{0.5, 0.5};
  const auto r = evaluate_scores(scores, labels, 2, true, thr);
  CHECK_FALSE(r.confusion);
  CHECK(r.one_vs_rest.size() == 2);
  CHECK(r.f1.micro_f1 == 1.0);
  CHECK(r.accuracy == 1.0);
  // class 0 has a single positive
  REQUIRE(r.auc[0].auc);
  CHECK(*r.auc[0].auc == 1.0);
  const std::vector<double> short_thr{0.5};
  CHECK_THROWS_AS(evaluate_scores(scores, labels, 2, true, short_thr), std::invalid_argument);
}
