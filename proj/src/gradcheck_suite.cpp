#include "effecg/gradcheck_suite.hpp"

#include <algorithm>
#include <cstdio>

#include "effecg/blocks.hpp"
#include "effecg/ops.hpp"
#include "effecg/train.hpp"

namespace effecg {

namespace {

Tensor random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// sum(w * y) with fixed random w, so each output coordinate weighs in differently
Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

GradCheckResult check_probe(Rng& rng, std::vector<Tensor> leaves, const std::function<Tensor()>& out) {
  const Tensor w = random(rng, out().shape());
  return grad_check([&] { return probe(out(), w); }, std::move(leaves));
}

std::vector<Tensor> with(std::vector<Tensor> a, std::initializer_list<Tensor> b) {
  a.insert(a.end(), b);
  return a;
}

Tensor multi_hot(Rng& rng, std::size_t n, std::size_t k) {
  Tensor y({n, k}, 0.0);
  auto v = y.mutable_values();
  for (auto& x : v) x = static_cast<double>(rng.below(2));
  return y;
}

Tensor one_hot(Rng& rng, std::size_t n, std::size_t k) {
  Tensor y({n, k}, 0.0);
  auto v = y.mutable_values();
  for (std::size_t i = 0; i < n; ++i) v[i * k + rng.below(k)] = 1.0;
  return y;
}

FiducialFeature random_feature(Rng& rng, std::size_t steps, std::size_t length) {
  FiducialFeature f;
  const std::size_t valid = rng.below(steps + 1);
  for (std::size_t i = 0; i < steps; ++i) {
    const bool on = i < valid;
    f.values.push_back(on ? static_cast<std::int64_t>(rng.below(length)) : -1);
    f.mask.push_back(on ? 1 : 0);
  }
  return f;
}

}  // namespace

bool GradCheckReport::pass() const {
  return std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.pass; });
}

std::size_t GradCheckReport::trials() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.trials;
  return n;
}

std::vector<GradCheckCase> gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  auto block = [&](std::string name, std::function<GradCheckResult(Rng&)> f) {
    cases.push_back({std::move(name), 1e-5, std::move(f)});
  };
  auto loss = [&](std::string name, std::function<GradCheckResult(Rng&)> f) {
    cases.push_back({std::move(name), 1e-6, std::move(f)});
  };

  block("conv1d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), c = pick(rng, 1, 3), n = pick(rng, 4, 9);
    const std::size_t stride = pick(rng, 1, 2);
    const Padding pad = rng.below(2) ? Padding::same : Padding::valid;
    Tensor x = random(rng, {b, c, n}), k = random(rng, {pick(rng, 1, 3), c, pick(rng, 1, 3)});
    return check_probe(rng, {x, k}, [=] { return conv1d(x, k, stride, pad); });
  });
  block("depthwise_conv1d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), c = pick(rng, 1, 3), n = pick(rng, 4, 9);
    const std::size_t stride = pick(rng, 1, 2);
    Tensor x = random(rng, {b, c, n}), k = random(rng, {c, pick(rng, 1, 4)});
    return check_probe(rng, {x, k}, [=] { return depthwise_conv1d(x, k, stride, Padding::same); });
  });
  block("batch_norm_train", [](Rng& rng) {
    const std::size_t b = pick(rng, 2, 4), c = pick(rng, 1, 3), n = pick(rng, 1, 5);
    Tensor x = random(rng, {b, c, n}), g = random(rng, {c}, 0.5, 1.5), beta = random(rng, {c});
    return check_probe(rng, {x, g, beta}, [=] { return batch_norm_train(x, g, beta, 1e-5, nullptr, nullptr); });
  });
  block("batch_norm_eval", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), c = pick(rng, 1, 3), n = pick(rng, 1, 5);
    Tensor x = random(rng, {b, c, n}), g = random(rng, {c}, 0.5, 1.5), beta = random(rng, {c});
    std::vector<double> mean(c), var(c);
    for (std::size_t i = 0; i < c; ++i) {
      mean[i] = rng.uniform(-0.5, 0.5);
      var[i] = rng.uniform(0.5, 2.0);
    }
    return check_probe(rng, {x, g, beta}, [=] { return batch_norm_eval(x, g, beta, mean, var, 1e-5); });
  });
  block("dense", [](Rng& rng) {
    ParameterSet ps(rng.next());
    Dense d(ps, "fc", pick(rng, 1, 4), pick(rng, 1, 4));
    Tensor x = random(rng, {pick(rng, 1, 3), d.in_features()});
    return check_probe(rng, with(ps.trainable(), {x}), [&] { return d.forward(x); });
  });
  block("activations", [](Rng& rng) {
    Tensor x = random(rng, {pick(rng, 1, 3), pick(rng, 2, 5)}, -3.0, 3.0);
    return check_probe(rng, {x}, [=] { return add(add(swish(x), sigmoid(x)), tanh(x)); });
  });
  block("softmax", [](Rng& rng) {
    Tensor x = random(rng, {pick(rng, 1, 3), pick(rng, 2, 5)}, -3.0, 3.0);
    const std::size_t axis = rng.below(2);
    return check_probe(rng, {x}, [=] { return softmax(x, axis); });
  });
  block("global_avg_pool", [](Rng& rng) {
    Tensor x = random(rng, {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 6)});
    return check_probe(rng, {x}, [=] { return global_avg_pool(x); });
  });
  block("squeeze_excitation", [](Rng& rng) {
    ParameterSet ps(rng.next());
    const std::size_t c = pick(rng, 2, 4);
    SeBlock se(ps, "se", c, pick(rng, 1, 2));
    Tensor x = random(rng, {pick(rng, 1, 3), c, pick(rng, 2, 5)});
    return check_probe(rng, with(ps.trainable(), {x}), [&] { return se.forward(x); });
  });
  block("mbconv", [](Rng& rng) {
    ParameterSet ps(rng.next());
    MbConvConfig cfg;
    cfg.in_channels = pick(rng, 1, 3);
    cfg.out_channels = rng.below(2) ? cfg.in_channels : pick(rng, 1, 3);
    cfg.expansion = rng.below(2) ? 1 : 2;
    cfg.kernel = rng.below(2) ? 3 : 5;
    cfg.stride = pick(rng, 1, 2);
    cfg.se_ratio = 0.5;
    MbConvBlock blk(ps, "mb", cfg);
    Tensor x = random(rng, {2, cfg.in_channels, pick(rng, 4, 7)});
    return check_probe(rng, with(ps.trainable(), {x}), [&] { return blk.forward(x, Mode::train); });
  });
  block("dsconv", [](Rng& rng) {
    ParameterSet ps(rng.next());
    const std::size_t in = pick(rng, 1, 3);
    DsConvBlock blk(ps, "ds", in, pick(rng, 1, 3), 3, pick(rng, 1, 2));
    Tensor x = random(rng, {2, in, pick(rng, 4, 7)});
    return check_probe(rng, with(ps.trainable(), {x}), [&] { return blk.forward(x, Mode::train); });
  });
  block("lstm_cell", [](Rng& rng) {
    ParameterSet ps(rng.next());
    const std::size_t b = pick(rng, 1, 3), in = pick(rng, 1, 3), h = pick(rng, 1, 3);
    LstmCell cell(ps, "lstm", in, h);
    Tensor x0 = random(rng, {b, in}), x1 = random(rng, {b, in});
    Tensor h0 = random(rng, {b, h}), c0 = random(rng, {b, h});
    return check_probe(rng, with(ps.trainable(), {x0, x1, h0, c0}), [&] {
      auto [h1, c1] = cell.step(x0, h0, c0);
      auto [h2, c2] = cell.step(x1, h1, c1);
      return concat({h2, c2}, 1);
    });
  });
  block("lstm_autoencoder", [](Rng& rng) {
    ParameterSet ps(rng.next());
    const std::size_t hidden = pick(rng, 1, 3), steps = pick(rng, 1, 4), b = pick(rng, 1, 3);
    LstmAutoencoder ae(ps, "ae", hidden, true);
    FiducialBatch batch;
    batch.signal_length = 300;
    for (std::size_t i = 0; i < b; ++i) batch.features.push_back(random_feature(rng, steps, 300));
    const Tensor w = random(rng, {b, hidden});
    return grad_check(
        [&] {
          Tensor z = ae.encode(batch);
          return add(probe(z, w), ae.reconstruction_loss(batch, z));
        },
        ps.trainable());
  });
  block("embedding", [](Rng& rng) {
    ParameterSet ps(rng.next());
    const std::size_t vocab = pick(rng, 2, 6);
    EmbeddingLayer emb(ps, "emb", vocab, pick(rng, 1, 4));
    std::vector<std::size_t> rows(pick(rng, 1, 4));
    for (auto& r : rows) r = rng.below(vocab);
    return check_probe(rng, ps.trainable(), [&] { return emb.lookup(rows); });
  });
  block("cross_attention", [](Rng& rng) {
    ParameterSet ps(rng.next());
    CrossAttentionConfig cfg;
    cfg.tokens = pick(rng, 1, 3);
    cfg.feature_width = cfg.tokens * pick(rng, 1, 2);
    cfg.embed_dim = pick(rng, 1, 3);
    cfg.width = pick(rng, 1, 3);
    const auto mode = rng.below(3);
    cfg.use_age = mode != 1;
    cfg.use_gender = mode != 2;
    cfg.scaled = rng.below(2) == 1;
    CrossAttentionFusion ca(ps, "ca", cfg);
    const std::size_t b = pick(rng, 1, 3);
    Tensor ecg = random(rng, {b, cfg.feature_width});
    Tensor age = random(rng, {b, cfg.embed_dim}), gender = random(rng, {b, cfg.embed_dim});
    std::optional<Tensor> a, g;
    if (cfg.use_age) a = age;
    if (cfg.use_gender) g = gender;
    return check_probe(rng, with(ps.trainable(), {ecg, age, gender}), [&] { return ca.forward(ecg, a, g); });
  });

  loss("mse_l2_loss", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), k = pick(rng, 1, 3), in = pick(rng, 1, 3);
    Tensor x = random(rng, {n, in}), w = random(rng, {in, k});
    const Tensor y = one_hot(rng, n, k);
    const double lambda = rng.uniform(0.0, 1.0);
    return grad_check([&] { return mse_l2_loss(y, softmax(matmul(x, w), 1), {w}, lambda, n); }, {x, w});
  });
  loss("bce_loss", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), k = pick(rng, 1, 3), in = pick(rng, 1, 3);
    Tensor x = random(rng, {n, in}), w = random(rng, {in, k});
    const Tensor y = multi_hot(rng, n, k);
    return grad_check([&] { return bce_loss(y, sigmoid(matmul(x, w))); }, {x, w});
  });
  loss("cce_loss", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 4), in = pick(rng, 1, 3);
    Tensor x = random(rng, {n, in}), w = random(rng, {in, k});
    const Tensor y = one_hot(rng, n, k);
    return grad_check([&] { return cce_loss(y, softmax(matmul(x, w), 1)); }, {x, w});
  });
  loss("l2_penalty", [](Rng& rng) {
    Tensor a = random(rng, {pick(rng, 1, 3), pick(rng, 1, 3)}), b = random(rng, {pick(rng, 1, 3)});
    const double lambda = rng.uniform(0.0, 2.0);
    const std::size_t m = pick(rng, 1, 8);
    return grad_check([&] { return l2_penalty({a, b}, lambda, m); }, {a, b});
  });
  return cases;
}

GradCheckCase broken_adjoint_case() {
  return {"broken_square", 1e-5, [](Rng& rng) {
            Tensor x = random(rng, {pick(rng, 2, 4)}, 0.5, 1.5);
            auto f = [&] {
              const auto xv = x.values();
              std::vector<double> y(xv.size());
              for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * xv[i];
              const std::vector<double> saved(xv.begin(), xv.end());
              Tensor sq = record_op("broken_square", x.shape(), std::move(y), {x},
                                    [saved](std::span<const double> g, std::span<const std::span<double>> gi) {
                                      if (gi[0].empty()) return;
                                      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * saved[i];
                                    });
              return sum(sq);
            };
            return grad_check(f, {x});
          }};
}

GradCheckReport run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::uint64_t seed,
                                    std::size_t trials_per_case) {
  GradCheckReport report;
  for (const auto& c : cases) {
    GradCheckRow row;
    row.name = c.name;
    row.tolerance = c.tolerance;
    for (std::size_t t = 0; t < trials_per_case; ++t) {
      Rng rng(derive_seed(seed, c.name + "/" + std::to_string(t)));
      const auto r = c.trial(rng);
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      row.coordinates += r.coordinates;
      ++row.trials;
    }
    row.pass = row.max_rel_error < row.tolerance;
    report.rows.push_back(row);
  }
  return report;
}

std::string format_gradcheck_report(const GradCheckReport& report) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %6s %8s %12s %10s  %s\n", "case", "trials", "coords", "max_rel_err",
                "tolerance", "result");
  out += buf;
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%-20s %6zu %8zu %12.3e %10.0e  %s\n", r.name.c_str(), r.trials, r.coordinates,
                  r.max_rel_error, r.tolerance, r.pass ? "pass" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace effecg
