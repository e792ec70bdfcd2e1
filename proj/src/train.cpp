#include "effecg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "effecg/errors.hpp"
#include "effecg/ops.hpp"
#include "effecg/parallel.hpp"
#include "effecg/rng.hpp"
#include "json_util.hpp"

namespace effecg {

using nlohmann::json;

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cce:
      return "cce";
    case LossKind::mse_l2:
      return "mse_l2";
    case LossKind::bce:
      return "bce";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "cce") return LossKind::cce;
  if (name == "mse_l2") return LossKind::mse_l2;
  if (name == "bce") return LossKind::bce;
  throw std::invalid_argument("loss must be cce, mse_l2 or bce, got '" + name + "'");
}

Tensor l2_penalty(const std::vector<Tensor>& weights, double lambda, std::size_t m) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  if (m == 0) throw std::invalid_argument("sample count must be positive");
  Tensor total = Tensor::scalar(0.0);
  if (lambda == 0.0) return total;
  for (const auto& w : weights) total = add(total, sum(square(w)));
  return scale(total, lambda / static_cast<double>(m));
}

Tensor mse_l2_loss(const Tensor& y, const Tensor& y_hat, const std::vector<Tensor>& weights, double lambda,
                   std::size_t m) {
  if (y.shape() != y_hat.shape()) {
    throw std::invalid_argument("mse: target shape " + shape_str(y.shape()) + " vs prediction " +
                                shape_str(y_hat.shape()));
  }
  if (m == 0) throw std::invalid_argument("sample count must be positive");
  Tensor err = scale(sum(square(sub(y, y_hat))), 1.0 / static_cast<double>(m));
  return add(err, l2_penalty(weights, lambda, m));
}

namespace {

constexpr double kProbFloor = 1e-7;

void check_pair(const Tensor& y, const Tensor& p, const char* what) {
  if (y.shape() != p.shape() || y.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": target " + shape_str(y.shape()) + " and scores " +
                                shape_str(p.shape()) + " must be equal [N x K] shapes");
  }
}

Tensor bce_terms(const Tensor& y, const Tensor& p) {
  const Tensor pc = clamp(p, kProbFloor, 1.0 - kProbFloor);
  const Tensor one_minus_y = add_scalar(scale(y, -1.0), 1.0);
  const Tensor one_minus_p = add_scalar(scale(pc, -1.0), 1.0);
  return add(mul(y, log(pc)), mul(one_minus_y, log(one_minus_p)));
}

Tensor column_weights(const std::vector<double>& w, std::size_t rows) {
  std::vector<double> v;
  v.reserve(rows * w.size());
  for (std::size_t r = 0; r < rows; ++r) v.insert(v.end(), w.begin(), w.end());
  return Tensor({rows, w.size()}, std::move(v));
}

}  // namespace

Tensor bce_loss(const Tensor& y, const Tensor& p) {
  check_pair(y, p, "bce");
  return scale(sum(bce_terms(y, p)), -1.0 / static_cast<double>(y.dim(0)));
}

Tensor cce_loss(const Tensor& y, const Tensor& p) {
  check_pair(y, p, "cce");
  return scale(sum(mul(y, log(clamp(p, kProbFloor, 1.0)))), -1.0 / static_cast<double>(y.dim(0)));
}

Tensor data_loss(const LossConfig& config, const Tensor& y, const Tensor& p) {
  check_pair(y, p, "loss");
  const double inv_n = 1.0 / static_cast<double>(y.dim(0));
  std::optional<Tensor> w;
  if (!config.class_weights.empty()) {
    if (config.class_weights.size() != y.dim(1)) {
      throw std::invalid_argument("class_weights has " + std::to_string(config.class_weights.size()) +
                                  " entries for " + std::to_string(y.dim(1)) + " classes");
    }
    w = column_weights(config.class_weights, y.dim(0));
  }
  auto weighted = [&](const Tensor& t) { return w ? mul(*w, t) : t; };
  switch (config.kind) {
    case LossKind::cce:
      return scale(sum(weighted(mul(y, log(clamp(p, kProbFloor, 1.0))))), -inv_n);
    case LossKind::mse_l2:
      return scale(sum(weighted(square(sub(y, p)))), inv_n);
    case LossKind::bce:
      return scale(sum(weighted(bce_terms(y, p))), -inv_n);
  }
  throw std::logic_error("unhandled loss kind");
}

double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step < 1 || d_model < 1 || warmup < 1) {
    throw std::invalid_argument("noam_lr arguments must be at least 1");
  }
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lrate) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const Tensor g = p.grad();
    const auto gv = g.values();
    auto pv = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < pv.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * gv[k];
      v[k] = b2 * v[k] + (1.0 - b2) * gv[k] * gv[k];
      pv[k] -= lrate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
    }
    p.zero_grad();
  }
}

EarlyStopper::EarlyStopper(std::size_t patience, double min_delta, Direction direction)
    : patience_(patience), min_delta_(min_delta), direction_(direction) {
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  if (min_delta < 0.0) throw std::invalid_argument("min_delta must be non-negative");
}

bool EarlyStopper::update(double value) {
  ++seen_;
  improved_ = false;
  if (!std::isnan(value)) {
    if (!best_) {
      improved_ = true;
    } else if (direction_ == Direction::minimize) {
      improved_ = value < *best_ - min_delta_;
    } else {
      improved_ = value > *best_ + min_delta_;
    }
  }
  if (improved_) {
    best_ = value;
    best_index_ = seen_ - 1;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return stale_ >= patience_;
}

std::vector<std::size_t> oversample(std::span<const std::size_t> labels, std::size_t class_count,
                                    std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> members(class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside " +
                              std::to_string(class_count) + " classes");
    }
    members[labels[i]].push_back(i);
  }
  std::size_t largest = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (members[c].empty()) throw DataError("cannot oversample: class " + std::to_string(c) + " has no samples");
    largest = std::max(largest, members[c].size());
  }
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  Rng rng(derive_seed(seed, "oversample"));
  for (const auto& m : members) {
    for (std::size_t k = m.size(); k < largest; ++k) out.push_back(m[rng.below(m.size())]);
  }
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (loss.lambda < 0.0) fail("loss.lambda must be non-negative");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 2) fail("batch_size must be at least 2 (batch norm needs two samples)");
  if (warmup_steps < 1) fail("warmup_steps must be at least 1");
  if (patience < 1) fail("patience must be at least 1");
  if (min_delta < 0.0) fail("min_delta must be non-negative");
  if (reconstruction_weight < 0.0) fail("reconstruction_weight must be non-negative");
  if (eval_batch_size < 1) fail("eval_batch_size must be at least 1");
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) fail("thresholds must lie in (0, 1)");
  }
  for (double w : loss.class_weights) {
    if (!(w >= 0.0)) fail("class weights must be non-negative");
  }
}

json to_json(const TrainConfig& c) {
  return {
      {"loss", {{"kind", to_string(c.loss.kind)}, {"lambda", c.loss.lambda}, {"class_weights", c.loss.class_weights}}},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"warmup_steps", c.warmup_steps},
      {"d_model", c.d_model},
      {"patience", c.patience},
      {"min_delta", c.min_delta},
      {"oversample", c.oversample},
      {"reconstruction_weight", c.reconstruction_weight},
      {"thresholds", c.thresholds},
      {"tune_thresholds", c.tune_thresholds},
      {"eval_batch_size", c.eval_batch_size},
      {"seed", c.seed},
  };
}

TrainConfig train_config_from_json(const json& j) {
  using detail::read;
  TrainConfig c;
  detail::check_keys(j,
                     {"loss", "epochs", "batch_size", "warmup_steps", "d_model", "patience", "min_delta",
                      "oversample", "reconstruction_weight", "thresholds", "tune_thresholds",
                      "eval_batch_size", "seed"},
                     "train config");
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::check_keys(l, {"kind", "lambda", "class_weights"}, "loss");
    if (l.contains("kind")) c.loss.kind = loss_kind_from_string(l.at("kind").get<std::string>());
    read(l, "lambda", c.loss.lambda);
    read(l, "class_weights", c.loss.class_weights);
  }
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "d_model", c.d_model);
  read(j, "patience", c.patience);
  read(j, "min_delta", c.min_delta);
  read(j, "oversample", c.oversample);
  read(j, "reconstruction_weight", c.reconstruction_weight);
  read(j, "thresholds", c.thresholds);
  read(j, "tune_thresholds", c.tune_thresholds);
  read(j, "eval_batch_size", c.eval_batch_size);
  read(j, "seed", c.seed);
  return c;
}

namespace {

Tensor targets(const std::vector<std::vector<std::size_t>>& labels, std::size_t k) {
  Tensor y({labels.size(), k}, 0.0);
  auto v = y.mutable_values();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (auto l : labels[i]) v[i * k + l] = 1.0;
  }
  return y;
}

void check_compatible(const Model& model, const PreparedDataset& data, const LossConfig& loss,
                      const char* role) {
  const auto& c = model.config();
  const std::string who = std::string(role) + " data: ";
  if (data.leads != c.leads || data.length != c.input_length) {
    throw DataError(who + "model expects " + std::to_string(c.leads) + " leads x " +
                    std::to_string(c.input_length) + " samples, data has " + std::to_string(data.leads) +
                    " x " + std::to_string(data.length));
  }
  if (data.class_count > c.class_count) {
    throw DataError(who + std::to_string(data.class_count) + " classes, model has " +
                    std::to_string(c.class_count));
  }
  if (data.label_mode == LabelMode::multi && loss.kind != LossKind::bce) {
    throw std::invalid_argument("multi-label data needs the bce loss");
  }
  if ((loss.kind == LossKind::bce) != (c.head == Head::sigmoid)) {
    throw std::invalid_argument("loss " + to_string(loss.kind) + " does not match the " +
                                (c.head == Head::sigmoid ? "sigmoid" : "softmax") + " head");
  }
  if (c.fusion.enabled) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& r = data.records[i];
      if (c.fusion.use_age && !r.age) throw DataError(who + "record " + std::to_string(i) + " has no age");
      if (c.fusion.use_gender && !r.gender) {
        throw DataError(who + "record " + std::to_string(i) + " has no gender");
      }
    }
  }
}

std::vector<std::vector<double>> snapshot(const Model& model) {
  std::vector<std::vector<double>> out;
  for (const auto& e : model.parameters().entries()) {
    const auto v = e.tensor.values();
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

void restore(Model& model, const std::vector<std::vector<double>>& snap) {
  const auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    auto dst = t.mutable_values();
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

std::vector<double> resolve_thresholds(const Model& model, const std::vector<double>& given) {
  const std::size_t k = model.config().class_count;
  if (given.empty()) return std::vector<double>(k, 0.5);
  if (given.size() == 1) return std::vector<double>(k, given[0]);
  if (given.size() != k) {
    throw std::invalid_argument(std::to_string(given.size()) + " thresholds for " + std::to_string(k) +
                                " classes");
  }
  return given;
}

}  // namespace

Predictions predict_dataset(Model& model, const PreparedDataset& data, const LossConfig& loss,
                            std::size_t batch_size) {
  check_compatible(model, data, loss, "evaluation");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  const std::size_t k = model.config().class_count, n = data.size();
  Predictions out;
  out.scores.assign(n * k, 0.0);
  if (n == 0) return out;
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<double> batch_loss(batches, 0.0);
  parallel_for(batches, [&](std::size_t b) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b * batch_size; i < std::min(n, (b + 1) * batch_size); ++i) idx.push_back(i);
    const Batch batch = assemble_batch(data, idx);
    const auto result = model.forward(batch.input, Mode::eval);
    const auto s = result.scores.values();
    std::copy(s.begin(), s.end(), out.scores.begin() + static_cast<std::ptrdiff_t>(idx.front() * k));
    const Tensor l = data_loss(loss, targets(batch.labels, k), result.scores);
    batch_loss[b] = l.item() * static_cast<double>(idx.size());
  });
  double total = 0.0;
  for (double l : batch_loss) total += l;
  const Tensor penalty = l2_penalty(model.l2_weights(), loss.lambda, n);
  out.loss = total / static_cast<double>(n) + penalty.item();
  for (const auto& r : data.records) out.labels.push_back(r.labels);
  return out;
}

EvalReport evaluate(Model& model, const PreparedDataset& data, const LossConfig& loss,
                    std::span<const double> thresholds, std::size_t batch_size,
                    std::span<const std::size_t> cinc_classes) {
  const auto p = predict_dataset(model, data, loss, batch_size);
  const auto thr = resolve_thresholds(model, std::vector<double>(thresholds.begin(), thresholds.end()));
  const bool multi = data.label_mode == LabelMode::multi;
  auto report = evaluate_scores(p.scores, p.labels, model.config().class_count, multi, thr, cinc_classes);
  report.loss = p.loss;
  report.parameter_count = model.parameter_count();
  return report;
}

std::vector<double> tune_thresholds(const Predictions& predictions, std::size_t class_count) {
  const std::size_t n = predictions.labels.size();
  std::vector<double> out(class_count, 0.5);
  for (std::size_t c = 0; c < class_count; ++c) {
    double best_f1 = -1.0;
    for (int step = 1; step <= 19; ++step) {
      const double t = step / 20.0;
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& l = predictions.labels[i];
        const bool truth = std::find(l.begin(), l.end(), c) != l.end();
        const bool pred = predictions.scores[i * class_count + c] >= t;
        tp += truth && pred;
        fp += !truth && pred;
        fn += truth && !pred;
      }
      const double f1 = f1_from_counts(tp, fp, fn);
      if (f1 > best_f1) {
        best_f1 = f1;
        out[c] = t;
      }
    }
  }
  return out;
}

TrainResult train(Model& model, const PreparedDataset& train_data, const PreparedDataset* val_data,
                  const TrainConfig& config, const std::function<void(const HistoryRow&)>& on_epoch) {
  config.validate();
  check_compatible(model, train_data, config.loss, "training");
  if (val_data) check_compatible(model, *val_data, config.loss, "validation");
  if (train_data.size() < 2) throw DataError("training needs at least two records");
  const std::size_t k = model.config().class_count;
  if (!config.loss.class_weights.empty() && config.loss.class_weights.size() != k) {
    throw std::invalid_argument("class_weights has " + std::to_string(config.loss.class_weights.size()) +
                                " entries for " + std::to_string(k) + " classes");
  }
  const bool has_val = val_data && val_data->size() > 0;

  TrainResult result;
  result.thresholds = resolve_thresholds(model, config.thresholds);

  std::vector<std::size_t> pool(train_data.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  if (config.oversample) {
    if (train_data.label_mode != LabelMode::single) throw DataError("oversampling needs single-label data");
    std::vector<std::size_t> labels;
    for (const auto& r : train_data.records) labels.push_back(r.labels.at(0));
    pool = oversample(labels, k, config.seed);
  }

  const std::size_t d_model = config.d_model ? config.d_model : model.config().fc_hidden;
  model.reseed_dropout(derive_seed(config.seed, "dropout"));
  Adam optimizer(model.trainable());
  EarlyStopper stopper(config.patience, config.min_delta);
  auto best = snapshot(model);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto batches = make_batches(pool.size(), config.batch_size,
                                derive_seed(config.seed, "epoch " + std::to_string(epoch)));
    // batch norm cannot normalize a single sample
    if (batches.size() > 1 && batches.back().size() == 1) {
      batches[batches.size() - 2].push_back(batches.back()[0]);
      batches.pop_back();
    }
    double loss_sum = 0.0;
    for (auto& positions : batches) {
      for (auto& p : positions) p = pool[p];
      const Batch batch = assemble_batch(train_data, positions);
      const auto out = model.forward(batch.input, Mode::train);
      Tensor loss = add(data_loss(config.loss, targets(batch.labels, k), out.scores),
                        l2_penalty(model.l2_weights(), config.loss.lambda, positions.size()));
      if (out.reconstruction_loss && config.reconstruction_weight > 0.0) {
        loss = add(loss, scale(*out.reconstruction_loss, config.reconstruction_weight));
      }
      ++step;
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError(step, "non-finite loss at step " + std::to_string(step));
      }
      loss_sum += value * static_cast<double>(positions.size());
      backward(loss);
      optimizer.step(noam_lr(step, d_model, config.warmup_steps));
    }

    HistoryRow row;
    row.epoch = epoch;
    row.step = step;
    row.lrate = noam_lr(step, d_model, config.warmup_steps);
    row.train_loss = loss_sum / static_cast<double>(pool.size());
    row.val_loss = std::numeric_limits<double>::quiet_NaN();
    row.val_micro_f1 = std::numeric_limits<double>::quiet_NaN();
    if (has_val) {
      const auto report = evaluate(model, *val_data, config.loss, result.thresholds, config.eval_batch_size);
      row.val_loss = report.loss;
      row.val_micro_f1 = report.f1.micro_f1;
      if (!std::isfinite(row.val_loss)) {
        throw DivergenceError(step, "non-finite validation loss after step " + std::to_string(step));
      }
    }
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);

    const bool stop = stopper.update(has_val ? row.val_loss : row.train_loss);
    if (stopper.improved()) best = snapshot(model);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  result.best_epoch = stopper.best_index();

  if (config.tune_thresholds && has_val && model.config().head == Head::sigmoid) {
    result.thresholds = tune_thresholds(predict_dataset(model, *val_data, config.loss, config.eval_batch_size), k);
  }
  return result;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,step,lrate,train_loss,val_loss,val_micro_f1\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.lrate, r.train_loss,
                  r.val_loss, r.val_micro_f1);
    out += buf;
  }
  return out;
}

}  // namespace effecg
