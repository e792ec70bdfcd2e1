#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "effecg/data.hpp"
#include "effecg/metrics.hpp"
#include "effecg/model.hpp"
#include "effecg/tensor.hpp"

namespace effecg {

/// cce: categorical cross-entropy on softmax scores (single-label default).
/// mse_l2: squared error against one-hot targets. bce: per-class binary
/// cross-entropy on sigmoid scores.
enum class LossKind { cce, mse_l2, bce };

struct LossConfig {
  LossKind kind = LossKind::cce;
  double lambda = 1e-4;  // L2 on the fully connected weights
  std::vector<double> class_weights;  // empty means all ones
};

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

/// (lambda / m) * sum of squared entries of every weight.
Tensor l2_penalty(const std::vector<Tensor>& weights, double lambda, std::size_t m);

/// (1/m) sum (y - y_hat)^2 + (lambda/m) sum ||W||_F^2.
Tensor mse_l2_loss(const Tensor& y, const Tensor& y_hat, const std::vector<Tensor>& weights,
                   double lambda, std::size_t m);

/// -(1/N) sum over samples and classes of y log p + (1 - y) log(1 - p), with p
/// clamped to [1e-7, 1 - 1e-7]; N is the row count of y.
Tensor bce_loss(const Tensor& y, const Tensor& p);

/// -(1/N) sum y log p over rows, p clamped below at 1e-7.
Tensor cce_loss(const Tensor& y, const Tensor& p);

/// Data term of `config` for targets y and scores p, both [N x K]. Class
/// weights scale each column.
Tensor data_loss(const LossConfig& config, const Tensor& y, const Tensor& p);

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

  /// Bias-corrected update from the accumulated gradients, which are then
  /// cleared. Tensors without a gradient count as zero gradient.
  void step(double lrate);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

enum class Direction { minimize, maximize };

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience, double min_delta = 0.0,
                        Direction direction = Direction::minimize);

  /// Feed the next evaluation; true means stop. An improvement is a move
  /// beyond the best value by more than min_delta.
  bool update(double value);
  bool improved() const { return improved_; }
  std::optional<double> best() const { return best_; }
  /// Zero-based index of the update that set the best value.
  std::size_t best_index() const { return best_index_; }
  std::size_t stale() const { return stale_; }

 private:
  std::size_t patience_;
  double min_delta_;
  Direction direction_;
  std::optional<double> best_;
  std::size_t best_index_ = 0;
  std::size_t seen_ = 0;
  std::size_t stale_ = 0;
  bool improved_ = false;
};

/// Indices into `labels`: every original sample, then seeded duplicates of
/// the minority classes until each class matches the largest one.
std::vector<std::size_t> oversample(std::span<const std::size_t> labels, std::size_t class_count,
                                    std::uint64_t seed);

struct TrainConfig {
  LossConfig loss;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 4000;
  std::size_t d_model = 0;  // 0 uses the model's fc_hidden
  std::size_t patience = 10;
  double min_delta = 0.0;
  bool oversample = false;
  double reconstruction_weight = 1.0;
  std::vector<double> thresholds;  // sigmoid head; empty means 0.5 everywhere
  bool tune_thresholds = false;
  std::size_t eval_batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lrate = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_micro_f1 = 0.0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;  // index into history
  bool stopped_early = false;
  std::vector<double> thresholds;
};

/// Scores of a whole dataset in eval mode, plus the objective over it.
struct Predictions {
  std::vector<double> scores;  // [samples x classes]
  std::vector<std::vector<std::size_t>> labels;
  double loss = 0.0;
};

Predictions predict_dataset(Model& model, const PreparedDataset& data, const LossConfig& loss,
                            std::size_t batch_size = 64);

/// Classification report over `data`; thresholds apply to sigmoid heads.
EvalReport evaluate(Model& model, const PreparedDataset& data, const LossConfig& loss,
                    std::span<const double> thresholds, std::size_t batch_size = 64,
                    std::span<const std::size_t> cinc_classes = {});

/// Per-class threshold in {0.05, 0.10, ..., 0.95} that maximizes that class's
/// F1; ties keep the lower threshold.
std::vector<double> tune_thresholds(const Predictions& predictions, std::size_t class_count);

/// Mini-batch training with early stopping on the validation loss (the train
/// loss without a validation set). The model ends on the best epoch's
/// weights. Throws DivergenceError on a non-finite loss.
TrainResult train(Model& model, const PreparedDataset& train_data, const PreparedDataset* val_data,
                  const TrainConfig& config,
                  const std::function<void(const HistoryRow&)>& on_epoch = {});

/// `epoch,step,lrate,train_loss,val_loss,val_micro_f1` with 17 significant
/// digits.
std::string history_csv(const std::vector<HistoryRow>& rows);

}  // namespace effecg
