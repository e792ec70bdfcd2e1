#pragma once

#include <cstdint>
#include <optional>

#include "effecg/data.hpp"
#include "effecg/model.hpp"
#include "effecg/signal.hpp"
#include "effecg/train.hpp"
#include "json.hpp"

namespace effecg {

struct DataConfig {
  double beat_sample_rate = 125.0;  // beat CSV files carry no rate
  std::size_t class_count = 0;      // 0 infers it from the labels
  bool drop_abnormal = true;
  std::size_t balanced_test_per_class = 0;  // 0 keeps the whole test split
};

/// Everything a training run needs. Missing JSON fields keep their defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SplitSpec split;
  PreprocessConfig preprocess;
  DataConfig data;
  /// When set, replaces the model, training and split seeds with streams
  /// derived from it.
  std::optional<std::uint64_t> seed;

  void apply_seed();
};

nlohmann::json to_json(const PreprocessConfig& config);
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

}  // namespace effecg
