#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "effecg/blocks.hpp"
#include "effecg/signal.hpp"
#include "effecg/tensor.hpp"
#include "json.hpp"

namespace effecg {

enum class Head { softmax, sigmoid };

struct StageConfig {
  std::size_t expansion = 1;
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;  // applied by the first block of the stage
  std::size_t repeats = 1;
  double se_ratio = 0.25;
};

/// EfficientNet-B0 stage layout with 1D temporal kernels.
std::vector<StageConfig> default_stages();

struct FusionConfig {
  bool enabled = false;
  std::size_t embed_dim = 16;
  std::size_t age_bins = 10;  // decade bins, the last one open ended
  bool use_age = true;
  bool use_gender = true;
  bool use_cross_attention = true;
  std::size_t tokens = 8;
  std::size_t attention_width = 16;
  bool scaled_attention = false;
};

struct ModelConfig {
  std::size_t leads = 1;
  std::size_t input_length = 0;
  std::size_t class_count = 2;
  Head head = Head::softmax;
  std::size_t stem_channels = 32;
  std::size_t stem_kernel = 15;
  std::size_t stem_stride = 2;
  std::vector<StageConfig> stages = default_stages();
  std::size_t fc_hidden = 128;
  double dropout_rate = 0.2;
  std::size_t ae_hidden = 16;  // 0 disables the fiducial branch
  bool ae_reconstruction = false;
  FusionConfig fusion;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument describing the first inconsistency.
  void validate() const;
  /// Channel count after the last stage (the pooled feature width).
  std::size_t feature_width() const;
  /// Width of the vector entering the first fully connected layer.
  std::size_t head_input_width() const;
  /// Temporal length after the stem and every stage.
  std::size_t output_length() const;
  /// Parameter count derived from the configuration alone.
  std::size_t analytic_parameter_count() const;
  /// Trainable parameters of the age/gender embeddings and the attention
  /// block (zero when fusion is disabled).
  std::size_t fusion_parameter_count() const;
};

nlohmann::json to_json(const ModelConfig& config);
/// Missing fields keep their defaults; unknown fields are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Decade bucket clipped to the configured bin count.
std::size_t age_bin(int age, std::size_t bins);

/// Batched network input. Fiducial batches are required when ae_hidden > 0;
/// ages and genders when fusion uses them.
struct ModelInput {
  Tensor signals;  // [B x C x N]
  FiducialBatch r_peaks;
  FiducialBatch p_waves;
  std::vector<std::optional<int>> ages;
  std::vector<std::optional<Gender>> genders;

  std::size_t batch() const { return signals.defined() ? signals.dim(0) : 0; }
};

struct ModelOutput {
  Tensor logits;  // [B x K]
  Tensor scores;  // softmax or sigmoid of the logits
  /// Auxiliary autoencoder loss when ae_reconstruction is on.
  std::optional<Tensor> reconstruction_loss;
};

class Model {
 public:
  explicit Model(ModelConfig config);
  // Tensors are shared handles, so a copy would alias the parameters.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Eval mode reads parameters and running statistics only, so concurrent
  /// eval calls are safe. Train mode updates batch-norm statistics and draws
  /// dropout masks.
  ModelOutput forward(const ModelInput& input, Mode mode);

  const ModelConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.parameter_count(); }
  std::vector<Tensor> trainable() const { return params_.trainable(); }
  std::vector<Tensor> l2_weights() const { return params_.l2_weights(); }

  /// Copy values by name from `other`. Every tensor of this model must be
  /// present with a matching shape; extra source tensors are an error unless
  /// `allow_unused`.
  void load_state(const ParameterSet& other, bool allow_unused = false);

  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

 private:
  ModelConfig config_;
  ParameterSet params_;
  Tensor stem_;
  BatchNorm stem_bn_;
  std::vector<MbConvBlock> blocks_;
  std::optional<LstmAutoencoder> r_encoder_, p_encoder_;
  std::optional<EmbeddingLayer> age_embedding_, gender_embedding_;
  std::optional<CrossAttentionFusion> fusion_;
  Dense fc1_, fc2_;
  Rng dropout_rng_;
};

/// Softmax head: the argmax class (thresholds ignored, may be empty).
/// Sigmoid head: every class whose score reaches its threshold.
std::vector<std::size_t> predict(std::span<const double> scores, Head head,
                                 std::span<const double> thresholds);

inline constexpr int kCheckpointFormatVersion = 1;

/// One line of compact JSON manifest
///   {format_version, config, payload_bytes, tensors: [{name, shape, offset, len}]}
/// followed by the raw little-endian float32 payload (offset/len in bytes).
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace effecg
