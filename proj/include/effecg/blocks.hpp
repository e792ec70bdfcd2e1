#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "effecg/ops.hpp"
#include "effecg/rng.hpp"
#include "effecg/signal.hpp"
#include "effecg/tensor.hpp"

namespace effecg {

enum class Mode { train, eval };

enum class Init {
  he_uniform,   // U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))
  embedding,    // U(-1 / sqrt(V), +1 / sqrt(V)), V = rows
  zeros,
  ones,
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool l2 = false;  // included in the weight penalty
};

/// Ordered registry of named tensors. Each tensor is initialized from its own
/// stream derived from (seed, name), so a tensor's initial value does not
/// depend on which other tensors exist.
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor add(const std::string& name, Shape shape, Init init, std::size_t fan_in = 0,
             bool l2 = false);
  /// Non-trainable state saved with checkpoints (batch-norm running stats).
  Tensor add_buffer(const std::string& name, Shape shape, double fill);

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  std::vector<Tensor> l2_weights() const;
  /// Sum of element counts of the trainable tensors.
  std::size_t parameter_count() const;
  const NamedTensor* find(const std::string& name) const;

 private:
  std::uint64_t seed_;
  std::vector<NamedTensor> entries_;
};

/// y = x W + b with W [in x out].
class Dense {
 public:
  Dense() = default;
  Dense(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
        bool l2 = false);
  Tensor forward(const Tensor& x) const;
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

class BatchNorm {
 public:
  static constexpr double kMomentum = 0.9;
  static constexpr double kEps = 1e-5;

  BatchNorm() = default;
  BatchNorm(ParameterSet& params, const std::string& name, std::size_t channels);
  /// Train mode normalizes with batch statistics (batch >= 2) and folds them
  /// into the running averages; eval mode uses the running averages.
  Tensor forward(const Tensor& x, Mode mode);

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
};

/// Inverted dropout; identity in eval mode or when rate == 0.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

/// Squeeze (temporal mean) and excitation (dense-relu-dense-sigmoid) gating.
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(ParameterSet& params, const std::string& name, std::size_t channels, std::size_t hidden);
  /// Per-channel weights in (0, 1): [B x C].
  Tensor excitation(const Tensor& x) const;
  /// x [B x C x N] scaled by its excitation.
  Tensor forward(const Tensor& x) const;
  /// x [B x C x N] scaled per channel by s [B x C].
  static Tensor apply(const Tensor& x, const Tensor& s) { return channel_scale(x, s); }

 private:
  Dense reduce_;
  Dense expand_;
};

struct MbConvConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t expansion = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  double se_ratio = 0.25;  // SE hidden width = max(1, floor(expanded * se_ratio)); 0 disables SE

  std::size_t expanded() const { return in_channels * expansion; }
  std::size_t se_hidden() const;
  bool residual() const { return stride == 1 && in_channels == out_channels; }
  /// Analytic trainable parameter count.
  std::size_t parameter_count() const;
};

/// Mobile inverted bottleneck: [1x1 expand, BN, swish] (skipped when
/// expansion == 1), depthwise conv, BN, swish, SE, 1x1 project, BN, plus the
/// identity skip when stride == 1 and in == out.
class MbConvBlock {
 public:
  MbConvBlock() = default;
  MbConvBlock(ParameterSet& params, const std::string& name, const MbConvConfig& config);
  Tensor forward(const Tensor& x, Mode mode);
  const MbConvConfig& config() const { return config_; }
  bool has_residual() const { return config_.residual(); }

 private:
  MbConvConfig config_;
  std::optional<Tensor> expand_;
  std::optional<BatchNorm> expand_bn_;
  Tensor depthwise_;
  BatchNorm depthwise_bn_;
  std::optional<SeBlock> se_;
  Tensor project_;
  BatchNorm project_bn_;
};

/// Depthwise-separable conv: depthwise, BN, swish, 1x1 pointwise, BN, swish.
class DsConvBlock {
 public:
  DsConvBlock() = default;
  DsConvBlock(ParameterSet& params, const std::string& name, std::size_t in_channels,
              std::size_t out_channels, std::size_t kernel, std::size_t stride);
  Tensor forward(const Tensor& x, Mode mode);

 private:
  std::size_t stride_ = 1;
  Tensor depthwise_;
  BatchNorm depthwise_bn_;
  Tensor pointwise_;
  BatchNorm pointwise_bn_;
};

/// Gates packed as [i | f | g | o]; weights x: [in x 4H], h: [H x 4H].
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(ParameterSet& params, const std::string& name, std::size_t input, std::size_t hidden);
  /// x [B x in], h and c [B x H] -> (h', c')
  std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h, const Tensor& c) const;
  std::size_t hidden() const { return w_h_.dim(0); }
  std::size_t input() const { return w_x_.dim(0); }

 private:
  Tensor w_x_, w_h_, bias_;
};

/// Padded fiducial sequences for a batch, all of the same padded length.
struct FiducialBatch {
  std::vector<FiducialFeature> features;
  std::size_t signal_length = 1;  // index values are divided by this

  std::size_t batch() const { return features.size(); }
  std::size_t steps() const { return features.empty() ? 0 : features.front().size(); }
};

/// LSTM encoder over normalized fiducial indices. Masked positions carry the
/// state through unchanged, so the latent is the hidden state after the last
/// valid position and all-masked sequences give a zero latent. The optional
/// decoder reconstructs the sequence from the latent.
class LstmAutoencoder {
 public:
  LstmAutoencoder() = default;
  LstmAutoencoder(ParameterSet& params, const std::string& name, std::size_t hidden,
                  bool with_decoder);
  Tensor encode(const FiducialBatch& batch) const;
  /// Single feature -> [H].
  Tensor encode(const FiducialFeature& feature, std::size_t signal_length) const;
  /// Mean squared reconstruction error over valid positions.
  Tensor reconstruction_loss(const FiducialBatch& batch, const Tensor& latent) const;
  bool has_decoder() const { return decoder_.has_value(); }
  std::size_t hidden() const { return encoder_.hidden(); }

 private:
  LstmCell encoder_;
  std::optional<LstmCell> decoder_;
  std::optional<Dense> readout_;
};

class EmbeddingLayer {
 public:
  EmbeddingLayer() = default;
  EmbeddingLayer(ParameterSet& params, const std::string& name, std::size_t vocabulary,
                 std::size_t dim);
  /// [n x D]; throws std::out_of_range naming the offending index.
  Tensor lookup(const std::vector<std::size_t>& indices) const;
  /// [D]
  Tensor embed(std::size_t index) const;
  const Tensor& table() const { return table_; }

 private:
  Tensor table_;
};

/// softmax(Q K^T) row-wise for [B x Lq x d] queries and [B x Lk x d] keys,
/// optionally scaled by 1 / sqrt(d).
Tensor attention_weights(const Tensor& queries, const Tensor& keys, bool scaled);

struct CrossAttentionConfig {
  std::size_t feature_width = 0;  // F: pooled ECG feature width
  std::size_t tokens = 8;         // L: ECG feature split into L tokens of width F / L
  std::size_t embed_dim = 16;     // D: age/gender embedding width
  std::size_t width = 16;         // d: shared projection width
  bool use_age = true;
  bool use_gender = true;
  bool scaled = false;

  std::size_t token_width() const { return tokens ? feature_width / tokens : 0; }
  std::size_t parameter_count() const;
};

/// Age-to-gender and gender-to-age attention over ECG value tokens. Each
/// embedding is projected to L query tokens and L key tokens of width d; the
/// two attention maps (L x L) are summed and applied to the projected ECG
/// tokens. The result is flattened, aligned back to F by a linear layer, and
/// concatenated after the ECG feature: output [B x 2F]. With a single
/// modality the block reduces to that modality attending to itself.
class CrossAttentionFusion {
 public:
  struct Trace {
    Tensor age_to_gender;  // [B x L x L] (absent modality -> undefined)
    Tensor gender_to_age;
    Tensor attended;  // [B x L x d]
  };

  CrossAttentionFusion() = default;
  CrossAttentionFusion(ParameterSet& params, const std::string& name,
                       const CrossAttentionConfig& config);
  Tensor forward(const Tensor& ecg, const std::optional<Tensor>& age,
                 const std::optional<Tensor>& gender, Trace* trace = nullptr) const;
  const CrossAttentionConfig& config() const { return config_; }

 private:
  Tensor tokens(const Dense& proj, const Tensor& embedding) const;

  CrossAttentionConfig config_;
  std::optional<Dense> age_query_, age_key_, gender_query_, gender_key_;
  Dense value_;
  Dense align_;
};

}  // namespace effecg
