#include "effecg/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace effecg {

Tensor ParameterSet::add(const std::string& name, Shape shape, Init init, std::size_t fan_in,
                         bool l2) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t(shape, 0.0);
  auto v = t.mutable_values();
  Rng rng(derive_seed(seed_, name));
  switch (init) {
    case Init::he_uniform: {
      if (fan_in == 0) throw std::invalid_argument("he_uniform needs fan_in for " + name);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& x : v) x = rng.uniform(-bound, bound);
      break;
    }
    case Init::embedding: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape.at(0)));
      for (auto& x : v) x = rng.uniform(-bound, bound);
      break;
    }
    case Init::zeros:
      break;
    case Init::ones:
      for (auto& x : v) x = 1.0;
      break;
  }
  t.set_requires_grad(true);
  entries_.push_back({name, t, true, l2});
  return t;
}

Tensor ParameterSet::add_buffer(const std::string& name, Shape shape, double fill) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t(std::move(shape), fill);
  entries_.push_back({name, t, false, false});
  return t;
}

std::vector<Tensor> ParameterSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

std::vector<Tensor> ParameterSet::l2_weights() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.trainable && e.l2) out.push_back(e.tensor);
  }
  return out;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

const NamedTensor* ParameterSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

// ---- Dense ----

Dense::Dense(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
             bool l2)
    : weight_(params.add(name + ".weight", {in, out}, Init::he_uniform, in, l2)),
      bias_(params.add(name + ".bias", {out}, Init::zeros)) {}

Tensor Dense::forward(const Tensor& x) const {
  return add_bias(matmul(x, weight_), bias_, 1);
}

// ---- BatchNorm ----

BatchNorm::BatchNorm(ParameterSet& params, const std::string& name, std::size_t channels)
    : gamma_(params.add(name + ".gamma", {channels}, Init::ones)),
      beta_(params.add(name + ".beta", {channels}, Init::zeros)),
      running_mean_(params.add_buffer(name + ".running_mean", {channels}, 0.0)),
      running_var_(params.add_buffer(name + ".running_var", {channels}, 1.0)) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::eval) {
    auto rm = running_mean_.values();
    auto rv = running_var_.values();
    return batch_norm_eval(x, gamma_, beta_, {rm.begin(), rm.end()}, {rv.begin(), rv.end()}, kEps);
  }
  std::vector<double> mu, var;
  Tensor y = batch_norm_train(x, gamma_, beta_, kEps, &mu, &var);
  auto rm = running_mean_.mutable_values();
  auto rv = running_var_.mutable_values();
  for (std::size_t c = 0; c < mu.size(); ++c) {
    rm[c] = kMomentum * rm[c] + (1.0 - kMomentum) * mu[c];
    rv[c] = kMomentum * rv[c] + (1.0 - kMomentum) * var[c];
  }
  return y;
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  Tensor keep(x.shape(), 0.0);
  const double s = 1.0 / (1.0 - rate);
  for (auto& v : keep.mutable_values()) v = rng.uniform() >= rate ? s : 0.0;
  return mul(x, keep);
}

// ---- SE ----

SeBlock::SeBlock(ParameterSet& params, const std::string& name, std::size_t channels,
                 std::size_t hidden)
    : reduce_(params, name + ".reduce", channels, hidden),
      expand_(params, name + ".expand", hidden, channels) {}

Tensor SeBlock::excitation(const Tensor& x) const {
  if (x.rank() != 3) throw std::invalid_argument("SE expects [B x C x N], got " + shape_str(x.shape()));
  return sigmoid(expand_.forward(relu(reduce_.forward(global_avg_pool(x)))));
}

Tensor SeBlock::forward(const Tensor& x) const { return apply(x, excitation(x)); }

// ---- MBConv ----

std::size_t MbConvConfig::se_hidden() const {
  if (se_ratio <= 0.0) return 0;
  const auto h = static_cast<std::size_t>(std::floor(static_cast<double>(expanded()) * se_ratio));
  return h < 1 ? 1 : h;
}

std::size_t MbConvConfig::parameter_count() const {
  const std::size_t e = expanded();
  std::size_t n = 0;
  if (expansion != 1) n += e * in_channels + 2 * e;
  n += e * kernel + 2 * e;
  if (const std::size_t h = se_hidden(); h > 0) n += e * h + h + h * e + e;
  n += out_channels * e + 2 * out_channels;
  return n;
}

MbConvBlock::MbConvBlock(ParameterSet& params, const std::string& name, const MbConvConfig& config)
    : config_(config) {
  if (config.in_channels == 0 || config.out_channels == 0 || config.expansion == 0 ||
      config.kernel == 0 || config.stride == 0) {
    throw std::invalid_argument("MBConv " + name + ": zero-sized configuration");
  }
  const std::size_t e = config.expanded();
  if (config.expansion != 1) {
    expand_ = params.add(name + ".expand", {e, config.in_channels, 1}, Init::he_uniform,
                         config.in_channels);
    expand_bn_ = BatchNorm(params, name + ".expand_bn", e);
  }
  depthwise_ = params.add(name + ".depthwise", {e, config.kernel}, Init::he_uniform, config.kernel);
  depthwise_bn_ = BatchNorm(params, name + ".depthwise_bn", e);
  if (const std::size_t h = config.se_hidden(); h > 0) se_ = SeBlock(params, name + ".se", e, h);
  project_ = params.add(name + ".project", {config.out_channels, e, 1}, Init::he_uniform, e);
  project_bn_ = BatchNorm(params, name + ".project_bn", config.out_channels);
}

Tensor MbConvBlock::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != config_.in_channels) {
    throw std::invalid_argument("MBConv expects [B x " + std::to_string(config_.in_channels) +
                                " x N], got " + shape_str(x.shape()));
  }
  Tensor h = x;
  if (expand_) h = swish(expand_bn_->forward(conv1d(h, *expand_, 1, Padding::valid), mode));
  h = swish(depthwise_bn_.forward(depthwise_conv1d(h, depthwise_, config_.stride, Padding::same), mode));
  if (se_) h = se_->forward(h);
  h = project_bn_.forward(conv1d(h, project_, 1, Padding::valid), mode);
  if (config_.residual()) h = add(h, x);
  return h;
}

DsConvBlock::DsConvBlock(ParameterSet& params, const std::string& name, std::size_t in_channels,
                         std::size_t out_channels, std::size_t kernel, std::size_t stride)
    : stride_(stride),
      depthwise_(params.add(name + ".depthwise", {in_channels, kernel}, Init::he_uniform, kernel)),
      depthwise_bn_(params, name + ".depthwise_bn", in_channels),
      pointwise_(params.add(name + ".pointwise", {out_channels, in_channels, 1}, Init::he_uniform,
                            in_channels)),
      pointwise_bn_(params, name + ".pointwise_bn", out_channels) {}

Tensor DsConvBlock::forward(const Tensor& x, Mode mode) {
  Tensor h = swish(depthwise_bn_.forward(depthwise_conv1d(x, depthwise_, stride_, Padding::same), mode));
  return swish(pointwise_bn_.forward(conv1d(h, pointwise_, 1, Padding::valid), mode));
}

// ---- LSTM ----

LstmCell::LstmCell(ParameterSet& params, const std::string& name, std::size_t input,
                   std::size_t hidden)
    : w_x_(params.add(name + ".w_x", {input, 4 * hidden}, Init::he_uniform, input)),
      w_h_(params.add(name + ".w_h", {hidden, 4 * hidden}, Init::he_uniform, hidden)),
      bias_(params.add(name + ".bias", {4 * hidden}, Init::zeros)) {
  auto b = bias_.mutable_values();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;  // forget gate
}

std::pair<Tensor, Tensor> LstmCell::step(const Tensor& x, const Tensor& h, const Tensor& c) const {
  const std::size_t hs = hidden();
  Tensor z = add_bias(add(matmul(x, w_x_), matmul(h, w_h_)), bias_, 1);
  Tensor i = sigmoid(slice(z, 1, 0, hs));
  Tensor f = sigmoid(slice(z, 1, hs, hs));
  Tensor g = tanh(slice(z, 1, 2 * hs, hs));
  Tensor o = sigmoid(slice(z, 1, 3 * hs, hs));
  Tensor c_next = add(mul(f, c), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

// ---- LSTM autoencoder ----

LstmAutoencoder::LstmAutoencoder(ParameterSet& params, const std::string& name, std::size_t hidden,
                                 bool with_decoder)
    : encoder_(params, name + ".encoder", 1, hidden) {
  if (hidden == 0) throw std::invalid_argument("LSTM autoencoder needs a positive hidden size");
  if (with_decoder) {
    decoder_ = LstmCell(params, name + ".decoder", hidden, hidden);
    readout_ = Dense(params, name + ".readout", hidden, 1);
  }
}

namespace {

void check_batch(const FiducialBatch& batch) {
  if (batch.features.empty()) throw std::invalid_argument("empty fiducial batch");
  if (batch.signal_length == 0) throw std::invalid_argument("fiducial signal_length must be positive");
  for (const auto& f : batch.features) {
    if (f.size() != batch.steps() || f.mask.size() != f.size()) {
      throw std::invalid_argument("fiducial batch rows must share one padded length");
    }
  }
}

Tensor step_input(const FiducialBatch& batch, std::size_t t) {
  Tensor x({batch.batch(), 1}, 0.0);
  auto v = x.mutable_values();
  const double n = static_cast<double>(batch.signal_length);
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    const auto& f = batch.features[b];
    if (f.mask[t]) v[b] = static_cast<double>(f.values[t]) / n;
  }
  return x;
}

std::vector<bool> step_mask(const FiducialBatch& batch, std::size_t t) {
  std::vector<bool> m(batch.batch());
  for (std::size_t b = 0; b < batch.batch(); ++b) m[b] = batch.features[b].mask[t] != 0;
  return m;
}

}  // namespace

Tensor LstmAutoencoder::encode(const FiducialBatch& batch) const {
  check_batch(batch);
  const std::size_t hs = hidden();
  Tensor h({batch.batch(), hs}, 0.0);
  Tensor c({batch.batch(), hs}, 0.0);
  for (std::size_t t = 0; t < batch.steps(); ++t) {
    auto take = step_mask(batch, t);
    bool any = false;
    for (bool b : take) any = any || b;
    if (!any) continue;
    auto [h_next, c_next] = encoder_.step(step_input(batch, t), h, c);
    h = row_select(take, h_next, h);
    c = row_select(take, c_next, c);
  }
  return h;
}

Tensor LstmAutoencoder::encode(const FiducialFeature& feature, std::size_t signal_length) const {
  FiducialBatch batch{{feature}, signal_length};
  return reshape(encode(batch), {hidden()});
}

Tensor LstmAutoencoder::reconstruction_loss(const FiducialBatch& batch, const Tensor& latent) const {
  if (!decoder_) throw std::logic_error("autoencoder was built without a decoder");
  check_batch(batch);
  const std::size_t hs = hidden(), bs = batch.batch(), steps = batch.steps();
  Tensor h({bs, hs}, 0.0);
  Tensor c({bs, hs}, 0.0);
  std::vector<Tensor> outputs;
  for (std::size_t t = 0; t < steps; ++t) {
    std::tie(h, c) = decoder_->step(latent, h, c);
    outputs.push_back(readout_->forward(h));
  }
  Tensor pred = concat(outputs, 1);  // [B x steps]
  Tensor target({bs, steps}, 0.0);
  Tensor weight({bs, steps}, 0.0);
  auto tv = target.mutable_values();
  auto wv = weight.mutable_values();
  double valid = 0.0;
  for (std::size_t b = 0; b < bs; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      const auto& f = batch.features[b];
      if (!f.mask[t]) continue;
      tv[b * steps + t] = static_cast<double>(f.values[t]) / static_cast<double>(batch.signal_length);
      wv[b * steps + t] = 1.0;
      valid += 1.0;
    }
  }
  if (valid == 0.0) return Tensor::scalar(0.0);
  return scale(sum(mul(square(sub(pred, target)), weight)), 1.0 / valid);
}

// ---- embedding ----

EmbeddingLayer::EmbeddingLayer(ParameterSet& params, const std::string& name,
                               std::size_t vocabulary, std::size_t dim)
    : table_(params.add(name + ".table", {vocabulary, dim}, Init::embedding)) {}

Tensor EmbeddingLayer::lookup(const std::vector<std::size_t>& indices) const {
  return gather_rows(table_, indices);
}

Tensor EmbeddingLayer::embed(std::size_t index) const {
  return reshape(lookup({index}), {table_.dim(1)});
}

// ---- attention ----

Tensor attention_weights(const Tensor& queries, const Tensor& keys, bool scaled) {
  if (queries.rank() != 3 || keys.rank() != 3 || queries.dim(2) != keys.dim(2)) {
    throw std::invalid_argument("attention expects [B x L x d] queries and keys, got " +
                                shape_str(queries.shape()) + " and " + shape_str(keys.shape()));
  }
  Tensor logits = batched_matmul(queries, transpose(keys));
  if (scaled) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(queries.dim(2))));
  return softmax(logits, 2);
}

std::size_t CrossAttentionConfig::parameter_count() const {
  const std::size_t modalities = (use_age ? 1 : 0) + (use_gender ? 1 : 0);
  const std::size_t proj = embed_dim * tokens * width + tokens * width;
  return modalities * 2 * proj + (token_width() * width + width) +
         (tokens * width * feature_width + feature_width);
}

CrossAttentionFusion::CrossAttentionFusion(ParameterSet& params, const std::string& name,
                                           const CrossAttentionConfig& config)
    : config_(config) {
  if (!config.use_age && !config.use_gender) {
    throw std::invalid_argument("cross-attention needs at least one of age or gender");
  }
  if (config.tokens == 0 || config.width == 0 || config.embed_dim == 0 ||
      config.feature_width == 0 || config.feature_width % config.tokens != 0) {
    throw std::invalid_argument("cross-attention: feature width " +
                                std::to_string(config.feature_width) +
                                " must be a positive multiple of the token count " +
                                std::to_string(config.tokens));
  }
  const std::size_t ld = config.tokens * config.width;
  if (config.use_age) {
    age_query_ = Dense(params, name + ".age_query", config.embed_dim, ld);
    age_key_ = Dense(params, name + ".age_key", config.embed_dim, ld);
  }
  if (config.use_gender) {
    gender_query_ = Dense(params, name + ".gender_query", config.embed_dim, ld);
    gender_key_ = Dense(params, name + ".gender_key", config.embed_dim, ld);
  }
  value_ = Dense(params, name + ".value", config.token_width(), config.width);
  align_ = Dense(params, name + ".align", ld, config.feature_width);
}

Tensor CrossAttentionFusion::tokens(const Dense& proj, const Tensor& embedding) const {
  return reshape(proj.forward(embedding), {embedding.dim(0), config_.tokens, config_.width});
}

Tensor CrossAttentionFusion::forward(const Tensor& ecg, const std::optional<Tensor>& age,
                                     const std::optional<Tensor>& gender, Trace* trace) const {
  const auto& cfg = config_;
  if (ecg.rank() != 2 || ecg.dim(1) != cfg.feature_width) {
    throw std::invalid_argument("cross-attention expects ECG features [B x " +
                                std::to_string(cfg.feature_width) + "], got " +
                                shape_str(ecg.shape()));
  }
  const std::size_t b = ecg.dim(0);
  if (cfg.use_age && !age) throw std::invalid_argument("cross-attention: missing age embedding");
  if (cfg.use_gender && !gender) {
    throw std::invalid_argument("cross-attention: missing gender embedding");
  }

  Tensor values = reshape(value_.forward(reshape(ecg, {b * cfg.tokens, cfg.token_width()})),
                          {b, cfg.tokens, cfg.width});

  Tensor mix;
  if (cfg.use_age && cfg.use_gender) {
    Tensor qa = tokens(*age_query_, *age), ka = tokens(*age_key_, *age);
    Tensor qg = tokens(*gender_query_, *gender), kg = tokens(*gender_key_, *gender);
    Tensor a2g = attention_weights(qa, kg, cfg.scaled);
    Tensor g2a = attention_weights(qg, ka, cfg.scaled);
    if (trace) {
      trace->age_to_gender = a2g;
      trace->gender_to_age = g2a;
    }
    mix = add(a2g, g2a);
  } else if (cfg.use_age) {
    mix = attention_weights(tokens(*age_query_, *age), tokens(*age_key_, *age), cfg.scaled);
    if (trace) trace->age_to_gender = mix;
  } else {
    mix = attention_weights(tokens(*gender_query_, *gender), tokens(*gender_key_, *gender),
                            cfg.scaled);
    if (trace) trace->gender_to_age = mix;
  }
  Tensor attended = batched_matmul(mix, values);
  if (trace) trace->attended = attended;
  Tensor aligned = align_.forward(reshape(attended, {b, cfg.tokens * cfg.width}));
  return concat({ecg, aligned}, 1);
}

}  // namespace effecg
