#include "effecg/model.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <set>
#include <stdexcept>

#include "effecg/errors.hpp"
#include "json_util.hpp"

namespace effecg {

using nlohmann::json;
using detail::check_keys;
using detail::read;

std::vector<StageConfig> default_stages() {
  return {
      {1, 16, 3, 1, 1, 0.25},  {6, 24, 3, 2, 2, 0.25},  {6, 40, 9, 2, 2, 0.25},
      {6, 80, 3, 2, 3, 0.25},  {6, 112, 9, 1, 3, 0.25}, {6, 192, 9, 2, 4, 0.25},
      {6, 320, 3, 1, 1, 0.25},
  };
}

namespace {

std::size_t lstm_count(std::size_t in, std::size_t h) { return in * 4 * h + h * 4 * h + 4 * h; }

// Expand the stage table into per-block configurations.
std::vector<MbConvConfig> block_configs(const ModelConfig& c) {
  std::vector<MbConvConfig> out;
  std::size_t in = c.stem_channels;
  for (const auto& s : c.stages) {
    for (std::size_t r = 0; r < s.repeats; ++r) {
      out.push_back({in, s.out_channels, s.expansion, s.kernel, r == 0 ? s.stride : 1, s.se_ratio});
      in = s.out_channels;
    }
  }
  return out;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (leads == 0) fail("leads must be positive");
  if (input_length == 0) fail("input_length must be positive");
  if (class_count < 2 && head == Head::softmax) fail("softmax head needs at least 2 classes");
  if (class_count == 0) fail("class_count must be positive");
  if (stem_channels == 0 || stem_kernel == 0 || stem_stride == 0) fail("stem sizes must be positive");
  if (fc_hidden == 0) fail("fc_hidden must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must be in [0, 1)");
  if (ae_reconstruction && ae_hidden == 0) fail("ae_reconstruction needs ae_hidden > 0");

  std::size_t length = input_length;
  if (length < stem_stride) fail("stem stride " + std::to_string(stem_stride) + " exceeds input length");
  length = ceil_div(length, stem_stride);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stage " + std::to_string(i) + ": ";
    if (s.expansion == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.repeats == 0) {
      fail(where + "sizes must be positive");
    }
    if (s.se_ratio < 0.0 || s.se_ratio > 1.0) fail(where + "se_ratio must be in [0, 1]");
    if (length / s.stride < 1) {
      fail(where + "stride " + std::to_string(s.stride) + " reduces length " +
           std::to_string(length) + " below 1");
    }
    length = ceil_div(length, s.stride);
  }
  if (fusion.enabled) {
    if (!fusion.use_age && !fusion.use_gender) fail("fusion needs at least one of age or gender");
    if (fusion.embed_dim == 0) fail("fusion.embed_dim must be positive");
    if (fusion.use_age && fusion.age_bins == 0) fail("fusion.age_bins must be positive");
    if (fusion.use_cross_attention) {
      if (fusion.tokens == 0 || fusion.attention_width == 0) fail("attention sizes must be positive");
      if (feature_width() % fusion.tokens != 0) {
        fail("feature width " + std::to_string(feature_width()) + " is not divisible by " +
             std::to_string(fusion.tokens) + " attention tokens");
      }
    }
  }
}

std::size_t ModelConfig::feature_width() const {
  return stages.empty() ? stem_channels : stages.back().out_channels;
}

std::size_t ModelConfig::output_length() const {
  std::size_t length = ceil_div(input_length, stem_stride);
  for (const auto& s : stages) length = ceil_div(length, s.stride);
  return length;
}

std::size_t ModelConfig::head_input_width() const {
  std::size_t w = feature_width() + 2 * ae_hidden;
  if (fusion.enabled) {
    if (fusion.use_cross_attention) {
      w += feature_width();
    } else {
      w += fusion.embed_dim * ((fusion.use_age ? 1 : 0) + (fusion.use_gender ? 1 : 0));
    }
  }
  return w;
}

std::size_t ModelConfig::fusion_parameter_count() const {
  if (!fusion.enabled) return 0;
  std::size_t n = 0;
  if (fusion.use_age) n += fusion.age_bins * fusion.embed_dim;
  if (fusion.use_gender) n += 2 * fusion.embed_dim;
  if (fusion.use_cross_attention) {
    CrossAttentionConfig ca{feature_width(), fusion.tokens, fusion.embed_dim, fusion.attention_width,
                            fusion.use_age, fusion.use_gender, fusion.scaled_attention};
    n += ca.parameter_count();
  }
  return n;
}

std::size_t ModelConfig::analytic_parameter_count() const {
  std::size_t n = stem_channels * leads * stem_kernel + 2 * stem_channels;
  for (const auto& b : block_configs(*this)) n += b.parameter_count();
  if (ae_hidden > 0) {
    std::size_t ae = lstm_count(1, ae_hidden);
    if (ae_reconstruction) ae += lstm_count(ae_hidden, ae_hidden) + ae_hidden + 1;
    n += 2 * ae;
  }
  n += fusion_parameter_count();
  n += head_input_width() * fc_hidden + fc_hidden;
  n += fc_hidden * class_count + class_count;
  return n;
}

// ---- JSON ----

json to_json(const ModelConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"expansion", s.expansion},
                      {"out_channels", s.out_channels},
                      {"kernel", s.kernel},
                      {"stride", s.stride},
                      {"repeats", s.repeats},
                      {"se_ratio", s.se_ratio}});
  }
  const auto& f = c.fusion;
  return {
      {"leads", c.leads},
      {"input_length", c.input_length},
      {"class_count", c.class_count},
      {"head", c.head == Head::softmax ? "softmax" : "sigmoid"},
      {"stem_channels", c.stem_channels},
      {"stem_kernel", c.stem_kernel},
      {"stem_stride", c.stem_stride},
      {"stages", stages},
      {"fc_hidden", c.fc_hidden},
      {"dropout_rate", c.dropout_rate},
      {"ae_hidden", c.ae_hidden},
      {"ae_reconstruction", c.ae_reconstruction},
      {"fusion",
       {{"enabled", f.enabled},
        {"embed_dim", f.embed_dim},
        {"age_bins", f.age_bins},
        {"use_age", f.use_age},
        {"use_gender", f.use_gender},
        {"use_cross_attention", f.use_cross_attention},
        {"tokens", f.tokens},
        {"attention_width", f.attention_width},
        {"scaled_attention", f.scaled_attention}}},
      {"seed", c.seed},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  check_keys(j,
             {"leads", "input_length", "class_count", "head", "stem_channels", "stem_kernel",
              "stem_stride", "stages", "fc_hidden", "dropout_rate", "ae_hidden",
              "ae_reconstruction", "fusion", "seed"},
             "model config");
  read(j, "leads", c.leads);
  read(j, "input_length", c.input_length);
  read(j, "class_count", c.class_count);
  if (j.contains("head")) {
    const auto h = j.at("head").get<std::string>();
    if (h == "softmax") {
      c.head = Head::softmax;
    } else if (h == "sigmoid") {
      c.head = Head::sigmoid;
    } else {
      throw std::invalid_argument("head must be softmax or sigmoid, got " + h);
    }
  }
  read(j, "stem_channels", c.stem_channels);
  read(j, "stem_kernel", c.stem_kernel);
  read(j, "stem_stride", c.stem_stride);
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      check_keys(s, {"expansion", "out_channels", "kernel", "stride", "repeats", "se_ratio"}, "stage");
      StageConfig st;
      read(s, "expansion", st.expansion);
      read(s, "out_channels", st.out_channels);
      read(s, "kernel", st.kernel);
      read(s, "stride", st.stride);
      read(s, "repeats", st.repeats);
      read(s, "se_ratio", st.se_ratio);
      c.stages.push_back(st);
    }
  }
  read(j, "fc_hidden", c.fc_hidden);
  read(j, "dropout_rate", c.dropout_rate);
  read(j, "ae_hidden", c.ae_hidden);
  read(j, "ae_reconstruction", c.ae_reconstruction);
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    check_keys(f,
               {"enabled", "embed_dim", "age_bins", "use_age", "use_gender", "use_cross_attention",
                "tokens", "attention_width", "scaled_attention"},
               "fusion");
    read(f, "enabled", c.fusion.enabled);
    read(f, "embed_dim", c.fusion.embed_dim);
    read(f, "age_bins", c.fusion.age_bins);
    read(f, "use_age", c.fusion.use_age);
    read(f, "use_gender", c.fusion.use_gender);
    read(f, "use_cross_attention", c.fusion.use_cross_attention);
    read(f, "tokens", c.fusion.tokens);
    read(f, "attention_width", c.fusion.attention_width);
    read(f, "scaled_attention", c.fusion.scaled_attention);
  }
  read(j, "seed", c.seed);
  return c;
}

std::size_t age_bin(int age, std::size_t bins) {
  if (age < 0) throw std::invalid_argument("age must be non-negative, got " + std::to_string(age));
  if (bins == 0) throw std::invalid_argument("age bin count must be positive");
  return std::min(static_cast<std::size_t>(age / 10), bins - 1);
}

// ---- model ----

Model::Model(ModelConfig config)
    : config_(std::move(config)), params_(config_.seed), dropout_rng_(derive_seed(config_.seed, "dropout")) {
  config_.validate();
  const auto& c = config_;
  stem_ = params_.add("stem.conv", {c.stem_channels, c.leads, c.stem_kernel}, Init::he_uniform,
                      c.leads * c.stem_kernel);
  stem_bn_ = BatchNorm(params_, "stem.bn", c.stem_channels);
  const auto blocks = block_configs(c);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks_.emplace_back(params_, "blocks." + std::to_string(i), blocks[i]);
  }
  if (c.ae_hidden > 0) {
    r_encoder_ = LstmAutoencoder(params_, "fiducial.r", c.ae_hidden, c.ae_reconstruction);
    p_encoder_ = LstmAutoencoder(params_, "fiducial.p", c.ae_hidden, c.ae_reconstruction);
  }
  if (c.fusion.enabled) {
    const auto& f = c.fusion;
    if (f.use_age) age_embedding_ = EmbeddingLayer(params_, "fusion.age", f.age_bins, f.embed_dim);
    if (f.use_gender) gender_embedding_ = EmbeddingLayer(params_, "fusion.gender", 2, f.embed_dim);
    if (f.use_cross_attention) {
      fusion_ = CrossAttentionFusion(
          params_, "fusion.attention",
          {c.feature_width(), f.tokens, f.embed_dim, f.attention_width, f.use_age, f.use_gender,
           f.scaled_attention});
    }
  }
  fc1_ = Dense(params_, "head.fc1", c.head_input_width(), c.fc_hidden, true);
  fc2_ = Dense(params_, "head.fc2", c.fc_hidden, c.class_count, true);
}

ModelOutput Model::forward(const ModelInput& input, Mode mode) {
  const auto& c = config_;
  const Tensor& x = input.signals;
  if (!x.defined() || x.rank() != 3 || x.dim(1) != c.leads || x.dim(2) != c.input_length) {
    throw std::invalid_argument("model expects signals [B x " + std::to_string(c.leads) + " x " +
                                std::to_string(c.input_length) + "], got " +
                                (x.defined() ? shape_str(x.shape()) : std::string("nothing")));
  }
  const std::size_t b = x.dim(0);

  Tensor h = swish(stem_bn_.forward(conv1d(x, stem_, c.stem_stride, Padding::same), mode));
  for (auto& block : blocks_) h = block.forward(h, mode);
  Tensor pooled = global_avg_pool(h);

  std::vector<Tensor> parts;
  std::optional<Tensor> age_emb, gender_emb;
  if (c.fusion.enabled) {
    if (c.fusion.use_age) {
      if (input.ages.size() != b) throw std::invalid_argument("missing field 'age' for the batch");
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < b; ++i) {
        if (!input.ages[i]) {
          throw std::invalid_argument("missing field 'age' for batch row " + std::to_string(i));
        }
        idx.push_back(age_bin(*input.ages[i], c.fusion.age_bins));
      }
      age_emb = age_embedding_->lookup(idx);
    }
    if (c.fusion.use_gender) {
      if (input.genders.size() != b) {
        throw std::invalid_argument("missing field 'gender' for the batch");
      }
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < b; ++i) {
        if (!input.genders[i]) {
          throw std::invalid_argument("missing field 'gender' for batch row " + std::to_string(i));
        }
        idx.push_back(static_cast<std::size_t>(*input.genders[i]));
      }
      gender_emb = gender_embedding_->lookup(idx);
    }
  }
  if (fusion_) {
    parts.push_back(fusion_->forward(pooled, age_emb, gender_emb));
  } else {
    parts.push_back(pooled);
    if (age_emb) parts.push_back(*age_emb);
    if (gender_emb) parts.push_back(*gender_emb);
  }

  ModelOutput out;
  if (r_encoder_) {
    for (const auto* fb : {&input.r_peaks, &input.p_waves}) {
      if (fb->batch() != b) {
        throw std::invalid_argument("fiducial batch has " + std::to_string(fb->batch()) +
                                    " rows, signals have " + std::to_string(b));
      }
    }
    Tensor r = r_encoder_->encode(input.r_peaks);
    Tensor p = p_encoder_->encode(input.p_waves);
    parts.push_back(r);
    parts.push_back(p);
    if (c.ae_reconstruction) {
      out.reconstruction_loss = add(r_encoder_->reconstruction_loss(input.r_peaks, r),
                                    p_encoder_->reconstruction_loss(input.p_waves, p));
    }
  }

  Tensor features = parts.size() == 1 ? parts.front() : concat(parts, 1);
  Tensor hidden = dropout(relu(fc1_.forward(features)), c.dropout_rate, mode, dropout_rng_);
  out.logits = fc2_.forward(hidden);
  out.scores = c.head == Head::softmax ? softmax(out.logits, 1) : sigmoid(out.logits);
  return out;
}

void Model::load_state(const ParameterSet& other, bool allow_unused) {
  for (const auto& e : params_.entries()) {
    const NamedTensor* src = other.find(e.name);
    if (!src) throw std::invalid_argument("state is missing tensor " + e.name);
    if (src->tensor.shape() != e.tensor.shape()) {
      throw std::invalid_argument("shape mismatch for " + e.name + ": " +
                                  shape_str(src->tensor.shape()) + " vs " +
                                  shape_str(e.tensor.shape()));
    }
  }
  if (!allow_unused) {
    for (const auto& e : other.entries()) {
      if (!params_.find(e.name)) throw std::invalid_argument("state has unused tensor " + e.name);
    }
  }
  for (const auto& e : params_.entries()) {
    auto src = other.find(e.name)->tensor.values();
    Tensor dst = e.tensor;
    std::copy(src.begin(), src.end(), dst.mutable_values().begin());
  }
}

std::vector<std::size_t> predict(std::span<const double> scores, Head head,
                                 std::span<const double> thresholds) {
  if (scores.empty()) throw std::invalid_argument("predict: empty score vector");
  if (head == Head::softmax) {
    return {static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin())};
  }
  if (thresholds.size() != scores.size()) {
    throw std::invalid_argument("predict: " + std::to_string(thresholds.size()) +
                                " thresholds for " + std::to_string(scores.size()) + " classes");
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (scores[k] >= thresholds[k]) out.push_back(k);
  }
  return out;
}

// ---- checkpoint ----

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  json tensors = json::array();
  std::string payload;
  for (const auto& e : model.parameters().entries()) {
    const std::size_t offset = payload.size();
    for (double v : e.tensor.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int byte = 0; byte < 4; ++byte) payload.push_back(static_cast<char>((bits >> (8 * byte)) & 0xff));
    }
    tensors.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"offset", offset},
                       {"len", payload.size() - offset}});
  }
  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"config", to_json(model.config())},
                   {"payload_bytes", payload.size()},
                   {"tensors", tensors}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << manifest.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw FormatError("checkpoint has no manifest line");
  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  for (const char* key : {"format_version", "config", "payload_bytes", "tensors"}) {
    if (!manifest.contains(key)) throw FormatError(std::string("checkpoint manifest lacks ") + key);
  }
  const int version = manifest.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format_version " + std::to_string(version));
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto expected = manifest.at("payload_bytes").get<std::size_t>();
  if (payload.size() != expected) {
    throw FormatError("checkpoint payload length mismatch: expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(payload.size()));
  }

  ModelConfig config;
  try {
    config = model_config_from_json(manifest.at("config"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  Model model(config);
  std::set<std::string> seen;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto len = t.at("len").get<std::size_t>();
    if (len != 4 * shape_numel(shape) || offset + len > payload.size()) {
      throw FormatError("tensor " + name + " does not fit its payload slice");
    }
    const NamedTensor* target = model.parameters().find(name);
    if (!target) throw FormatError("checkpoint tensor " + name + " is not part of the model");
    if (target->tensor.shape() != shape) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                        ", model expects " + shape_str(target->tensor.shape()));
    }
    seen.insert(name);
    Tensor dst = target->tensor;
    auto v = dst.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::uint32_t bits = 0;
      for (int byte = 0; byte < 4; ++byte) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[offset + 4 * i + byte]))
                << (8 * byte);
      }
      v[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  for (const auto& e : model.parameters().entries()) {
    if (!seen.count(e.name)) throw FormatError("checkpoint lacks tensor " + e.name);
  }
  return model;
}

}  // namespace effecg
