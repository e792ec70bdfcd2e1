#include "effecg/run_config.hpp"

#include "effecg/rng.hpp"
#include "json_util.hpp"

namespace effecg {

using detail::check_keys;
using detail::read;
using nlohmann::json;

void RunConfig::apply_seed() {
  if (!seed) return;
  model.seed = derive_seed(*seed, "model");
  train.seed = derive_seed(*seed, "train");
  split.seed = derive_seed(*seed, "split");
}

json to_json(const PreprocessConfig& c) {
  const auto& r = c.rpeak;
  const auto& p = c.pwave;
  return {
      {"low_hz", c.low_hz},
      {"high_hz", c.high_hz},
      {"taps", c.taps},
      {"bandpass", c.bandpass},
      {"standardize", c.standardize},
      {"reference_lead", c.reference_lead},
      {"rpeak",
       {{"integration_ms", r.integration_ms},
        {"refractory_ms", r.refractory_ms},
        {"adaptation", r.adaptation},
        {"threshold_fraction", r.threshold_fraction},
        {"searchback_factor", r.searchback_factor},
        {"searchback_rr_multiple", r.searchback_rr_multiple},
        {"refine_ms", r.refine_ms},
        {"learning_s", r.learning_s},
        {"min_duration_s", r.min_duration_s}}},
      {"pwave",
       {{"window_start_ms", p.window_start_ms},
        {"window_end_ms", p.window_end_ms},
        {"amplitude_gate", p.amplitude_gate}}},
  };
}

PreprocessConfig preprocess_config_from_json(const json& j) {
  PreprocessConfig c;
  check_keys(j, {"low_hz", "high_hz", "taps", "bandpass", "standardize", "reference_lead", "rpeak", "pwave"},
             "preprocess");
  read(j, "low_hz", c.low_hz);
  read(j, "high_hz", c.high_hz);
  read(j, "taps", c.taps);
  read(j, "bandpass", c.bandpass);
  read(j, "standardize", c.standardize);
  read(j, "reference_lead", c.reference_lead);
  if (j.contains("rpeak")) {
    const auto& r = j.at("rpeak");
    check_keys(r,
               {"integration_ms", "refractory_ms", "adaptation", "threshold_fraction", "searchback_factor",
                "searchback_rr_multiple", "refine_ms", "learning_s", "min_duration_s"},
               "rpeak");
    read(r, "integration_ms", c.rpeak.integration_ms);
    read(r, "refractory_ms", c.rpeak.refractory_ms);
    read(r, "adaptation", c.rpeak.adaptation);
    read(r, "threshold_fraction", c.rpeak.threshold_fraction);
    read(r, "searchback_factor", c.rpeak.searchback_factor);
    read(r, "searchback_rr_multiple", c.rpeak.searchback_rr_multiple);
    read(r, "refine_ms", c.rpeak.refine_ms);
    read(r, "learning_s", c.rpeak.learning_s);
    read(r, "min_duration_s", c.rpeak.min_duration_s);
  }
  if (j.contains("pwave")) {
    const auto& p = j.at("pwave");
    check_keys(p, {"window_start_ms", "window_end_ms", "amplitude_gate"}, "pwave");
    read(p, "window_start_ms", c.pwave.window_start_ms);
    read(p, "window_end_ms", c.pwave.window_end_ms);
    read(p, "amplitude_gate", c.pwave.amplitude_gate);
  }
  return c;
}

json to_json(const RunConfig& c) {
  json j = {
      {"model", to_json(c.model)},
      {"train", to_json(c.train)},
      {"split",
       {{"train", c.split.train},
        {"val", c.split.val},
        {"test", c.split.test},
        {"seed", c.split.seed},
        {"stratify", c.split.stratify}}},
      {"preprocess", to_json(c.preprocess)},
      {"data",
       {{"beat_sample_rate", c.data.beat_sample_rate},
        {"class_count", c.data.class_count},
        {"drop_abnormal", c.data.drop_abnormal},
        {"balanced_test_per_class", c.data.balanced_test_per_class}}},
  };
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  check_keys(j, {"model", "train", "split", "preprocess", "data", "seed"}, "run config");
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    check_keys(s, {"train", "val", "test", "seed", "stratify"}, "split");
    read(s, "train", c.split.train);
    read(s, "val", c.split.val);
    read(s, "test", c.split.test);
    read(s, "seed", c.split.seed);
    read(s, "stratify", c.split.stratify);
  }
  if (j.contains("preprocess")) c.preprocess = preprocess_config_from_json(j.at("preprocess"));
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"beat_sample_rate", "class_count", "drop_abnormal", "balanced_test_per_class"}, "data");
    read(d, "beat_sample_rate", c.data.beat_sample_rate);
    read(d, "class_count", c.data.class_count);
    read(d, "drop_abnormal", c.data.drop_abnormal);
    read(d, "balanced_test_per_class", c.data.balanced_test_per_class);
  }
  if (j.contains("seed") && !j.at("seed").is_null()) {
    std::uint64_t s = 0;
    read(j, "seed", s);
    c.seed = s;
  }
  return c;
}

}  // namespace effecg
