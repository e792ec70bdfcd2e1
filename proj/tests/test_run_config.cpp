#include "doctest.h"
#include "effecg/run_config.hpp"

using namespace effecg;

TEST_CASE("run config JSON round trip") {
  RunConfig rc;
  rc.model.fc_hidden = 24;
  rc.train.epochs = 7;
  rc.split.stratify = false;
  rc.preprocess.rpeak.refractory_ms = 250.0;
  rc.preprocess.bandpass = false;
  rc.data.balanced_test_per_class = 5;
  rc.seed = 42;
  const auto j = to_json(rc);
  const auto back = run_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.seed == std::optional<std::uint64_t>(42));

  RunConfig unseeded;
  CHECK(run_config_from_json(to_json(unseeded)).seed == std::nullopt);
}

TEST_CASE("run config rejects unknown keys and keeps defaults") {
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"trian": {}})")), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"preprocess": {"rpeak": {"x": 1}}})")),
                  std::invalid_argument);
  const auto rc = run_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": 3}})"));
  CHECK(rc.train.epochs == 3);
  CHECK(rc.train.batch_size == TrainConfig{}.batch_size);
  CHECK(rc.preprocess.taps == 201);
}

TEST_CASE("a run seed fans out to independent streams") {
  RunConfig a;
  a.seed = 3;
  a.apply_seed();
  CHECK(a.model.seed != a.train.seed);
  CHECK(a.train.seed != a.split.seed);
  RunConfig b;
  b.seed = 3;
  b.apply_seed();
  CHECK(b.model.seed == a.model.seed);
  RunConfig none;
  const auto before = none.model.seed;
  none.apply_seed();
  CHECK(none.model.seed == before);
}
