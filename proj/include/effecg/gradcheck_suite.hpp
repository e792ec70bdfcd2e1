#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "effecg/gradcheck.hpp"
#include "effecg/rng.hpp"

namespace effecg {

/// One randomized check: each trial draws fresh shapes and values from the
/// generator it is handed.
struct GradCheckCase {
  std::string name;
  double tolerance = 1e-5;
  std::function<GradCheckResult(Rng&)> trial;
};

struct GradCheckRow {
  std::string name;
  double tolerance = 0.0;
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;

  bool pass() const;
  std::size_t trials() const;
};

/// Every layer and block at 1e-5, every loss at 1e-6.
std::vector<GradCheckCase> gradcheck_cases();

/// A deliberately wrong adjoint (the derivative of x^2 reported as x), for
/// checking that the harness notices.
GradCheckCase broken_adjoint_case();

/// Trial t of case c uses Rng(derive_seed(seed, c.name + "/" + t)).
GradCheckReport run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::uint64_t seed,
                                    std::size_t trials_per_case = 6);

/// Fixed-width table, one row per case.
std::string format_gradcheck_report(const GradCheckReport& report);

}  // namespace effecg
