#include "doctest.h"
#include "effecg/gradcheck_suite.hpp"

using namespace effecg;

TEST_CASE("gradient check suite") {
  const auto cases = gradcheck_cases();
  const auto report = run_gradcheck_suite(cases, 1, 2);
  CHECK(report.rows.size() == cases.size());
  for (const auto& row : report.rows) {
    INFO(row.name << " " << row.max_rel_error);
    CHECK(row.pass);
    CHECK(row.coordinates > 0);
  }
  CHECK(report.pass());
  CHECK(format_gradcheck_report(report) == format_gradcheck_report(run_gradcheck_suite(cases, 1, 2)));
}

TEST_CASE("a wrong adjoint fails its row") {
  auto cases = gradcheck_cases();
  cases.resize(2);
  cases.push_back(broken_adjoint_case());
  const auto report = run_gradcheck_suite(cases, 5, 2);
  CHECK(report.rows[0].pass);
  CHECK_FALSE(report.rows[2].pass);
  CHECK_FALSE(report.pass());
  CHECK(format_gradcheck_report(report).find("broken_square") != std::string::npos);
}
