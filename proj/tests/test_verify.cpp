#include <doctest.h>

#include <sstream>

#include "revflow/fault.h"
#include "revflow/verify.h"

using namespace revflow;

TEST_CASE("the oracle suite passes on the clean build") {
  const auto results = run_verify({});
  CHECK(results.size() > 50);
  for (const auto& r : results) {
    CAPTURE(r.group);
    CAPTURE(r.name);
    CHECK(r.pass);
  }
  CHECK(all_passed(results));
  std::ostringstream table;
  print_verify_table(table, results);
  CHECK(table.str().find("checks passed") != std::string::npos);
}

TEST_CASE("group filter") {
  VerifyOptions o;
  o.only = "haar";
  const auto results = run_verify(o);
  CHECK_FALSE(results.empty());
  for (const auto& r : results) CHECK(r.group == "haar");
  o.only = "nonsense";
  CHECK_THROWS_AS(run_verify(o), std::invalid_argument);
}

TEST_CASE("each injected gradient fault is caught") {
  const std::pair<fault::Site, const char*> cases[] = {
      {fault::Site::ActNormBiasGradSign, "actnorm"},
      {fault::Site::CouplingShiftGradSign, "affine"},
      {fault::Site::Inv1x1WeightGradSign, "inv1x1"},
  };
  for (const auto& [site, group] : cases) {
    CAPTURE(group);
    fault::ScopedFault f(site);
    VerifyOptions o;
    o.only = group;
    CHECK_FALSE(all_passed(run_verify(o)));
    o.only = "model";
    CHECK_FALSE(all_passed(run_verify(o)));
  }
  CHECK(all_passed(run_verify({"actnorm", 0})));
}
