#include "doctest.h"
#include "mrt/gradcheck_suite.hpp"

TEST_CASE("gradcheck suite covers every layer, loss and the composite") {
  const auto entries = mrt::gradcheck_suite(7);
  CHECK(entries.size() == 13);
  for (const auto& e : entries) {
    INFO(e.name);
    CHECK(e.max_rel_error <= mrt::kGradcheckTolerance);
  }
}

TEST_CASE("gradcheck suite is deterministic per seed") {
  const auto a = mrt::gradcheck_suite(3, 1);
  const auto b = mrt::gradcheck_suite(3, 1);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].max_rel_error == b[i].max_rel_error);
  }
}
