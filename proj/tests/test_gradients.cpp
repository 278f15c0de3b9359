#include <gtest/gtest.h>

#include "support/grad_cases.hpp"

using namespace m3p::testing;

class Gradients : public ::testing::TestWithParam<std::size_t> {};

// The acceptance binary sweeps 100 seeds; unit runs keep 10 per case.
TEST_P(Gradients, CentralDifferencesAgreeInDoublePrecision) {
  const auto cases = grad_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = c.run(seed);
    EXPECT_LT(r.rel_error, 1e-4) << c.name << " seed " << seed;
    EXPECT_GT(r.coordinates, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, Gradients, ::testing::Range<std::size_t>(0, grad_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) { return grad_cases()[info.param].name; });
