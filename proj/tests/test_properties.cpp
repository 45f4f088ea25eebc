#include <gtest/gtest.h>

#include "relcbm/properties.hpp"

using namespace relcbm;

TEST(Properties, GroundingCounts) {
  auto r = props::grounding_counts();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Properties, AggregationInvariance) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto r = props::aggregation(seed);
    EXPECT_TRUE(r.passed) << r.detail;
  }
}

TEST(Properties, DcrBooleanSemantics) {
  auto r = props::dcr_boolean();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Properties, AutodiffFiniteDifferences) {
  for (std::uint64_t seed : {3, 4}) {
    auto r = props::autodiff(seed);
    EXPECT_TRUE(r.passed) << r.detail;
  }
}

TEST(Properties, OracleSelfConsistency) {
  auto r = props::oracle_consistency();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Properties, WidthZeroSubsumption) {
  for (std::uint64_t seed : {2, 7}) {
    auto r = props::subsumption(seed);
    EXPECT_TRUE(r.passed) << r.detail;
  }
}
