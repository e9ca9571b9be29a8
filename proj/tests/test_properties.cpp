#include <gtest/gtest.h>

#include "support/properties.hpp"

namespace pg = persona_guard;
namespace checks = persona_guard::checks;

TEST(Properties, LmGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2}) {
    const auto r = checks::lm_gradient_check(seed);
    EXPECT_TRUE(r.ok) << r.detail;
  }
}

TEST(Properties, DefendedGradientMatchesFiniteDifferences) {
  const auto r = checks::defended_gradient_check(3);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Properties, SimplifiedKlGradientMatchesFiniteDifferences) {
  const auto r = checks::defended_gradient_check(4, pg::KlVariant::simplified);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Properties, KlUniformValues) {
  const auto r = checks::kl_values();
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Properties, MiLossesCancelExactly) {
  const auto r = checks::mi_sum_zero(5);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Properties, MetricsMatchBruteForceOracles) {
  for (std::uint64_t seed : {6, 7, 8}) {
    const auto r = checks::metric_oracles(seed);
    EXPECT_TRUE(r.ok) << r.detail;
  }
}

TEST(Properties, AttackLeavesChatbotUntouched) {
  const auto r = checks::blackbox_checksum(9);
  EXPECT_TRUE(r.ok) << r.detail;
}
