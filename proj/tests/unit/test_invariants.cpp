#include <gtest/gtest.h>

#include "invariants.hpp"

class Invariant : public ::testing::TestWithParam<int> {};

TEST_P(Invariant, HoldsOnRandomTrials) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto err = invariants::run_trial(GetParam(), 1000 + seed);
        EXPECT_FALSE(err.has_value()) << *err << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(All, Invariant, ::testing::Range(0, invariants::kKinds),
                         [](const auto& info) { return std::string(invariants::kind_name(info.param)); });
