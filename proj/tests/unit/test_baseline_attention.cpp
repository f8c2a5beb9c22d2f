#include <gtest/gtest.h>

#include <random>

#include "fd.hpp"
#include "gka/baseline_attention.hpp"
#include "oracles.hpp"

using gka::MaskSpec;
using gka::MhaVariant;
using gka::Tensor;

class MhaOracle : public ::testing::TestWithParam<std::tuple<MhaVariant, MaskSpec>> {};

TEST_P(MhaOracle, ForwardMatchesLiteralAttention) {
    const auto [variant, mask] = GetParam();
    std::mt19937_64 rng(7);
    const auto p = oracle::random_mha(8, 2, rng, variant);
    const auto x = oracle::randn({2, 7, 8}, rng);
    gka::AttentionCapture<double> cap;
    const auto y = gka::mha_forward(x, p, mask, 0, &cap);
    EXPECT_LT(oracle::max_abs(y, oracle::mha_layer(x, p, mask.resolve(0))), 1e-12);
    const auto& w = cap.weights(0, 1, 1);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = i + 1; j < 7; ++j)
            if (mask.kind != gka::MaskKind::none) {
                EXPECT_EQ(w.at(i, j), 0.0);
            }
}

TEST_P(MhaOracle, BackwardMatchesFiniteDifferences) {
    const auto [variant, mask] = GetParam();
    std::mt19937_64 rng(8);
    auto p = oracle::random_mha(6, 2, rng, variant);
    auto x = oracle::randn({1, 5, 6}, rng);
    const auto probe = oracle::randn({1, 5, 6}, rng);
    const auto g = gka::mha_backward(x, p, mask, 0, probe);
    auto f = [&] { return fd::dot(gka::mha_forward(x, p, mask, 0), probe); };
    EXPECT_LT(fd::max_rel(g.x.values(), fd::gradient(x, f)), 1e-6);
    EXPECT_LT(fd::max_rel(g.w_q.values(), fd::gradient(p.w_q, f)), 1e-6);
    EXPECT_LT(fd::max_rel(g.w_k.values(), fd::gradient(p.w_k, f)), 1e-6);
    EXPECT_LT(fd::max_rel(g.w_o.values(), fd::gradient(p.w_o, f)), 1e-6);
    EXPECT_LT(fd::max_rel(g.b_q.values(), fd::gradient(p.b_q, f)), 1e-6);
    // a key bias shifts every score of a row equally: its gradient is zero
    for (double v : g.b_k.values()) EXPECT_LT(std::abs(v), 1e-12);
    if (variant == MhaVariant::standard) {
        EXPECT_LT(fd::max_rel(g.w_v.values(), fd::gradient(p.w_v, f)), 1e-6);
        EXPECT_LT(fd::max_rel(g.b_v.values(), fd::gradient(p.b_v, f)), 1e-6);
    } else {
        EXPECT_TRUE(g.w_v.empty());
    }
}

INSTANTIATE_TEST_SUITE_P(Variants, MhaOracle,
                         ::testing::Combine(::testing::Values(MhaVariant::standard, MhaVariant::vlt),
                                            ::testing::Values(MaskSpec::none(), MaskSpec::causal(),
                                                              MaskSpec::causal_window(2))));

TEST(Mha, VltHasNoValueProjection) {
    std::mt19937_64 rng(1);
    auto p = oracle::random_mha(4, 2, rng, MhaVariant::vlt);
    EXPECT_NO_THROW(p.validate());
    p.w_v = Tensor<double>({4, 4});
    EXPECT_THROW(p.validate(), std::invalid_argument);
}
