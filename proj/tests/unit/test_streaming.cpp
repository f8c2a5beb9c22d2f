#include <gtest/gtest.h>

#include <ostream>
#include <random>
#include <string>

#include "gka/kernel_attention.hpp"
#include "gka/ops.hpp"
#include "gka/parallel.hpp"
#include "gka/streaming.hpp"
#include "oracles.hpp"

using gka::MaskKind;
using gka::MaskSpec;
using gka::Tensor;
using gka::TileConfig;

struct StreamCase {
    MaskSpec mask;
    std::size_t rows, cols, n;
    bool features;
};

void PrintTo(const StreamCase& c, std::ostream* os) {
    *os << c.rows << "x" << c.cols << " n=" << c.n;
}

class StreamingEquivalence : public ::testing::TestWithParam<StreamCase> {};

TEST_P(StreamingEquivalence, MatchesDensePath) {
    const StreamCase c = GetParam();
    std::mt19937_64 rng(c.rows * 1000 + c.cols + c.n);
    auto p = oracle::random_gka<double>(16, 2, rng);
    if (c.features) p.features = {true, true, 10000.0};
    const auto x = oracle::randn({2, c.n, 16}, rng);
    const auto dense = gka::gka_forward(x, p, c.mask, 0);
    const auto tiled = gka::gka_forward_streaming(x, p, c.mask, 0, TileConfig{c.rows, c.cols});
    EXPECT_LT(gka::norm_rel_diff(tiled, dense), 1e-10);
    EXPECT_LT(gka::max_rel_diff(tiled, dense, 1e-6), 1e-10);

    gka::GkaLayerParams<float> pf;
    pf.log_sigma = p.log_sigma.cast<float>();
    pf.w_o = p.w_o.cast<float>();
    pf.b_o = p.b_o.cast<float>();
    pf.features = p.features;
    const auto xf = x.cast<float>();
    EXPECT_LT(gka::norm_rel_diff(gka::gka_forward_streaming(xf, pf, c.mask, 0, TileConfig{c.rows, c.cols}),
                                 gka::gka_forward(xf, pf, c.mask, 0)),
              1e-5);
}

INSTANTIATE_TEST_SUITE_P(
    Tiles, StreamingEquivalence,
    ::testing::Values(StreamCase{MaskSpec::none(), 16, 16, 50, false}, StreamCase{MaskSpec::none(), 33, 33, 100, false},
                      StreamCase{MaskSpec::none(), 128, 128, 70, false},
                      StreamCase{MaskSpec::causal(), 16, 33, 90, false},
                      StreamCase{MaskSpec::causal(), 33, 16, 90, true},
                      StreamCase{MaskSpec::causal_window(5), 16, 16, 64, false},
                      StreamCase{MaskSpec::causal_window(40), 33, 16, 121, true},
                      StreamCase{MaskSpec::causal_window(1), 128, 33, 40, false},
                      StreamCase{MaskSpec::none(), 1, 1, 9, false}),
    [](const ::testing::TestParamInfo<StreamCase>& info) {
        const StreamCase& c = info.param;
        const char* kind = c.mask.kind == MaskKind::none ? "none" : c.mask.kind == MaskKind::causal ? "causal" : "window";
        return std::string(kind) + "_" + std::to_string(c.rows) + "x" + std::to_string(c.cols) + "_n" +
               std::to_string(c.n) + (c.features ? "_rope" : "");
    });

TEST(Streaming, WorkspaceDoesNotGrowWithSequenceLength) {
    std::mt19937_64 rng(4);
    const auto p = oracle::random_gka<double>(32, 2, rng);
    const TileConfig tiles{32, 32};
    for (const MaskSpec& mask : {MaskSpec::none(), MaskSpec::causal(), MaskSpec::causal_window(64)}) {
        gka::WorkspaceStats s256, s512;
        gka::gka_forward_streaming(oracle::randn({1, 256, 32}, rng), p, mask, 0, tiles, &s256);
        gka::gka_forward_streaming(oracle::randn({1, 512, 32}, rng), p, mask, 0, tiles, &s512);
        EXPECT_EQ(s256.peak_elements, s512.peak_elements);
        EXPECT_LE(s512.peak_elements, gka::streaming_workspace_bound(tiles, 16));
        EXPECT_LT(s512.peak_elements, gka::naive_workspace_elements(512, 16));
    }
}

TEST(Streaming, WindowVisitsOnlyNearbyKeyTiles) {
    std::mt19937_64 rng(5);
    const auto p = oracle::random_gka<double>(8, 1, rng);
    const auto x = oracle::randn({1, 300, 8}, rng);
    for (std::size_t w : {1u, 10u, 37u, 64u}) {
        for (std::size_t tc : {16u, 33u}) {
            gka::WorkspaceStats s;
            gka::gka_forward_streaming(x, p, MaskSpec::causal_window(w), 0, TileConfig{16, tc}, &s);
            // a query tile of 16 rows spans keys [q0 - w + 1, q0 + 15]
            const std::size_t span = w + 15;
            EXPECT_LE(s.max_key_tiles_per_query_tile, (span + tc - 1) / tc + 1) << "w=" << w << " tc=" << tc;
        }
    }
    gka::WorkspaceStats causal, full;
    gka::gka_forward_streaming(x, p, MaskSpec::causal(), 0, TileConfig{20, 20}, &causal);
    gka::gka_forward_streaming(x, p, MaskSpec::none(), 0, TileConfig{20, 20}, &full);
    EXPECT_EQ(full.key_tiles_visited, 15u * 15u);
    EXPECT_EQ(causal.key_tiles_visited, 15u * 16u / 2u);
}

TEST(Streaming, ThreadCountDoesNotChangeResults) {
    std::mt19937_64 rng(6);
    const auto p = oracle::random_gka<double>(8, 2, rng);
    const auto x = oracle::randn({3, 77, 8}, rng);
    const std::size_t saved = gka::max_threads();
    gka::set_max_threads(1);
    const auto one = gka::gka_forward_streaming(x, p, MaskSpec::causal(), 0, TileConfig{16, 16});
    gka::set_max_threads(4);
    const auto four = gka::gka_forward_streaming(x, p, MaskSpec::causal(), 0, TileConfig{16, 16});
    gka::set_max_threads(saved);
    EXPECT_EQ(one, four);
}

TEST(Streaming, RejectsEmptyTiles) {
    std::mt19937_64 rng(6);
    const auto p = oracle::random_gka<double>(8, 2, rng);
    EXPECT_THROW(gka::gka_forward_streaming(oracle::randn({1, 4, 8}, rng), p, MaskSpec::none(), 0, TileConfig{0, 8}),
                 gka::ParameterError);
}
