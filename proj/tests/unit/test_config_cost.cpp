#include <gtest/gtest.h>

#include <cmath>

#include "gka/config.hpp"
#include "gka/cost.hpp"
#include "gka/model.hpp"

using gka::AttentionKind;
using gka::ModelConfig;

namespace {

// Parameters of a ViT written out term by term.
std::uint64_t vit_params(std::uint64_t d, std::uint64_t heads, AttentionKind kind) {
    const std::uint64_t depth = 12, patch = 16, tokens = 14 * 14 + 1, classes = 1000, hidden = 4 * d;
    const std::uint64_t embed = 3 * patch * patch * d + d + d + tokens * d;
    std::uint64_t attn = 0;
    if (kind == AttentionKind::standard) attn = 4 * (d * d + d);
    if (kind == AttentionKind::vlt) attn = 3 * (d * d + d);
    if (kind == AttentionKind::gka) attn = d * d + d + heads;
    const std::uint64_t block = 4 * d + attn + (d * hidden + hidden) + (hidden * d + d);
    return embed + depth * block + 2 * d + d * classes + classes;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST(Cost, VisionParamsMatchClosedForm) {
    const struct {
        const char* name;
        std::uint64_t d, h;
        AttentionKind kind;
    } cases[] = {{"deit-ti", 192, 3, AttentionKind::standard}, {"deit-s", 384, 6, AttentionKind::standard},
                 {"deit-b", 768, 12, AttentionKind::standard}, {"gka-ti", 192, 3, AttentionKind::gka},
                 {"gka-s", 384, 6, AttentionKind::gka},        {"gka-b", 768, 12, AttentionKind::gka},
                 {"vlt-ti", 192, 3, AttentionKind::vlt}};
    for (const auto& c : cases) {
        const auto r = gka::count_params(gka::preset(c.name));
        EXPECT_EQ(r.total_params, vit_params(c.d, c.h, c.kind)) << c.name;
        EXPECT_EQ(r.total_params, r.attn_params + r.mlp_params + r.embed_params + r.norm_params + r.head_params)
            << c.name;
    }
}

TEST(Cost, PublishedParameterTotals) {
    EXPECT_LT(rel(gka::count_params(gka::preset("deit-ti")).total_params, 5.72e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("deit-s")).total_params, 22.05e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("deit-b")).total_params, 86.57e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("gka-ti")).total_params, 4.38e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("gka-s")).total_params, 16.73e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("gka-b")).total_params, 65.31e6), 0.01);
    EXPECT_LT(rel(gka::count_params(gka::preset("vlt-ti")).total_params, 5.28e6), 0.01);
    EXPECT_EQ(gka::count_params(gka::preset("gka-ti")).sigma_params, 36u);
    EXPECT_EQ(gka::count_params(gka::preset("gka-s")).sigma_params, 72u);
    EXPECT_EQ(gka::count_params(gka::preset("gka-b")).sigma_params, 144u);
}

TEST(Cost, ParamCountMatchesInstantiatedModel) {
    for (const char* name : {"gka-vit-toy", "gka-lm-toy"}) {
        const auto c = gka::preset(name);
        EXPECT_EQ(gka::init_model<double>(c, 0).num_params(), gka::count_params(c).total_params) << name;
    }
    auto c = gka::preset("gka-vit-toy");
    c.attention = AttentionKind::vlt;
    EXPECT_EQ(gka::init_model<double>(c, 0).num_params(), gka::count_params(c).total_params);
    c.linear_bias = false;
    c.norm_affine = false;
    EXPECT_EQ(gka::init_model<double>(c, 0).num_params(), gka::count_params(c).total_params);
}

TEST(Cost, LanguageModelTrainFlopsClosedForm) {
    const auto c = gka::preset("gka-lm-d20");
    const auto r = gka::count_flops(c);
    // 6 * non-embedding params + 12 * D * sum over layers of the attended span
    std::uint64_t span = 0;
    for (std::size_t l = 0; l < 20; ++l) span += (l % 4 == 3) ? 2048 : 1024;
    EXPECT_EQ(r.train_flops_per_token, 6 * (r.total_params - r.embed_params) + 12 * 1280 * span);
    EXPECT_LT(rel(r.total_params, 378e6), 0.02);
    EXPECT_LT(rel(r.train_flops_per_token, 2.4143e9), 0.05);
}

TEST(Cost, VisionFlopDeltas) {
    const double want[] = {-0.211, -0.227, -0.238};
    const double gka_abs[] = {1.98e9, 7.11e9, 26.76e9};
    const char* sizes[] = {"ti", "s", "b"};
    for (int i = 0; i < 3; ++i) {
        const double g = gka::count_flops(gka::preset(std::string("gka-") + sizes[i])).flops_forward;
        const double d = gka::count_flops(gka::preset(std::string("deit-") + sizes[i])).flops_forward;
        EXPECT_NEAR(g / d - 1.0, want[i], 0.02) << sizes[i];
        EXPECT_LT(rel(g, gka_abs[i]), 0.10) << sizes[i];
    }
}

TEST(Cost, FlopsGrowWithSequenceLength) {
    const auto c = gka::preset("gka-ti");
    EXPECT_LT(gka::count_flops(c, 112).flops_forward, gka::count_flops(c, 224).flops_forward);
    EXPECT_EQ(gka::count_flops(c, 224).flops_forward, gka::count_flops(c).flops_forward);
    EXPECT_FALSE(gka::format_cost_table(gka::count_flops(c)).empty());
}

TEST(Config, FormatParseRoundTrip) {
    for (const auto& name : gka::preset_names()) {
        const ModelConfig c = gka::preset(name);
        EXPECT_EQ(gka::parse_config(gka::format_config(c)), c) << name;
    }
}

TEST(Config, PresetKeyThenOverrides) {
    const auto c = gka::parse_config("preset = gka-ti\n# comment\ndepth = 4  # trailing\n");
    EXPECT_EQ(c.depth, 4u);
    EXPECT_EQ(c.width, 192u);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(gka::preset("gka-xl"), gka::InputError);
    EXPECT_THROW(gka::parse_config("depth = -1"), gka::InputError);
    EXPECT_THROW(gka::parse_config("colour = red"), gka::InputError);
    EXPECT_THROW(gka::parse_config("depth 3"), gka::InputError);
    EXPECT_THROW(gka::parse_config("heads = 5\nwidth = 192"), gka::InputError);
    EXPECT_THROW(gka::parse_config("depth = 2\npreset = gka-ti"), gka::InputError);
    EXPECT_THROW(gka::parse_config("mask = diagonal"), gka::InputError);
    EXPECT_THROW(gka::load_config_file("/nonexistent/model.cfg"), gka::InputError);
}
