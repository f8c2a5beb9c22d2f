#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "gka/model.hpp"
#include "gka/ops.hpp"
#include "oracles.hpp"

using gka::Model;
using gka::ModelConfig;
using gka::Tensor;

namespace {

ModelConfig tiny_vit(gka::AttentionKind kind = gka::AttentionKind::gka) {
    ModelConfig c = gka::preset("gka-vit-toy");
    c.image_size = 8;
    c.patch_size = 4;
    c.width = 8;
    c.heads = 2;
    c.depth = 1;
    c.mlp_ratio = 2;
    c.attention = kind;
    return c;
}

ModelConfig tiny_lm() {
    ModelConfig c = gka::preset("gka-lm-toy");
    c.width = 8;
    c.heads = 2;
    c.vocab_size = 7;
    c.seq_len = 6;
    c.mask = {gka::MaskKind::causal_window, 3, "SL"};
    return c;
}

gka::TokenBatch tokens(std::size_t batch, std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::int64_t> id(0, static_cast<std::int64_t>(vocab) - 1);
    gka::TokenBatch t{batch, len, {}};
    for (std::size_t i = 0; i < batch * len; ++i) t.ids.push_back(id(rng));
    return t;
}

}  // namespace

TEST(Model, PatchifyOrder) {
    Tensor<double> img({1, 2, 4, 4});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
    const auto p = gka::patchify(img, 2);
    ASSERT_EQ(p.shape(), (gka::Shape{1, 4, 8}));
    // patch (row 1, col 0), channel 1, dy 1, dx 0 -> pixel (1, y=3, x=0)
    EXPECT_EQ(p.at(0, 2, (1 * 2 + 1) * 2 + 0), img[(1 * 4 + 3) * 4 + 0]);
    EXPECT_THROW(gka::patchify(Tensor<double>({1, 1, 4, 6}), 2), gka::ShapeError);
    EXPECT_THROW(gka::patchify(Tensor<double>({1, 1, 5, 5}), 2), gka::ShapeError);
}

TEST(Model, InitFollowsDocumentedScheme) {
    auto c = tiny_vit();
    c.init_log_sigma = 0.7;
    const auto m = gka::init_model<double>(c, 3);
    const auto& blk = m.blocks[0];
    for (double v : blk.ln1_gamma.values()) EXPECT_EQ(v, 1.0);
    for (double v : blk.b1.values()) EXPECT_EQ(v, 0.0);
    const auto& attn = std::get<gka::GkaLayerParams<double>>(blk.attn);
    for (double v : attn.log_sigma.values()) EXPECT_EQ(v, 0.7);
    EXPECT_EQ(gka::collect_log_sigma(m).shape(), (gka::Shape{1, 2}));
    // same seed, same model; different seed, different weights
    EXPECT_EQ(gka::init_model<double>(c, 3).head_w, m.head_w);
    EXPECT_NE(gka::init_model<double>(c, 4).head_w, m.head_w);
}

TEST(Model, VitForwardMatchesManualComposition) {
    const auto c = tiny_vit();
    auto m = gka::init_model<double>(c, 5);
    std::mt19937_64 rng(5);
    for (auto* t : {&m.patch_b, &m.blocks[0].b1, &m.blocks[0].b2, &m.norm_beta, &m.head_b})
        *t = oracle::randn(t->shape(), rng, 0.1);
    const auto images = oracle::randn({2, 1, 8, 8}, rng);

    const auto patches = gka::patchify(images, 4);
    Tensor<double> x({2, 5, 8});
    const auto emb = gka::linear(patches, m.patch_w, m.patch_b);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t j = 0; j < 8; ++j)
                x.at(b, t, j) = (t == 0 ? m.cls_token[j] : emb.at(b, t - 1, j)) + m.pos_embed.at(t, j);
    const auto& blk = m.blocks[0];
    const auto& attn = std::get<gka::GkaLayerParams<double>>(blk.attn);
    auto h = x;
    gka::add_inplace(h, oracle::gka_layer(gka::layer_norm(x, blk.ln1_gamma, blk.ln1_beta), attn, {}));
    auto out = h;
    gka::add_inplace(out, gka::linear(gka::gelu(gka::linear(gka::layer_norm(h, blk.ln2_gamma, blk.ln2_beta), blk.w1,
                                                            blk.b1)),
                                      blk.w2, blk.b2));
    const auto normed = gka::layer_norm(out, m.norm_gamma, m.norm_beta);
    Tensor<double> cls({2, 8});
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 8; ++j) cls.at(b, j) = normed.at(b, 0, j);
    const auto want = gka::linear(cls, m.head_w, m.head_b);
    EXPECT_LT(gka::max_abs_diff(gka::vit_forward(m, images), want), 1e-12);
}

TEST(Model, LmIsCausal) {
    const auto c = tiny_lm();
    const auto m = gka::init_model<double>(c, 8);
    std::mt19937_64 rng(8);
    auto t = tokens(1, 6, 7, rng);
    const auto base = gka::lm_forward(m, t);
    t.ids[4] = (t.ids[4] + 1) % 7;
    t.ids[5] = (t.ids[5] + 3) % 7;
    const auto edited = gka::lm_forward(m, t);
    for (std::size_t i = 0; i < 4 * 7; ++i) EXPECT_EQ(base[i], edited[i]);
    EXPECT_NE(base[4 * 7], edited[4 * 7]);
}

TEST(Model, LmRejectsBadTokens) {
    const auto m = gka::init_model<double>(tiny_lm(), 1);
    EXPECT_THROW(gka::lm_forward(m, gka::TokenBatch{1, 2, {0, 7}}), gka::InputError);
    EXPECT_THROW(gka::lm_forward(m, gka::TokenBatch{1, 2, {0, -1}}), gka::InputError);
    EXPECT_THROW(gka::lm_forward(m, gka::TokenBatch{1, 7, std::vector<std::int64_t>(7, 0)}), gka::InputError);
}

TEST(Model, DropPathOnlyInTrainMode) {
    auto c = tiny_vit();
    c.drop_path_rate = 0.5;
    const auto m = gka::init_model<double>(c, 2);
    std::mt19937_64 rng(2);
    const auto images = oracle::randn({4, 1, 8, 8}, rng);
    EXPECT_EQ(gka::vit_forward(m, images), gka::vit_forward(m, images));
    EXPECT_THROW(gka::vit_forward(m, images, nullptr, {true, nullptr, nullptr}), gka::ParameterError);
    std::mt19937_64 drop(1);
    EXPECT_NE(gka::vit_forward(m, images, nullptr, {true, &drop, nullptr}), gka::vit_forward(m, images));
}

class ModelGradients : public ::testing::TestWithParam<gka::AttentionKind> {};

TEST_P(ModelGradients, VitBackwardMatchesFiniteDifferences) {
    auto c = tiny_vit(GetParam());
    c.depth = 2;
    auto m = gka::init_model<double>(c, 9);
    std::mt19937_64 rng(9);
    const auto images = oracle::randn({2, 1, 8, 8}, rng);
    const auto probe = oracle::randn({2, c.num_classes}, rng);
    gka::ModelCache<double> cache;
    gka::vit_forward(m, images, nullptr, {false, nullptr, &cache});
    auto grads = gka::zeros_like(m);
    gka::vit_backward(m, cache, probe, grads);
    auto f = [&] { return fd::dot(gka::vit_forward(m, images), probe); };
    EXPECT_LT(fd::max_rel(grads.head_w.values(), fd::gradient(m.head_w, f)), 1e-6);
    EXPECT_LT(fd::max_rel(grads.pos_embed.values(), fd::gradient(m.pos_embed, f)), 1e-5);
    EXPECT_LT(fd::max_rel(grads.cls_token.values(), fd::gradient(m.cls_token, f)), 1e-5);
    EXPECT_LT(fd::max_rel(grads.blocks[0].ln1_gamma.values(), fd::gradient(m.blocks[0].ln1_gamma, f)), 1e-5);
    EXPECT_LT(fd::max_rel(grads.blocks[1].w1.values(), fd::gradient(m.blocks[1].w1, f)), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Kinds, ModelGradients,
                         ::testing::Values(gka::AttentionKind::gka, gka::AttentionKind::standard,
                                           gka::AttentionKind::vlt));

TEST(Model, LmBackwardMatchesFiniteDifferences) {
    auto m = gka::init_model<double>(tiny_lm(), 10);
    std::mt19937_64 rng(10);
    const auto t = tokens(2, 6, 7, rng);
    const auto probe = oracle::randn({2, 6, 7}, rng);
    gka::ModelCache<double> cache;
    gka::lm_forward(m, t, nullptr, {false, nullptr, &cache});
    auto grads = gka::zeros_like(m);
    gka::lm_backward(m, cache, probe, grads);
    auto f = [&] { return fd::dot(gka::lm_forward(m, t), probe); };
    auto& attn = std::get<gka::GkaLayerParams<double>>(m.blocks[1].attn);
    const auto& gattn = std::get<gka::GkaLayerParams<double>>(grads.blocks[1].attn);
    EXPECT_LT(fd::max_rel(gattn.log_sigma.values(), fd::gradient(attn.log_sigma, f)), 1e-5);
    EXPECT_LT(fd::max_rel(grads.token_embed.values(), fd::gradient(m.token_embed, f)), 1e-5);
    EXPECT_LT(fd::max_rel(grads.blocks[0].w2.values(), fd::gradient(m.blocks[0].w2, f)), 1e-5);
}

TEST(Model, CastPreservesStructure) {
    const auto m = gka::init_model<double>(tiny_vit(), 1);
    const auto f = gka::cast_model<float>(m);
    EXPECT_EQ(f.num_params(), m.num_params());
    EXPECT_EQ(gka::cast_model<double>(f).head_w, m.head_w.cast<float>().cast<double>());
    std::mt19937_64 rng(1);
    const auto images = oracle::randn({1, 1, 8, 8}, rng);
    EXPECT_LT(gka::max_abs_diff(gka::vit_forward(f, images.cast<float>()).cast<double>(), gka::vit_forward(m, images)),
              1e-4);
}
