#pragma once

// Pre-norm transformer blocks and two toy assemblies (ViT-style classifier,
// causal LM) with hand-written backward passes.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "gka/baseline_attention.hpp"
#include "gka/config.hpp"
#include "gka/kernel_attention.hpp"
#include "gka/tensor.hpp"

namespace gka {

enum class ParamKind { weight, bias, norm, log_sigma, position, cls, embedding };

template <typename T>
using AttentionParams = std::variant<GkaLayerParams<T>, MhaLayerParams<T>>;

template <typename T>
struct BlockParams {
    Tensor<T> ln1_gamma, ln1_beta;
    AttentionParams<T> attn;
    Tensor<T> ln2_gamma, ln2_beta;
    Tensor<T> w1, b1, w2, b2;
    double drop_path_rate = 0.0;
};

template <typename T>
struct Model {
    ModelConfig config;
    // vit
    Tensor<T> patch_w, patch_b, cls_token, pos_embed;
    // causal_lm
    Tensor<T> token_embed;

    std::vector<BlockParams<T>> blocks;
    Tensor<T> norm_gamma, norm_beta;
    Tensor<T> head_w, head_b;

    MaskSpec mask() const { return config.family == ModelFamily::vit ? MaskSpec::none() : config.mask; }
    std::size_t num_params() const;
};

/// Fresh parameters: linear weights ~ N(0, 1/fan_in), position and class
/// embeddings ~ N(0, 0.02), token embeddings ~ N(0, 1),
/// zero biases, unit norm gains, log sigma = config.init_log_sigma.
template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Same structure, all tensors zero. Used as a gradient container.
template <typename T>
Model<T> zeros_like(const Model<T>& model);

namespace detail {
template <typename B, typename Fn>
void visit_block(B& blk, const std::string& p, Fn& fn) {
    auto v = [&](const char* name, auto& t, ParamKind kind) {
        if (!t.empty()) fn(p + name, t, kind);
    };
    v("ln1.gamma", blk.ln1_gamma, ParamKind::norm);
    v("ln1.beta", blk.ln1_beta, ParamKind::norm);
    std::visit(
        [&](auto& a) {
            using A = std::decay_t<decltype(a)>;
            if constexpr (requires { a.log_sigma; }) {
                v("attn.log_sigma", a.log_sigma, ParamKind::log_sigma);
                v("attn.w_o", a.w_o, ParamKind::weight);
                v("attn.b_o", a.b_o, ParamKind::bias);
            } else {
                static_assert(requires { a.w_q; }, "unexpected attention parameter type");
                (void)sizeof(A);
                v("attn.w_q", a.w_q, ParamKind::weight);
                v("attn.b_q", a.b_q, ParamKind::bias);
                v("attn.w_k", a.w_k, ParamKind::weight);
                v("attn.b_k", a.b_k, ParamKind::bias);
                v("attn.w_v", a.w_v, ParamKind::weight);
                v("attn.b_v", a.b_v, ParamKind::bias);
                v("attn.w_o", a.w_o, ParamKind::weight);
                v("attn.b_o", a.b_o, ParamKind::bias);
            }
        },
        blk.attn);
    v("ln2.gamma", blk.ln2_gamma, ParamKind::norm);
    v("ln2.beta", blk.ln2_beta, ParamKind::norm);
    v("mlp.w1", blk.w1, ParamKind::weight);
    v("mlp.b1", blk.b1, ParamKind::bias);
    v("mlp.w2", blk.w2, ParamKind::weight);
    v("mlp.b2", blk.b2, ParamKind::bias);
}
}  // namespace detail

/// Calls fn(name, tensor, kind) for every non-empty parameter tensor in a
/// fixed order. Works on const and mutable models.
template <typename M, typename Fn>
void visit_params(M& model, Fn&& fn) {
    auto v = [&](const char* name, auto& t, ParamKind kind) {
        if (!t.empty()) fn(std::string(name), t, kind);
    };
    v("patch.w", model.patch_w, ParamKind::weight);
    v("patch.b", model.patch_b, ParamKind::bias);
    v("cls_token", model.cls_token, ParamKind::cls);
    v("pos_embed", model.pos_embed, ParamKind::position);
    v("token_embed", model.token_embed, ParamKind::embedding);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        detail::visit_block(model.blocks[l], "blocks." + std::to_string(l) + ".", fn);
    }
    v("norm.gamma", model.norm_gamma, ParamKind::norm);
    v("norm.beta", model.norm_beta, ParamKind::norm);
    v("head.w", model.head_w, ParamKind::weight);
    v("head.b", model.head_b, ParamKind::bias);
}

template <typename T>
struct BlockCache {
    Tensor<T> x_in, ln1_out, x_mid, ln2_out, hidden_pre, hidden_act;
    std::vector<T> attn_scale, mlp_scale;  // per-sample drop-path factors; empty = identity
};

template <typename T>
struct ModelCache {
    Tensor<T> patches;
    std::vector<std::int64_t> ids;
    std::vector<BlockCache<T>> blocks;
    Tensor<T> final_in, final_out;
};

template <typename T>
struct ForwardOptions {
    bool train = false;
    std::mt19937_64* rng = nullptr;  // required when train and drop_path_rate > 0
    ModelCache<T>* cache = nullptr;
};

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttentionParams<T>& attn, const MaskSpec& mask,
                            std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture);

/// Pre-norm block: x + DropPath(Attn(LN(x))), then + DropPath(MLP(LN(.))).
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& block, const MaskSpec& mask,
                        std::size_t layer_index, bool train_mode, std::type_identity_t<AttentionCapture<T>>* capture = nullptr,
                        std::mt19937_64* rng = nullptr, std::type_identity_t<BlockCache<T>>* cache = nullptr);

/// Accumulates parameter gradients into `grads`, returns grad wrt x.
template <typename T>
Tensor<T> block_backward(const BlockParams<T>& block, const MaskSpec& mask, std::size_t layer_index,
                         const BlockCache<T>& cache, const Tensor<T>& grad_out, BlockParams<T>& grads);

/// images [B x C x H x W] -> patches [B x P^2 x C*p*p], patch-major, (c, dy, dx) inside a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size);

/// Returns logits [B x num_classes].
template <typename T>
Tensor<T> vit_forward(const Model<T>& model, const Tensor<T>& images, std::type_identity_t<AttentionCapture<T>>* capture = nullptr,
                      std::type_identity_t<ForwardOptions<T>> options = {});

template <typename T>
void vit_backward(const Model<T>& model, const ModelCache<T>& cache, const Tensor<T>& grad_logits,
                  Model<T>& grads);

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::int64_t> ids;  // row-major [batch x length]

    std::int64_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

/// Returns logits [B x N x vocab].
template <typename T>
Tensor<T> lm_forward(const Model<T>& model, const TokenBatch& tokens, std::type_identity_t<AttentionCapture<T>>* capture = nullptr,
                     std::type_identity_t<ForwardOptions<T>> options = {});

template <typename T>
void lm_backward(const Model<T>& model, const ModelCache<T>& cache, const Tensor<T>& grad_logits,
                 Model<T>& grads);

/// log sigma of every GKA layer as an L x H table (empty for other kinds).
template <typename T>
Tensor<double> collect_log_sigma(const Model<T>& model);

template <typename U, typename T>
Model<U> cast_model(const Model<T>& model);

}  // namespace gka
