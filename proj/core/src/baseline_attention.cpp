#include "gka/baseline_attention.hpp"

#include <cmath>
#include <vector>

#include "gka/ops.hpp"
#include "gka/parallel.hpp"

namespace gka {

template <typename T>
void MhaLayerParams<T>::validate() const {
    if (w_q.empty() || w_k.empty() || w_o.empty()) throw ParameterError("MHA parameters are not initialized");
    const std::size_t d_model = w_o.dim(0);
    expect_shape(w_q, {d_model, d_model}, "MHA w_q");
    expect_shape(w_k, {d_model, d_model}, "MHA w_k");
    expect_shape(w_o, {d_model, d_model}, "MHA w_o");
    if (variant == MhaVariant::standard) {
        expect_shape(w_v, {d_model, d_model}, "MHA w_v");
    } else if (!w_v.empty() || !b_v.empty()) {
        throw ParameterError("VLT attention must not carry a value projection");
    }
    if (num_heads == 0 || d_model % num_heads != 0) {
        throw ShapeError("MHA width " + std::to_string(d_model) + " not divisible by " + std::to_string(num_heads) +
                         " heads");
    }
}

namespace {

template <typename T>
struct Projections {
    Tensor<T> q, k, v;
};

template <typename T>
Projections<T> project(const Tensor<T>& x, const MhaLayerParams<T>& p) {
    Projections<T> out;
    out.q = linear(x, p.w_q, p.b_q);
    out.k = linear(x, p.w_k, p.b_k);
    out.v = p.variant == MhaVariant::standard ? linear(x, p.w_v, p.b_v) : x;
    return out;
}

template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, const LayerMask& mask) {
    const std::size_t n = q.dim(0), d = q.dim(1);
    Tensor<T> scores({n, n});
    gemm_nt<T>(q.data(), k.data(), scores.data(), n, d, n);
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scores.at(i, j) *= scale;
            if (!mask.allowed(i, j)) scores.at(i, j) += static_cast<T>(kMaskPenalty);
        }
    }
    return softmax_rows(scores);
}

void check_input(const Shape& shape, std::size_t d_model) {
    if (shape.size() != 3 || shape[2] != d_model) {
        throw ShapeError("MHA input must be [B x N x " + std::to_string(d_model) + "], got " + shape_str(shape));
    }
}

}  // namespace

template <typename T>
Tensor<T> mha_forward(const Tensor<T>& x, const MhaLayerParams<T>& params, const MaskSpec& mask,
                      std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture) {
    params.validate();
    check_input(x.shape(), params.width());
    const std::size_t batch = x.dim(0), heads = params.heads();
    const LayerMask layer_mask = mask.resolve(layer_index);
    const Projections<T> proj = project(x, params);

    Tensor<T> mixed(x.shape());
    std::vector<Tensor<T>> recorded(capture ? batch * heads : 0);
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        const Tensor<T> probs =
            attention_probs(gather_head(proj.q, b, h, heads), gather_head(proj.k, b, h, heads), layer_mask);
        scatter_head(mixed, matmul(probs, gather_head(proj.v, b, h, heads)), b, h, heads);
        if (capture) recorded[item] = probs;
    });
    if (capture) {
        for (std::size_t item = 0; item < recorded.size(); ++item) {
            capture->record(layer_index, item / heads, item % heads, std::move(recorded[item]));
        }
    }
    return linear(mixed, params.w_o, params.b_o);
}

template <typename T>
MhaGrads<T> mha_backward(const Tensor<T>& x, const MhaLayerParams<T>& params, const MaskSpec& mask,
                         std::size_t layer_index, const Tensor<T>& grad_out) {
    params.validate();
    check_input(x.shape(), params.width());
    expect_shape(grad_out, x.shape(), "MHA grad_out");
    const std::size_t batch = x.dim(0), n = x.dim(1), heads = params.heads();
    const std::size_t d = params.width() / heads;
    const LayerMask layer_mask = mask.resolve(layer_index);
    const Projections<T> proj = project(x, params);

    std::vector<Tensor<T>> probs(batch * heads);
    Tensor<T> mixed(x.shape());
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        probs[item] = attention_probs(gather_head(proj.q, b, h, heads), gather_head(proj.k, b, h, heads), layer_mask);
        scatter_head(mixed, matmul(probs[item], gather_head(proj.v, b, h, heads)), b, h, heads);
    });

    MhaGrads<T> g;
    auto zeros_like = [](const Tensor<T>& t) { return t.empty() ? Tensor<T>{} : Tensor<T>(t.shape()); };
    g.w_o = zeros_like(params.w_o);
    g.b_o = zeros_like(params.b_o);
    const Tensor<T> grad_mixed = linear_backward(mixed, params.w_o, grad_out, g.w_o, &g.b_o);

    Tensor<T> grad_q(x.shape()), grad_k(x.shape()), grad_v(x.shape());
    const T scale = T{1} / std::sqrt(static_cast<T>(d));
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        const Tensor<T>& p = probs[item];
        const Tensor<T> q = gather_head(proj.q, b, h, heads);
        const Tensor<T> k = gather_head(proj.k, b, h, heads);
        const Tensor<T> v = gather_head(proj.v, b, h, heads);
        const Tensor<T> gy = gather_head(grad_mixed, b, h, heads);

        Tensor<T> gp({n, n});
        gemm_nt<T>(gy.data(), v.data(), gp.data(), n, d, n);
        Tensor<T> gv({n, d});
        gemm_tn<T>(p.data(), gy.data(), gv.data(), n, n, d);

        Tensor<T> gs({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += gp.at(i, j) * p.at(i, j);
            for (std::size_t j = 0; j < n; ++j) gs.at(i, j) = p.at(i, j) * (gp.at(i, j) - dot) * scale;
        }
        Tensor<T> gq = matmul(gs, k);
        Tensor<T> gk({n, d});
        gemm_tn<T>(gs.data(), q.data(), gk.data(), n, n, d);

        scatter_head(grad_q, gq, b, h, heads);
        scatter_head(grad_k, gk, b, h, heads);
        scatter_head(grad_v, gv, b, h, heads);
    });

    g.w_q = zeros_like(params.w_q);
    g.b_q = zeros_like(params.b_q);
    g.w_k = zeros_like(params.w_k);
    g.b_k = zeros_like(params.b_k);
    g.x = linear_backward(x, params.w_q, grad_q, g.w_q, &g.b_q);
    add_inplace(g.x, linear_backward(x, params.w_k, grad_k, g.w_k, &g.b_k));
    if (params.variant == MhaVariant::standard) {
        g.w_v = zeros_like(params.w_v);
        g.b_v = zeros_like(params.b_v);
        add_inplace(g.x, linear_backward(x, params.w_v, grad_v, g.w_v, &g.b_v));
    } else {
        add_inplace(g.x, grad_v);
    }
    return g;
}

#define GKA_INSTANTIATE_MHA(T)                                                                                 \
    template struct MhaLayerParams<T>;                                                                         \
    template Tensor<T> mha_forward(const Tensor<T>&, const MhaLayerParams<T>&, const MaskSpec&, std::size_t,   \
                                   AttentionCapture<T>*);                                                      \
    template MhaGrads<T> mha_backward(const Tensor<T>&, const MhaLayerParams<T>&, const MaskSpec&,             \
                                      std::size_t, const Tensor<T>&);

GKA_INSTANTIATE_MHA(float)
GKA_INSTANTIATE_MHA(double)

}  // namespace gka
