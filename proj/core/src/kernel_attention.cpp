#include "gka/kernel_attention.hpp"

#include <algorithm>
#include <cmath>

#include "gka/ops.hpp"
#include "gka/parallel.hpp"

namespace gka {

std::string to_string(MaskKind kind) {
    switch (kind) {
        case MaskKind::none: return "none";
        case MaskKind::causal: return "causal";
        case MaskKind::causal_window: return "causal_window";
    }
    return "none";
}

MaskKind parse_mask_kind(const std::string& text) {
    if (text == "none") return MaskKind::none;
    if (text == "causal") return MaskKind::causal;
    if (text == "causal_window") return MaskKind::causal_window;
    throw ParameterError("unknown mask kind '" + text + "' (expected none, causal, causal_window)");
}

void MaskSpec::validate() const {
    if (window < 1) throw ParameterError("mask window must be >= 1");
    for (char c : layer_pattern) {
        if (c != 'S' && c != 'L') {
            throw ParameterError("mask layer pattern may only contain 'S' and 'L', got '" + layer_pattern + "'");
        }
    }
}

LayerMask MaskSpec::resolve(std::size_t layer_index) const {
    validate();
    if (kind == MaskKind::none) return {MaskKind::none, window};
    if (layer_pattern.empty()) return {kind, window};
    const char c = layer_pattern[layer_index % layer_pattern.size()];
    return c == 'L' ? LayerMask{MaskKind::causal, window} : LayerMask{MaskKind::causal_window, window};
}

template <typename T>
T GkaLayerParams<T>::sigma(std::size_t h) const {
    return std::exp(log_sigma[h]);
}

template <typename T>
void GkaLayerParams<T>::validate() const {
    if (log_sigma.empty() || w_o.empty()) throw ParameterError("GKA layer parameters are not initialized");
    const std::size_t d_model = w_o.dim(0);
    expect_shape(w_o, {d_model, d_model}, "GKA w_o");
    expect_shape(log_sigma, {log_sigma.size()}, "GKA log_sigma");
    if (!b_o.empty()) expect_shape(b_o, {d_model}, "GKA b_o");
    if (d_model % heads() != 0) {
        throw ShapeError("GKA width " + std::to_string(d_model) + " not divisible by " + std::to_string(heads()) +
                         " heads");
    }
    if (!(epsilon > T{0})) throw ParameterError("GKA epsilon must be > 0");
}

template <typename T>
void AttentionCapture<T>::record(std::size_t layer, std::size_t batch, std::size_t head, Tensor<T> weights,
                                 Tensor<T> kernel) {
    auto& slot = layers_[layer][{batch, head}];
    slot.weights = std::move(weights);
    if (keep_kernel_) slot.kernel = std::move(kernel);
}

template <typename T>
std::vector<std::size_t> AttentionCapture<T>::layer_indices() const {
    std::vector<std::size_t> out;
    for (const auto& kv : layers_) out.push_back(kv.first);
    return out;
}

template <typename T>
std::size_t AttentionCapture<T>::num_heads(std::size_t layer) const {
    auto it = layers_.find(layer);
    if (it == layers_.end()) throw InputError("capture has no layer " + std::to_string(layer));
    std::size_t heads = 0;
    for (const auto& kv : it->second) heads = std::max(heads, kv.first.second + 1);
    return heads;
}

template <typename T>
std::size_t AttentionCapture<T>::num_tokens(std::size_t layer) const {
    return weights(layer, 0, 0).dim(0);
}

template <typename T>
const HeadMatrices<T>& AttentionCapture<T>::find(std::size_t layer, std::size_t head, std::size_t batch) const {
    auto it = layers_.find(layer);
    if (it == layers_.end()) throw InputError("capture has no layer " + std::to_string(layer));
    auto jt = it->second.find({batch, head});
    if (jt == it->second.end()) {
        throw InputError("capture has no head " + std::to_string(head) + " for batch item " +
                         std::to_string(batch) + " in layer " + std::to_string(layer));
    }
    return jt->second;
}

template <typename T>
const Tensor<T>& AttentionCapture<T>::weights(std::size_t layer, std::size_t head, std::size_t batch) const {
    return find(layer, head, batch).weights;
}

template <typename T>
const Tensor<T>& AttentionCapture<T>::kernel(std::size_t layer, std::size_t head, std::size_t batch) const {
    const auto& m = find(layer, head, batch);
    if (m.kernel.empty()) throw InputError("capture was recorded without kernels");
    return m.kernel;
}

template <typename T>
Tensor<T> pairwise_sqdist(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("pairwise_sqdist expects N x d, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor<T> dist({n, n});
    gemm_nt<T>(x.data(), x.data(), dist.data(), n, d, n);
    std::vector<T> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = dist.at(i, i);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T v = norms[i] + norms[j] - T{2} * dist.at(i, j);
            dist.at(i, j) = i == j ? T{0} : std::max(v, T{0});
        }
    }
    return dist;
}

namespace {

template <typename T>
void exp_kernel_inplace(Tensor<T>& dist_to_kernel, T sigma) {
    const T scale = T{1} / (T{2} * sigma * sigma);
    for (auto& v : dist_to_kernel.data()) v = std::exp(-v * scale);
}

template <typename T, typename Allowed>
Tensor<T> normalize_rows_impl(const Tensor<T>& k, Allowed&& allowed, T epsilon) {
    if (k.rank() != 2 || k.dim(0) != k.dim(1)) {
        throw ShapeError("masked_row_normalize expects N x N, got " + shape_str(k.shape()));
    }
    const std::size_t n = k.dim(0);
    Tensor<T> w({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        T sum{0};
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (allowed(i, j)) {
                sum += k.at(i, j);
                any = true;
            }
        }
        if (!any) throw NumericError("masked_row_normalize: row " + std::to_string(i) + " has no allowed entries");
        const T denom = sum + epsilon;
        for (std::size_t j = 0; j < n; ++j) w.at(i, j) = allowed(i, j) ? k.at(i, j) / denom : T{0};
    }
    return w;
}

}  // namespace

template <typename T>
Tensor<T> gka_affinity(const Tensor<T>& x_head, T sigma) {
    if (!(sigma > T{0})) throw ParameterError("gka_affinity: sigma must be > 0");
    Tensor<T> k = pairwise_sqdist(x_head);
    exp_kernel_inplace(k, sigma);
    return k;
}

template <typename T>
Tensor<T> masked_row_normalize(const Tensor<T>& k, const LayerMask& mask, T epsilon) {
    return normalize_rows_impl(k, [&](std::size_t i, std::size_t j) { return mask.allowed(i, j); }, epsilon);
}

template <typename T>
Tensor<T> masked_row_normalize(const Tensor<T>& k, std::span<const std::uint8_t> allowed, T epsilon) {
    if (allowed.size() != k.size()) throw ShapeError("masked_row_normalize: allow-map size mismatch");
    const std::size_t n = k.rank() == 2 ? k.dim(1) : 0;
    return normalize_rows_impl(
        k, [&](std::size_t i, std::size_t j) { return allowed[i * n + j] != 0; }, epsilon);
}

namespace {

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& x, double base, double direction) {
    if (x.rank() != 2) throw ShapeError("rope expects N x d, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (d % 2 != 0) throw ParameterError("rope requires an even head dimension, got " + std::to_string(d));
    Tensor<T> out(x.shape());
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t m = 0; m < d / 2; ++m) {
            const double theta = std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
            const double angle = direction * static_cast<double>(pos) * theta;
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            const T a = x.at(pos, 2 * m), b = x.at(pos, 2 * m + 1);
            out.at(pos, 2 * m) = a * c - b * s;
            out.at(pos, 2 * m + 1) = a * s + b * c;
        }
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x_head, double base) {
    return rope_rotate(x_head, base, 1.0);
}

template <typename T>
Tensor<T> rope_apply_inverse(const Tensor<T>& x_head, double base) {
    return rope_rotate(x_head, base, -1.0);
}

template <typename T>
Tensor<T> unit_normalize_rows(const Tensor<T>& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        T sq{0};
        for (std::size_t j = 0; j < d; ++j) sq += x[r * d + j] * x[r * d + j];
        const T norm = std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = norm > T{0} ? x[r * d + j] / norm : T{0};
    }
    return out;
}

template <typename T>
Tensor<T> kernel_features(const Tensor<T>& x_head, const FeatureTransform& transform) {
    Tensor<T> f = transform.rope ? rope_apply(x_head, transform.rope_base) : x_head;
    return transform.unit_norm ? unit_normalize_rows(f) : f;
}

template <typename T>
Tensor<T> gather_head(const Tensor<T>& x, std::size_t batch, std::size_t head, std::size_t heads) {
    const std::size_t n = x.dim(1), d_model = x.dim(2), d = d_model / heads;
    Tensor<T> out({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) = x.at(batch, i, head * d + c);
    return out;
}

template <typename T>
void scatter_head(Tensor<T>& x, const Tensor<T>& head_values, std::size_t batch, std::size_t head,
                  std::size_t heads, bool accumulate) {
    const std::size_t n = x.dim(1), d_model = x.dim(2), d = d_model / heads;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            T& dst = x.at(batch, i, head * d + c);
            dst = accumulate ? dst + head_values.at(i, c) : head_values.at(i, c);
        }
    }
}

std::size_t naive_workspace_elements(std::size_t tokens, std::size_t head_dim) {
    // distances/kernel share one buffer, plus the normalized weights, plus
    // the gathered values and kernel features
    return 2 * tokens * tokens + 2 * tokens * head_dim;
}

namespace {

void check_input(const Shape& shape, std::size_t d_model) {
    if (shape.size() != 3 || shape[2] != d_model) {
        throw ShapeError("GKA input must be [B x N x " + std::to_string(d_model) + "], got " + shape_str(shape));
    }
}

template <typename T>
struct HeadState {
    Tensor<T> values;    // x~ head slice
    Tensor<T> rotated;   // after rope (only when rope is on)
    Tensor<T> features;  // what the kernel sees
    Tensor<T> dist;
    Tensor<T> kernel;
    Tensor<T> weights;
};

template <typename T>
HeadState<T> head_forward(const Tensor<T>& x, const GkaLayerParams<T>& params, const LayerMask& mask,
                          std::size_t b, std::size_t h, bool keep_intermediates) {
    HeadState<T> s;
    s.values = gather_head(x, b, h, params.heads());
    if (params.features.rope) s.rotated = rope_apply(s.values, params.features.rope_base);
    const Tensor<T>& pre = params.features.rope ? s.rotated : s.values;
    s.features = params.features.unit_norm ? unit_normalize_rows(pre) : pre;
    s.dist = pairwise_sqdist(s.features);
    s.kernel = s.dist;
    exp_kernel_inplace(s.kernel, params.sigma(h));
    s.weights = masked_row_normalize(s.kernel, mask, params.epsilon);
    if (!keep_intermediates) s.dist = Tensor<T>{};
    return s;
}

}  // namespace

template <typename T>
Tensor<T> gka_forward(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                      std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture) {
    params.validate();
    const std::size_t d_model = params.width(), heads = params.heads();
    check_input(x.shape(), d_model);
    const std::size_t batch = x.dim(0);
    const LayerMask layer_mask = mask.resolve(layer_index);

    Tensor<T> mixed(x.shape());
    std::vector<HeadMatrices<T>> recorded(capture ? batch * heads : 0);
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        HeadState<T> s = head_forward(x, params, layer_mask, b, h, false);
        scatter_head(mixed, matmul(s.weights, s.values), b, h, heads);
        if (capture) {
            recorded[item].weights = std::move(s.weights);
            if (capture->keep_kernel()) recorded[item].kernel = std::move(s.kernel);
        }
    });
    if (capture) {
        for (std::size_t item = 0; item < recorded.size(); ++item) {
            capture->record(layer_index, item / heads, item % heads, std::move(recorded[item].weights),
                            std::move(recorded[item].kernel));
        }
    }
    return linear(mixed, params.w_o, params.b_o);
}

template <typename T>
GkaGrads<T> gka_backward(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                         std::size_t layer_index, const Tensor<T>& grad_out) {
    params.validate();
    const std::size_t d_model = params.width(), heads = params.heads();
    check_input(x.shape(), d_model);
    expect_shape(grad_out, x.shape(), "GKA grad_out");
    const std::size_t batch = x.dim(0), n = x.dim(1), d = d_model / heads;
    const LayerMask layer_mask = mask.resolve(layer_index);

    std::vector<HeadState<T>> states(batch * heads);
    Tensor<T> mixed(x.shape());
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        states[item] = head_forward(x, params, layer_mask, b, h, true);
        scatter_head(mixed, matmul(states[item].weights, states[item].values), b, h, heads);
    });

    GkaGrads<T> g;
    g.w_o = Tensor<T>(params.w_o.shape());
    g.b_o = params.b_o.empty() ? Tensor<T>{} : Tensor<T>(params.b_o.shape());
    g.log_sigma = Tensor<T>(params.log_sigma.shape());
    g.x = Tensor<T>(x.shape());
    const Tensor<T> grad_mixed = linear_backward(mixed, params.w_o, grad_out, g.w_o, &g.b_o);

    std::vector<T> sigma_grad_items(batch * heads, T{0});
    parallel_for(batch * heads, [&](std::size_t item) {
        const std::size_t b = item / heads, h = item % heads;
        const HeadState<T>& s = states[item];
        const T sigma = params.sigma(h);
        const T inv_sigma2 = T{1} / (sigma * sigma);

        const Tensor<T> grad_y = gather_head(grad_mixed, b, h, heads);
        Tensor<T> grad_w({n, n});
        gemm_nt<T>(grad_y.data(), s.values.data(), grad_w.data(), n, d, n);
        Tensor<T> grad_values({n, d});
        gemm_tn<T>(s.weights.data(), grad_y.data(), grad_values.data(), n, n, d);

        // quotient rule over the allowed set, then through exp and the distance
        Tensor<T> grad_dist({n, n});
        T grad_log_sigma{0};
        for (std::size_t i = 0; i < n; ++i) {
            T row_sum{0}, dot{0};
            for (std::size_t j = 0; j < n; ++j) {
                if (!layer_mask.allowed(i, j)) continue;
                row_sum += s.kernel.at(i, j);
                dot += grad_w.at(i, j) * s.weights.at(i, j);
            }
            const T inv_denom = T{1} / (row_sum + params.epsilon);
            for (std::size_t j = 0; j < n; ++j) {
                if (!layer_mask.allowed(i, j)) continue;
                const T grad_k = (grad_w.at(i, j) - dot) * inv_denom;
                const T kd = grad_k * s.kernel.at(i, j);
                grad_log_sigma += kd * s.dist.at(i, j) * inv_sigma2;
                if (i != j) grad_dist.at(i, j) = -kd * T{0.5} * inv_sigma2;
            }
        }
        sigma_grad_items[item] = grad_log_sigma;

        // dD_ij/df_i = 2 (f_i - f_j): grad_f = 2 (rowsum(G + G^T) f - (G + G^T) f)
        Tensor<T> sym({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) sym.at(i, j) = grad_dist.at(i, j) + grad_dist.at(j, i);
        Tensor<T> grad_features = matmul(sym, s.features);
        for (std::size_t i = 0; i < n; ++i) {
            T c{0};
            for (std::size_t j = 0; j < n; ++j) c += sym.at(i, j);
            for (std::size_t k = 0; k < d; ++k) {
                grad_features.at(i, k) = T{2} * (c * s.features.at(i, k) - grad_features.at(i, k));
            }
        }

        if (params.features.unit_norm) {
            const Tensor<T>& pre = params.features.rope ? s.rotated : s.values;
            for (std::size_t i = 0; i < n; ++i) {
                T sq{0}, proj{0};
                for (std::size_t k = 0; k < d; ++k) {
                    sq += pre.at(i, k) * pre.at(i, k);
                    proj += s.features.at(i, k) * grad_features.at(i, k);
                }
                const T norm = std::sqrt(sq);
                for (std::size_t k = 0; k < d; ++k) {
                    grad_features.at(i, k) =
                        norm > T{0} ? (grad_features.at(i, k) - s.features.at(i, k) * proj) / norm : T{0};
                }
            }
        }
        if (params.features.rope) grad_features = rope_apply_inverse(grad_features, params.features.rope_base);

        add_inplace(grad_values, grad_features);
        scatter_head(g.x, grad_values, b, h, heads);
    });
    for (std::size_t item = 0; item < batch * heads; ++item) g.log_sigma[item % heads] += sigma_grad_items[item];
    return g;
}

#define GKA_INSTANTIATE_KERNEL_ATTENTION(T)                                                                    \
    template struct GkaLayerParams<T>;                                                                         \
    template class AttentionCapture<T>;                                                                        \
    template Tensor<T> pairwise_sqdist(const Tensor<T>&);                                                      \
    template Tensor<T> gka_affinity(const Tensor<T>&, T);                                                      \
    template Tensor<T> masked_row_normalize(const Tensor<T>&, const LayerMask&, T);                            \
    template Tensor<T> masked_row_normalize(const Tensor<T>&, std::span<const std::uint8_t>, T);               \
    template Tensor<T> rope_apply(const Tensor<T>&, double);                                                   \
    template Tensor<T> rope_apply_inverse(const Tensor<T>&, double);                                           \
    template Tensor<T> unit_normalize_rows(const Tensor<T>&);                                                  \
    template Tensor<T> kernel_features(const Tensor<T>&, const FeatureTransform&);                             \
    template Tensor<T> gather_head(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                   \
    template void scatter_head(Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t, bool);     \
    template Tensor<T> gka_forward(const Tensor<T>&, const GkaLayerParams<T>&, const MaskSpec&, std::size_t,   \
                                   AttentionCapture<T>*);                                                      \
    template GkaGrads<T> gka_backward(const Tensor<T>&, const GkaLayerParams<T>&, const MaskSpec&,             \
                                      std::size_t, const Tensor<T>&);

GKA_INSTANTIATE_KERNEL_ATTENTION(float)
GKA_INSTANTIATE_KERNEL_ATTENTION(double)

}  // namespace gka
