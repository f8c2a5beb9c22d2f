#pragma once

// Gaussian kernel attention: per-head RBF affinities on the raw per-head
// features, masked row normalization, diffusion, and an output projection.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gka/tensor.hpp"

namespace gka {

enum class MaskKind { none, causal, causal_window };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& text);

/// Mask resolved for one layer.
struct LayerMask {
    MaskKind kind = MaskKind::none;
    std::size_t window = 1;

    bool allowed(std::size_t i, std::size_t j) const noexcept {
        switch (kind) {
            case MaskKind::none: return true;
            case MaskKind::causal: return j <= i;
            case MaskKind::causal_window: return j <= i && j + window > i;
        }
        return true;
    }

    /// Half-open range [first, last) of keys query i may see among n tokens.
    std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t n) const noexcept {
        switch (kind) {
            case MaskKind::none: return {0, n};
            case MaskKind::causal: return {0, i + 1};
            case MaskKind::causal_window: return {i + 1 > window ? i + 1 - window : 0, i + 1};
        }
        return {0, n};
    }
};

/// Declarative mask with an optional per-layer S/L schedule.
///
/// With a non-empty layer_pattern and kind != none, layer l uses the character
/// at l mod pattern length: 'L' is full causal, 'S' is causal with `window`.
struct MaskSpec {
    MaskKind kind = MaskKind::none;
    std::size_t window = 1;
    std::string layer_pattern;

    void validate() const;
    LayerMask resolve(std::size_t layer_index) const;

    static MaskSpec none() { return {}; }
    static MaskSpec causal() { return {MaskKind::causal, 1, {}}; }
    static MaskSpec causal_window(std::size_t w) { return {MaskKind::causal_window, w, {}}; }
};

/// Preprocessing applied to per-head features before distances (causal mode).
/// Values are always the untransformed per-head features.
struct FeatureTransform {
    bool rope = false;
    bool unit_norm = false;
    double rope_base = 10000.0;
};

template <typename T>
constexpr T default_epsilon() {
    if constexpr (sizeof(T) >= 8)
        return static_cast<T>(1e-12);
    else
        return static_cast<T>(1e-6);
}

template <typename T>
struct GkaLayerParams {
    Tensor<T> log_sigma;  // [H], sigma_h = exp(log_sigma[h])
    Tensor<T> w_o;        // [D x D], y = concat(heads) w_o + b_o
    Tensor<T> b_o;        // [D] or empty
    T epsilon = default_epsilon<T>();
    FeatureTransform features;

    std::size_t heads() const noexcept { return log_sigma.size(); }
    std::size_t width() const noexcept { return w_o.empty() ? 0 : w_o.dim(0); }
    T sigma(std::size_t h) const;
    void validate() const;
};

template <typename T>
struct HeadMatrices {
    Tensor<T> weights;  // row-stochastic W, N x N
    Tensor<T> kernel;   // raw K, only when the capture keeps kernels
};

/// Per layer and head mixing matrices recorded during a forward pass.
template <typename T>
class AttentionCapture {
  public:
    explicit AttentionCapture(bool keep_kernel = false) : keep_kernel_(keep_kernel) {}

    bool keep_kernel() const noexcept { return keep_kernel_; }

    void record(std::size_t layer, std::size_t batch, std::size_t head, Tensor<T> weights, Tensor<T> kernel = {});

    bool empty() const noexcept { return layers_.empty(); }
    bool has_layer(std::size_t layer) const { return layers_.count(layer) != 0; }
    std::vector<std::size_t> layer_indices() const;
    std::size_t num_heads(std::size_t layer) const;
    std::size_t num_tokens(std::size_t layer) const;

    const Tensor<T>& weights(std::size_t layer, std::size_t head, std::size_t batch = 0) const;
    const Tensor<T>& kernel(std::size_t layer, std::size_t head, std::size_t batch = 0) const;

    template <typename U>
    AttentionCapture<U> cast() const {
        AttentionCapture<U> out(keep_kernel_);
        for (const auto& [layer, heads] : layers_) {
            for (const auto& [key, m] : heads) {
                out.record(layer, key.first, key.second, m.weights.template cast<U>(),
                           m.kernel.empty() ? Tensor<U>{} : m.kernel.template cast<U>());
            }
        }
        return out;
    }

  private:
    const HeadMatrices<T>& find(std::size_t layer, std::size_t head, std::size_t batch) const;

    bool keep_kernel_;
    std::map<std::size_t, std::map<std::pair<std::size_t, std::size_t>, HeadMatrices<T>>> layers_;
};

/// D_ij = |x_i - x_j|^2 via |a|^2 + |b|^2 - 2 a.b, clamped at 0, zero diagonal.
template <typename T>
Tensor<T> pairwise_sqdist(const Tensor<T>& x);

/// K_ij = exp(-D_ij / (2 sigma^2)).
template <typename T>
Tensor<T> gka_affinity(const Tensor<T>& x_head, T sigma);

/// W_ij = K_ij [allowed] / (sum_j' K_ij' [allowed] + eps).
template <typename T>
Tensor<T> masked_row_normalize(const Tensor<T>& k, const LayerMask& mask, T epsilon);

/// Same, with an explicit N x N allow-bitmap (nonzero = allowed). Rows with no
/// allowed entry raise NumericError.
template <typename T>
Tensor<T> masked_row_normalize(const Tensor<T>& k, std::span<const std::uint8_t> allowed, T epsilon);

/// Rotary position transform of rows 0..N-1 on consecutive dimension pairs.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x_head, double base = 10000.0);

/// Transpose (inverse) rotation, used for gradients.
template <typename T>
Tensor<T> rope_apply_inverse(const Tensor<T>& x_head, double base = 10000.0);

/// Per-row scaling to unit Euclidean norm; zero rows stay zero.
template <typename T>
Tensor<T> unit_normalize_rows(const Tensor<T>& x);

/// Features the kernel sees for one head (identity unless the transform is on).
template <typename T>
Tensor<T> kernel_features(const Tensor<T>& x_head, const FeatureTransform& transform);

/// Extracts head h of batch item b from x [B x N x D] as an N x d matrix.
template <typename T>
Tensor<T> gather_head(const Tensor<T>& x, std::size_t batch, std::size_t head, std::size_t heads);

template <typename T>
void scatter_head(Tensor<T>& x, const Tensor<T>& head_values, std::size_t batch, std::size_t head,
                  std::size_t heads, bool accumulate = false);

/// x: normalized tokens [B x N x D]. Returns [B x N x D].
template <typename T>
Tensor<T> gka_forward(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                      std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture = nullptr);

template <typename T>
struct GkaGrads {
    Tensor<T> x;
    Tensor<T> log_sigma;
    Tensor<T> w_o;
    Tensor<T> b_o;
};

/// Exact gradients of gka_forward; intermediates are recomputed from x.
template <typename T>
GkaGrads<T> gka_backward(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                         std::size_t layer_index, const Tensor<T>& grad_out);

/// Elements of N x N scratch the dense path allocates per (batch, head) item.
std::size_t naive_workspace_elements(std::size_t tokens, std::size_t head_dim);

}  // namespace gka
