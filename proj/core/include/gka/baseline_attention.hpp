#pragma once

// Reference dot-product attention: standard multi-head attention and the
// value-less (VLT) ablation that aggregates raw per-head features.

#include <cstddef>
#include <string>

#include "gka/kernel_attention.hpp"
#include "gka/tensor.hpp"

namespace gka {

enum class MhaVariant { standard, vlt };

template <typename T>
struct MhaLayerParams {
    Tensor<T> w_q, b_q;
    Tensor<T> w_k, b_k;
    Tensor<T> w_v, b_v;  // both empty for the vlt variant
    Tensor<T> w_o, b_o;
    std::size_t num_heads = 1;
    MhaVariant variant = MhaVariant::standard;

    std::size_t heads() const noexcept { return num_heads; }
    std::size_t width() const noexcept { return w_o.empty() ? 0 : w_o.dim(0); }
    void validate() const;
};

/// Additive pre-softmax penalty on disallowed pairs.
inline constexpr double kMaskPenalty = -1e9;

template <typename T>
Tensor<T> mha_forward(const Tensor<T>& x, const MhaLayerParams<T>& params, const MaskSpec& mask,
                      std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture = nullptr);

template <typename T>
struct MhaGrads {
    Tensor<T> x;
    Tensor<T> w_q, b_q, w_k, b_k;
    Tensor<T> w_v, b_v;  // empty for vlt
    Tensor<T> w_o, b_o;
};

template <typename T>
MhaGrads<T> mha_backward(const Tensor<T>& x, const MhaLayerParams<T>& params, const MaskSpec& mask,
                         std::size_t layer_index, const Tensor<T>& grad_out);

}  // namespace gka
