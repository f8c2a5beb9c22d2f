#pragma once

#include <cstddef>
#include <span>

#include "gka/tensor.hpp"

namespace gka {

// Raw row-major kernels. Each output element is accumulated over k in
// ascending order, so results are bit-reproducible.

/// out[m x n] = a[m x k] * b[k x n]; out is overwritten (or added to when accumulate).
template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate = false);

/// out[m x n] = a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

/// out[k x n] = a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// y = x W + b over the last axis of x. W is [in x out], bias may be empty.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Gradients of linear(); grad_w / grad_b are accumulated into.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y, Tensor<T>& grad_w,
                          Tensor<T>* grad_b);

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(kLayerNormEps));

/// Backward of layer_norm. An empty gamma means no affine transform.
template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& grad_y,
                              Tensor<T>* grad_gamma, Tensor<T>* grad_beta,
                              T eps = static_cast<T>(kLayerNormEps));

/// Row-wise softmax over the last axis, max-shifted. Throws NumericError on NaN.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void scale_inplace(Tensor<T>& a, T s);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12);

/// max |a - b| / max |b|. Zero when both are all zero.
template <typename T>
double norm_rel_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
bool all_finite(const Tensor<T>& a);

}  // namespace gka
