#include "gka/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace gka {

// The kernels below block four output rows at a time so each loaded row of
// the right operand is reused four times. Accumulation over k stays in
// ascending order per output element.

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
    if (!accumulate) std::fill_n(out.begin(), m * n, T{0});
    const T* A = a.data();
    const T* B = b.data();
    T* C = out.data();
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict r0 = C + i * n;
        T* __restrict r1 = r0 + n;
        T* __restrict r2 = r1 + n;
        T* __restrict r3 = r2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const T a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
            const T* __restrict br = B + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T bv = br[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict row = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            const T* __restrict br = B + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * br[j];
        }
    }
}

template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            // four partial sums break the dependency chain of a dot product
            T s0{0}, s1{0}, s2{0}, s3{0};
            std::size_t p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += arow[p] * brow[p];
                s1 += arow[p + 1] * brow[p + 1];
                s2 += arow[p + 2] * brow[p + 2];
                s3 += arow[p + 3] * brow[p + 3];
            }
            for (; p < k; ++p) s0 += arow[p] * brow[p];
            const T acc = (s0 + s1) + (s2 + s3);
            if (accumulate)
                out[i * n + j] += acc;
            else
                out[i * n + j] = acc;
        }
    }
}

template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    if (!accumulate) std::fill_n(out.begin(), k * n, T{0});
    const T* A = a.data();
    const T* B = b.data();
    T* C = out.data();
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
        T* __restrict o0 = C + p * n;
        T* __restrict o1 = o0 + n;
        T* __restrict o2 = o1 + n;
        T* __restrict o3 = o2 + n;
        for (std::size_t r = 0; r < m; ++r) {
            const T* ar = A + r * k + p;
            const T a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
            const T* __restrict br = B + r * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T bv = br[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
    }
    for (; p < k; ++p) {
        T* __restrict orow = C + p * n;
        for (std::size_t r = 0; r < m; ++r) {
            const T av = A[r * k + p];
            const T* __restrict br = B + r * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    Tensor<T> out({a.dim(0), b.dim(1)});
    gemm<T>(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    const std::size_t in = w.dim(0), out_dim = w.dim(1);
    const std::size_t rows = x.size() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor<T> y(out_shape);
    gemm<T>(x.data(), w.data(), y.data(), rows, in, out_dim);
    if (!bias.empty()) {
        expect_shape(bias, {out_dim}, "linear bias");
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) y[r * out_dim + j] += bias[j];
    }
    return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y, Tensor<T>& grad_w,
                          Tensor<T>* grad_b) {
    const std::size_t in = w.dim(0), out_dim = w.dim(1);
    const std::size_t rows = x.size() / in;
    if (grad_y.size() != rows * out_dim) {
        throw ShapeError("linear_backward: grad " + shape_str(grad_y.shape()) + " vs input " +
                         shape_str(x.shape()));
    }
    gemm_tn<T>(x.data(), grad_y.data(), grad_w.data(), rows, in, out_dim, true);
    if (grad_b && !grad_b->empty()) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) (*grad_b)[j] += grad_y[r * out_dim + j];
    }
    Tensor<T> grad_x(x.shape());
    gemm_nt<T>(grad_y.data(), w.data(), grad_x.data(), rows, out_dim, in);
    return grad_x;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t d = x.shape().back();
    if (!gamma.empty()) expect_shape(gamma, {d}, "layer_norm gamma");
    if (!beta.empty()) expect_shape(beta, {d}, "layer_norm beta");
    const std::size_t rows = x.size() / d;
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * d;
        T* out = y.data().data() + r * d;
        T mean{0};
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<T>(d);
        const T denom = std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            // zero-variance rows give 0/denom = 0 as long as eps > 0
            T v = (in[j] - mean) / denom;
            if (!gamma.empty()) v *= gamma[j];
            if (!beta.empty()) v += beta[j];
            out[j] = v;
        }
    }
    return y;
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& grad_y,
                              Tensor<T>* grad_gamma, Tensor<T>* grad_beta, T eps) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    Tensor<T> grad_x(x.shape());
    std::vector<T> xhat(d), gxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * d;
        const T* gy = grad_y.data().data() + r * d;
        T* gx = grad_x.data().data() + r * d;
        T mean{0};
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<T>(d);
        const T inv_std = T{1} / std::sqrt(var + eps);
        T mean_g{0}, mean_gx{0};
        for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (in[j] - mean) * inv_std;
            gxhat[j] = gamma.empty() ? gy[j] : gy[j] * gamma[j];
            if (grad_gamma && !grad_gamma->empty()) (*grad_gamma)[j] += gy[j] * xhat[j];
            if (grad_beta && !grad_beta->empty()) (*grad_beta)[j] += gy[j];
            mean_g += gxhat[j];
            mean_gx += gxhat[j] * xhat[j];
        }
        mean_g /= static_cast<T>(d);
        mean_gx /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) gx[j] = inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx);
    }
    return grad_x;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * n;
        T* out = y.data().data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(in[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(r));
            mx = std::max(mx, in[j]);
        }
        T sum{0};
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
    }
    return y;
}

namespace {
template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);
}  // namespace

namespace {

template <typename T>
T sigmoid(T z) {
    if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
    const T e = std::exp(z);
    return e / (T{1} + e);
}

}  // namespace

// 0.5 v (1 + tanh(u)) is evaluated as v * sigmoid(2u): same function, but no
// cancellation in 1 + tanh(u) for saturated negative inputs.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        y[i] = v * sigmoid(T{2} * kGeluC<T> * (v + kGeluA<T> * v * v * v));
    }
    return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        const T z = T{2} * kGeluC<T> * (v + kGeluA<T> * v * v * v);
        const T s = sigmoid(z), sc = sigmoid(-z);
        const T dz = T{2} * kGeluC<T> * (T{1} + T{3} * kGeluA<T> * v * v);
        g[i] = grad_y[i] * (s + v * s * sc * dz);
    }
    return g;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
void scale_inplace(Tensor<T>& a, T s) {
    for (auto& v : a.data()) v *= s;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor) {
    if (a.size() != b.size()) throw ShapeError("max_rel_diff: size mismatch");
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        const double denom = std::max({std::abs(x), std::abs(y), floor});
        m = std::max(m, std::abs(x - y) / denom);
    }
    return m;
}

template <typename T>
double norm_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) throw ShapeError("norm_rel_diff: size mismatch");
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        scale = std::max(scale, std::abs(static_cast<double>(b[i])));
    }
    return diff == 0 ? 0.0 : diff / scale;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

#define GKA_INSTANTIATE_OPS(T)                                                                                 \
    template void gemm<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,     \
                          std::size_t, bool);                                                                  \
    template void gemm_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,  \
                             std::size_t, bool);                                                               \
    template void gemm_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,  \
                             std::size_t, bool);                                                               \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,       \
                                       Tensor<T>*);                                                            \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                    \
    template Tensor<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,   \
                                           Tensor<T>*, T);                                                     \
    template Tensor<T> softmax_rows(const Tensor<T>&);                                                         \
    template Tensor<T> gelu(const Tensor<T>&);                                                                 \
    template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                                      \
    template void add_inplace(Tensor<T>&, const Tensor<T>&);                                                   \
    template void scale_inplace(Tensor<T>&, T);                                                                \
    template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);                                               \
    template double max_rel_diff(const Tensor<T>&, const Tensor<T>&, double);                                  \
    template double norm_rel_diff(const Tensor<T>&, const Tensor<T>&);                                         \
    template bool all_finite(const Tensor<T>&);

GKA_INSTANTIATE_OPS(float)
GKA_INSTANTIATE_OPS(double)

}  // namespace gka
