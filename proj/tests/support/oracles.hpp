#pragma once

// Reference implementations for tests. Everything here is written with plain
// loops straight from the definitions and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "gka/baseline_attention.hpp"
#include "gka/kernel_attention.hpp"
#include "gka/tensor.hpp"

namespace oracle {

using gka::Tensor;

template <typename T = double>
Tensor<T> randn(const gka::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

// |x_i - x_j|^2 summed coordinate by coordinate.
inline std::vector<double> sqdist(const std::vector<double>& x, std::size_t n, std::size_t d) {
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double t = x[i * d + c] - x[j * d + c];
                s += t * t;
            }
            out[i * n + j] = s;
        }
    return out;
}

inline bool allowed(gka::MaskKind kind, std::size_t window, std::size_t i, std::size_t j) {
    if (kind == gka::MaskKind::none) return true;
    if (j > i) return false;
    return kind == gka::MaskKind::causal || i - j < window;
}

// Head slice rows of x [B x N x D] as doubles.
template <typename T>
std::vector<double> head_slice(const Tensor<T>& x, std::size_t b, std::size_t h, std::size_t d) {
    const std::size_t n = x.dim(1), width = x.dim(2);
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = static_cast<double>(x[(b * n + i) * width + h * d + c]);
    return out;
}

// Rotation of pair (2m, 2m+1) at position p by p * base^(-2m/d).
inline std::vector<double> rope(const std::vector<double>& x, std::size_t n, std::size_t d, double base) {
    std::vector<double> out(x);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t m = 0; m < d / 2; ++m) {
            const double ang = static_cast<double>(p) / std::pow(base, 2.0 * static_cast<double>(m) / static_cast<double>(d));
            const double a = x[p * d + 2 * m], b = x[p * d + 2 * m + 1];
            out[p * d + 2 * m] = a * std::cos(ang) - b * std::sin(ang);
            out[p * d + 2 * m + 1] = a * std::sin(ang) + b * std::cos(ang);
        }
    return out;
}

inline std::vector<double> unit_rows(std::vector<double> x, std::size_t n, std::size_t d) {
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * x[i * d + c];
        const double norm = std::sqrt(s);
        for (std::size_t c = 0; c < d; ++c) x[i * d + c] = norm > 0 ? x[i * d + c] / norm : 0.0;
    }
    return x;
}

// Mixing matrix of one GKA head, literally exp(-|f_i - f_j|^2 / 2 sigma^2)
// masked and divided by the row sum plus eps.
inline std::vector<double> gka_weights(const std::vector<double>& feats, std::size_t n, std::size_t d, double sigma,
                                       gka::MaskKind kind, std::size_t window, double eps) {
    const std::vector<double> dist = sqdist(feats, n, d);
    std::vector<double> w(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (allowed(kind, window, i, j)) z += std::exp(-dist[i * n + j] / (2.0 * sigma * sigma));
        for (std::size_t j = 0; j < n; ++j)
            if (allowed(kind, window, i, j)) w[i * n + j] = std::exp(-dist[i * n + j] / (2.0 * sigma * sigma)) / (z + eps);
    }
    return w;
}

// Full GKA layer: per head W * X_h on raw head features, concat, then W_O + b_O.
template <typename T>
Tensor<double> gka_layer(const Tensor<T>& x, const gka::GkaLayerParams<T>& p, const gka::LayerMask& mask) {
    const std::size_t batch = x.dim(0), n = x.dim(1), width = x.dim(2), heads = p.heads(), d = width / heads;
    std::vector<double> mixed(batch * n * width);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            const std::vector<double> vals = head_slice(x, b, h, d);
            std::vector<double> feats = vals;
            if (p.features.rope) feats = rope(feats, n, d, p.features.rope_base);
            if (p.features.unit_norm) feats = unit_rows(feats, n, d);
            const double sigma = std::exp(static_cast<double>(p.log_sigma[h]));
            const std::vector<double> w =
                gka_weights(feats, n, d, sigma, mask.kind, mask.window, static_cast<double>(p.epsilon));
            const std::vector<double> y = matmul(w, vals, n, n, d);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) mixed[(b * n + i) * width + h * d + c] = y[i * d + c];
        }
    Tensor<double> out({batch, n, width});
    for (std::size_t r = 0; r < batch * n; ++r)
        for (std::size_t j = 0; j < width; ++j) {
            double s = p.b_o.empty() ? 0.0 : static_cast<double>(p.b_o[j]);
            for (std::size_t c = 0; c < width; ++c) s += mixed[r * width + c] * static_cast<double>(p.w_o[c * width + j]);
            out[r * width + j] = s;
        }
    return out;
}

inline std::vector<double> linear_rows(const std::vector<double>& x, std::size_t rows, const Tensor<double>& w,
                                       const Tensor<double>& b) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    std::vector<double> y = matmul(x, w.values(), rows, in, out);
    if (!b.empty())
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out; ++j) y[r * out + j] += b[j];
    return y;
}

// Scaled dot-product attention with per-head softmax over allowed keys only.
inline Tensor<double> mha_layer(const Tensor<double>& x, const gka::MhaLayerParams<double>& p,
                                const gka::LayerMask& mask) {
    const std::size_t batch = x.dim(0), n = x.dim(1), width = x.dim(2), heads = p.heads(), d = width / heads;
    const std::vector<double> q = linear_rows(x.values(), batch * n, p.w_q, p.b_q);
    const std::vector<double> k = linear_rows(x.values(), batch * n, p.w_k, p.b_k);
    const std::vector<double> v =
        p.variant == gka::MhaVariant::standard ? linear_rows(x.values(), batch * n, p.w_v, p.b_v) : x.values();
    std::vector<double> mixed(batch * n * width, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> s(n, -INFINITY);
                double mx = -INFINITY;
                for (std::size_t j = 0; j < n; ++j) {
                    if (!allowed(mask.kind, mask.window, i, j)) continue;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < d; ++c)
                        dot += q[(b * n + i) * width + h * d + c] * k[(b * n + j) * width + h * d + c];
                    s[j] = dot / std::sqrt(static_cast<double>(d));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < n; ++j) z += std::isinf(s[j]) ? 0.0 : std::exp(s[j] - mx);
                for (std::size_t j = 0; j < n; ++j) {
                    if (std::isinf(s[j])) continue;
                    const double a = std::exp(s[j] - mx) / z;
                    for (std::size_t c = 0; c < d; ++c)
                        mixed[(b * n + i) * width + h * d + c] += a * v[(b * n + j) * width + h * d + c];
                }
            }
    Tensor<double> out({batch, n, width}, linear_rows(mixed, batch * n, p.w_o, p.b_o));
    return out;
}

inline double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
double max_abs(const Tensor<T>& a, const Tensor<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

// Random GKA layer parameters with sigma near the typical feature distance.
template <typename T>
gka::GkaLayerParams<T> random_gka(std::size_t width, std::size_t heads, std::mt19937_64& rng, bool bias = true) {
    gka::GkaLayerParams<T> p;
    std::uniform_real_distribution<double> ls(-0.3, 1.2);
    p.log_sigma = Tensor<T>({heads});
    for (auto& v : p.log_sigma.data()) v = static_cast<T>(ls(rng));
    p.w_o = randn<T>({width, width}, rng, 1.0 / std::sqrt(static_cast<double>(width)));
    if (bias) p.b_o = randn<T>({width}, rng, 0.1);
    return p;
}

inline gka::MhaLayerParams<double> random_mha(std::size_t width, std::size_t heads, std::mt19937_64& rng,
                                              gka::MhaVariant variant = gka::MhaVariant::standard) {
    gka::MhaLayerParams<double> p;
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    p.num_heads = heads;
    p.variant = variant;
    p.w_q = randn({width, width}, rng, s);
    p.b_q = randn({width}, rng, 0.1);
    p.w_k = randn({width, width}, rng, s);
    p.b_k = randn({width}, rng, 0.1);
    if (variant == gka::MhaVariant::standard) {
        p.w_v = randn({width, width}, rng, s);
        p.b_v = randn({width}, rng, 0.1);
    }
    p.w_o = randn({width, width}, rng, s);
    p.b_o = randn({width}, rng, 0.1);
    return p;
}

// Matrix product of square row-major matrices.
inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    return Tensor<double>({n, m}, matmul(a.values(), b.values(), n, k, m));
}

// Residual mixing and row normalization without any thresholding, multiplied
// left to right as A(L-1) ... A(0), written in plain loops.
inline Tensor<double> rollout(const gka::AttentionCapture<double>& cap, std::size_t layers, std::size_t heads, double w) {
    const std::size_t n = cap.num_tokens(0);
    Tensor<double> r;
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor<double> a({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double mean = cap.weights(l, 0).at(i, j);
                for (std::size_t h = 1; h < heads; ++h) mean += cap.weights(l, h).at(i, j);
                mean /= static_cast<double>(heads);
                a.at(i, j) = (1.0 - w) * mean + (i == j ? w : 0.0);
            }
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
            for (std::size_t j = 0; j < n; ++j) a.at(i, j) /= s;
        }
        if (l == 0) {
            r = a;
            continue;
        }
        Tensor<double> next({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < n; ++k) s += a.at(i, k) * r.at(k, j);
                next.at(i, j) = s;
            }
        r = next;
    }
    return r;
}

}  // namespace oracle
