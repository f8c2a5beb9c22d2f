#include "gka/streaming.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "gka/errors.hpp"
#include "gka/ops.hpp"
#include "gka/parallel.hpp"

namespace gka {

void TileConfig::validate() const {
    if (tile_rows < 1 || tile_cols < 1) throw ParameterError("tile sizes must be >= 1");
}

std::size_t streaming_workspace_bound(const TileConfig& tiles, std::size_t head_dim) {
    const std::size_t r = tiles.tile_rows, c = tiles.tile_cols;
    return 2 * (r * c + r * head_dim) + c * head_dim + 2 * (r + c) + 2 * r;
}

namespace {

/// Kernel features of one token of one head, written into out[0..d).
/// Mirrors rope_apply followed by unit_normalize_rows.
template <typename T>
void feature_row(const Tensor<T>& x, std::size_t b, std::size_t pos, std::size_t h, std::size_t d,
                 const FeatureTransform& ft, T* out) {
    const T* src = &x.at(b, pos, h * d);
    if (ft.rope) {
        for (std::size_t m = 0; m < d / 2; ++m) {
            const double theta = std::pow(ft.rope_base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * theta;
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            const T a = src[2 * m], bb = src[2 * m + 1];
            out[2 * m] = a * c - bb * s;
            out[2 * m + 1] = a * s + bb * c;
        }
    } else {
        std::copy(src, src + d, out);
    }
    if (ft.unit_norm) {
        T sq{0};
        for (std::size_t j = 0; j < d; ++j) sq += out[j] * out[j];
        const T norm = std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) out[j] = norm > T{0} ? out[j] / norm : T{0};
    }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t d) {
    T s{0};
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
}

struct ItemStats {
    std::size_t elements = 0;
    std::size_t bytes = 0;
    std::size_t key_tiles = 0;
};

}  // namespace

template <typename T>
Tensor<T> gka_forward_streaming(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                                std::size_t layer_index, const TileConfig& tiles, WorkspaceStats* stats) {
    params.validate();
    tiles.validate();
    const std::size_t d_model = params.width(), heads = params.heads();
    if (x.rank() != 3 || x.dim(2) != d_model) {
        throw ShapeError("GKA input must be [B x N x " + std::to_string(d_model) + "], got " + shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), n = x.dim(1), d = d_model / heads;
    if (params.features.rope && d % 2 != 0) {
        throw ParameterError("rope requires an even head dimension, got " + std::to_string(d));
    }
    const LayerMask lm = mask.resolve(layer_index);
    const std::size_t tr = tiles.tile_rows, tc = tiles.tile_cols;
    const std::size_t q_tiles = (n + tr - 1) / tr;
    const std::size_t items = batch * heads * q_tiles;

    Tensor<T> mixed(x.shape());
    std::vector<ItemStats> item_stats(items);
    parallel_for(items, [&](std::size_t item) {
        const std::size_t qt = item % q_tiles, bh = item / q_tiles;
        const std::size_t b = bh / heads, h = bh % heads;
        const T sigma = params.sigma(h);
        const T scale = T{1} / (T{2} * sigma * sigma);
        const std::size_t q0 = qt * tr, q1 = std::min(n, q0 + tr), rows = q1 - q0;

        std::vector<T> qf(rows * d), kf(tc * d), qn(rows), kn(tc), ktile(rows * tc);
        std::vector<T> num(rows * d, T{0});
        std::vector<double> den(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            feature_row(x, b, q0 + r, h, d, params.features, &qf[r * d]);
            qn[r] = dot(&qf[r * d], &qf[r * d], d);
        }

        // keys any row of this tile may see; fully masked key tiles are skipped
        const std::size_t k_first = lm.key_range(q0, n).first;
        const std::size_t k_last = lm.key_range(q1 - 1, n).second;
        std::size_t visited = 0;
        for (std::size_t kt = k_first / tc; kt * tc < k_last; ++kt) {
            const std::size_t k0 = kt * tc, k1 = std::min(n, k0 + tc), cols = k1 - k0;
            ++visited;
            for (std::size_t c = 0; c < cols; ++c) {
                feature_row(x, b, k0 + c, h, d, params.features, &kf[c * d]);
                kn[c] = dot(&kf[c * d], &kf[c * d], d);
            }
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t i = q0 + r;
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t j = k0 + c;
                    T& kv = ktile[r * tc + c];
                    if (!lm.allowed(i, j)) {
                        kv = T{0};
                        continue;
                    }
                    const T dist = i == j ? T{0} : std::max(qn[r] + kn[c] - T{2} * dot(&qf[r * d], &kf[c * d], d), T{0});
                    kv = std::exp(-dist * scale);
                    den[r] += static_cast<double>(kv);
                }
                // values are the untransformed head features
                T* acc = &num[r * d];
                for (std::size_t c = 0; c < cols; ++c) {
                    const T kv = ktile[r * tc + c];
                    if (kv == T{0}) continue;
                    const T* v = &x.at(b, k0 + c, h * d);
                    for (std::size_t k = 0; k < d; ++k) acc[k] += kv * v[k];
                }
            }
        }
        for (std::size_t r = 0; r < rows; ++r) {
            const double inv = 1.0 / (den[r] + static_cast<double>(params.epsilon));
            T* dst = &mixed.at(b, q0 + r, h * d);
            for (std::size_t k = 0; k < d; ++k) dst[k] = static_cast<T>(static_cast<double>(num[r * d + k]) * inv);
        }

        if (tiles.track_workspace) {
            const std::size_t scalars = ktile.size() + qf.size() + kf.size() + qn.size() + kn.size() + num.size();
            const std::size_t den_units = den.size() * sizeof(double) / sizeof(T);
            item_stats[item] = {scalars + den_units, scalars * sizeof(T) + den.size() * sizeof(double), visited};
        } else {
            item_stats[item].key_tiles = visited;
        }
    });

    if (stats) {
        WorkspaceStats s;
        s.work_items = items;
        for (const auto& it : item_stats) {
            s.peak_elements = std::max(s.peak_elements, it.elements);
            s.peak_bytes = std::max(s.peak_bytes, it.bytes);
            s.key_tiles_visited += it.key_tiles;
            s.max_key_tiles_per_query_tile = std::max(s.max_key_tiles_per_query_tile, it.key_tiles);
        }
        *stats = s;
    }
    return linear(mixed, params.w_o, params.b_o);
}

template Tensor<float> gka_forward_streaming(const Tensor<float>&, const GkaLayerParams<float>&, const MaskSpec&,
                                             std::size_t, const TileConfig&, WorkspaceStats*);
template Tensor<double> gka_forward_streaming(const Tensor<double>&, const GkaLayerParams<double>&,
                                              const MaskSpec&, std::size_t, const TileConfig&, WorkspaceStats*);

}  // namespace gka
