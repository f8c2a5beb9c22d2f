#pragma once

// Tiled GKA forward pass. The N x N affinity matrix is never materialized:
// each query tile streams over key tiles and keeps a d-dim numerator and a
// scalar denominator per query row.
//
// A single accumulation pass is enough. Every kernel value lies in (0, 1]
// and the self term (distance 0, always allowed) contributes exactly 1, so
// the denominator is >= 1 and no running max or rescaling is needed, unlike
// online softmax.

#include <cstddef>

#include "gka/kernel_attention.hpp"
#include "gka/tensor.hpp"

namespace gka {

struct TileConfig {
    std::size_t tile_rows = 64;
    std::size_t tile_cols = 64;
    bool track_workspace = true;

    void validate() const;
};

/// Transient buffers of one work item (batch, head, query tile).
///
/// Per worker the path holds a tile_rows x tile_cols kernel tile, the
/// transformed query and key features (tile_rows x d, tile_cols x d), the
/// numerator (tile_rows x d), squared norms for both tiles, and the
/// denominators (tile_rows doubles). peak_elements counts scalars of the
/// working type; the double denominators count as two each for float.
struct WorkspaceStats {
    std::size_t peak_elements = 0;
    std::size_t peak_bytes = 0;
    std::size_t work_items = 0;
    std::size_t key_tiles_visited = 0;
    std::size_t max_key_tiles_per_query_tile = 0;
};

/// Upper bound on peak_elements: 2 (tile_rows * tile_cols + tile_rows * d)
/// plus the key-feature and norm buffers, i.e. independent of N.
std::size_t streaming_workspace_bound(const TileConfig& tiles, std::size_t head_dim);

template <typename T>
Tensor<T> gka_forward_streaming(const Tensor<T>& x, const GkaLayerParams<T>& params, const MaskSpec& mask,
                                std::size_t layer_index, const TileConfig& tiles = {},
                                WorkspaceStats* stats = nullptr);

}  // namespace gka
