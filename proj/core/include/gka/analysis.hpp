#pragma once

// Attention analysis products: rollout, CLS and patch maps, sigma tables,
// raw mixing matrices and per-layer kernel evolution, plus CSV/PGM writers.
//
// All functions take a double-precision capture of one forward pass. Token 0
// is the class token and tokens 1..P*P are patches in row-major grid order.

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gka/kernel_attention.hpp"
#include "gka/model.hpp"
#include "gka/tensor.hpp"

namespace gka {

struct RolloutConfig {
    std::vector<double> discard_ratios{0.0, 0.5, 0.9};
    double residual_weight = 0.5;

    void validate() const;
};

/// Head-averaged mixing matrix of one layer.
Tensor<double> head_average(const AttentionCapture<double>& capture, std::size_t layer, std::size_t batch = 0);

/// Residual mixing, optional thresholding and row renormalization of one
/// head-averaged matrix. The discard step zeroes the floor(ratio * m)
/// smallest off-diagonal entries (m = off-diagonal count, ties broken by
/// position); a ratio of 0 skips it entirely.
Tensor<double> rollout_step(const Tensor<double>& mean_attention, double discard_ratio, double residual_weight = 0.5);

/// R = A(L-1) ... A(1) A(0) over every captured layer (which must be 0..L-1).
Tensor<double> rollout_matrix(const AttentionCapture<double>& capture, double discard_ratio,
                              double residual_weight = 0.5, std::size_t batch = 0);

struct RolloutGrid {
    double ratio = 0.0;
    Tensor<double> grid;  // P x P
};

/// CLS row of the rollout, without the CLS entry, as a P x P grid per ratio.
std::vector<RolloutGrid> attention_rollout(const AttentionCapture<double>& capture, const RolloutConfig& config,
                                           std::size_t grid, std::size_t batch = 0);

/// Row 0, columns 1..P*P of one head's matrix, reshaped P x P.
Tensor<double> cls_attention_map(const AttentionCapture<double>& capture, std::size_t layer, std::size_t head,
                                 std::size_t grid, std::size_t batch = 0);

struct PatchQuery {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t token = 0;  // 1 + row * P + col
};

/// (P/4, P/4), (P/2, P/2), (3P/4, 3P/4), (P/4, 3P/4) with floor division.
std::array<PatchQuery, 4> canonical_queries(std::size_t grid);

struct PatchMaps {
    std::array<PatchQuery, 4> queries;
    std::array<Tensor<double>, 4> grids;  // head-averaged rows over patch tokens
};

PatchMaps patch_attention_maps(const AttentionCapture<double>& capture, std::size_t layer, std::size_t grid,
                               std::size_t batch = 0);

/// sigma = exp(log sigma) as an L x H table; empty for non-GKA models.
template <typename T>
Tensor<double> sigma_report(const Model<T>& model);

/// round(linspace(0, n - 1, max_tokens)) when n > max_tokens, else 0..n-1.
std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t max_tokens);

struct RawMatrix {
    std::vector<std::size_t> indices;  // token indices kept
    Tensor<double> values;
};

RawMatrix raw_matrix_export(const AttentionCapture<double>& capture, std::size_t layer, std::size_t head,
                            bool mask_diagonal = true, std::size_t max_tokens = 50, std::size_t batch = 0);

struct EvolutionLayer {
    std::size_t layer = 0;
    Tensor<double> matrix;    // head-averaged N x N
    Tensor<double> cls_grid;  // head-averaged CLS row, P x P
};

/// One entry per captured layer. Throws InputError on an empty capture.
std::vector<EvolutionLayer> kernel_evolution_export(const AttentionCapture<double>& capture, std::size_t grid,
                                                    std::size_t batch = 0);

// ---- writers ----------------------------------------------------------------

/// Rows of comma-separated values with 9 significant digits.
void write_csv(std::ostream& out, const Tensor<double>& matrix);
void write_csv(const std::filesystem::path& path, const Tensor<double>& matrix);
Tensor<double> read_csv(const std::filesystem::path& path);

/// 8-bit binary PGM, min-max normalized; a constant matrix maps to 0.
void write_pgm(const std::filesystem::path& path, const Tensor<double>& matrix);

/// "0.0", "0.5", "0.25": shortest form with at least one decimal.
std::string ratio_label(double ratio);

struct ExportOptions {
    RolloutConfig rollout;
    std::size_t max_tokens = 50;
    std::size_t batch = 0;
};

/// Writes the full analysis tree for a captured ViT forward pass into dir and
/// returns the file names written (relative to dir).
template <typename T>
std::vector<std::string> export_analysis(const Model<T>& model, const AttentionCapture<double>& capture,
                                         const std::filesystem::path& dir, const ExportOptions& options = {});

}  // namespace gka
