#pragma once

// Analytical parameter and FLOP accounting.
//
// Parameters: every linear layer carries a bias when linear_bias is set, every
// norm carries gamma/beta when norm_affine is set. GKA attention = W_O (+ b_O)
// plus one log-sigma per head.
//
// FLOPs (forward, one image or one token): a multiply-add is 2 FLOPs; bias
// adds, residual adds, exp, divide and activation evaluations are 1 FLOP per
// element; layer norm is 5 FLOPs per element; softmax is 4 per score (max
// subtract, exp, sum, divide); the GKA distance expansion costs the Gram
// product plus 3 per pair and 2 per token-feature for norms, the kernel 2 per
// pair (scale, exp) and the normalization 2 per pair (sum, divide).
//
// For causal LMs `train_flops_per_token` follows the reference LM codebase's
// estimator: 6 * (params - token embedding) + 12 * D * sum over layers of the
// attended context (window for S layers, seq_len for L layers).

#include <cstdint>
#include <string>
#include <vector>

#include "gka/config.hpp"

namespace gka {

struct CostEntry {
    std::string component;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;

    bool operator==(const CostEntry&) const = default;
};

struct CostReport {
    std::string model;
    std::uint64_t total_params = 0;
    std::uint64_t attn_params = 0;
    std::uint64_t mlp_params = 0;
    std::uint64_t sigma_params = 0;
    std::uint64_t embed_params = 0;
    std::uint64_t norm_params = 0;
    std::uint64_t head_params = 0;
    /// Forward FLOPs per image (vit) or per token (causal_lm).
    std::uint64_t flops_forward = 0;
    /// causal_lm only; 0 otherwise.
    std::uint64_t train_flops_per_token = 0;
    std::string flop_convention;
    std::vector<CostEntry> breakdown;

    bool operator==(const CostReport&) const = default;
};

/// Exact parameter counts; FLOP fields left at 0.
CostReport count_params(const ModelConfig& config);

/// Parameter counts plus forward FLOPs. `seq_or_image` overrides seq_len (LM)
/// or image_size (vision) when nonzero.
CostReport count_flops(const ModelConfig& config, std::size_t seq_or_image = 0);

/// Human-readable table.
std::string format_cost_table(const CostReport& report);

}  // namespace gka
