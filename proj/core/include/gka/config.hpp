#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "gka/kernel_attention.hpp"

namespace gka {

enum class ModelFamily { vit, causal_lm };
enum class AttentionKind { gka, standard, vlt };

std::string to_string(ModelFamily f);
std::string to_string(AttentionKind k);

/// Architecture description shared by the counters and the model assemblies.
struct ModelConfig {
    std::string name = "custom";
    ModelFamily family = ModelFamily::vit;
    std::size_t depth = 12;
    std::size_t heads = 3;
    std::size_t width = 192;
    std::size_t mlp_ratio = 4;
    AttentionKind attention = AttentionKind::gka;

    // vision
    std::size_t image_size = 224;
    std::size_t patch_size = 16;
    std::size_t channels = 3;
    std::size_t num_classes = 1000;
    bool use_cls = true;

    // language model
    std::size_t vocab_size = 32768;
    std::size_t seq_len = 2048;
    MaskSpec mask;

    bool linear_bias = true;
    bool norm_affine = true;
    double drop_path_rate = 0.0;

    // rope + per-head unit norm before distances (GKA only)
    bool feature_norm = false;
    double rope_base = 10000.0;
    double init_log_sigma = 0.0;

    void validate() const;
    std::size_t head_dim() const { return width / heads; }
    std::size_t mlp_hidden() const { return width * mlp_ratio; }
    /// Patch grid side P (vision only).
    std::size_t grid() const { return image_size / patch_size; }
    /// Tokens per sequence: P^2 (+1 with CLS) for vision, seq_len for LMs.
    std::size_t tokens() const;
    FeatureTransform feature_transform() const;

    bool operator==(const ModelConfig&) const;
};

ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// key=value lines; '#' starts a comment. A leading `preset = name` seeds the
/// config from that preset before the remaining keys override it.
ModelConfig parse_config(std::string_view text);
std::string format_config(const ModelConfig& config);
ModelConfig load_config_file(const std::string& path);

}  // namespace gka
