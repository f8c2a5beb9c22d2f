#include "gka/cost.hpp"

#include <cstdio>
#include <sstream>

namespace gka {

namespace {

using u64 = std::uint64_t;

constexpr const char* kConvention =
    "mult-add=2; bias/residual/exp/div/activation=1 per element; layernorm=5 per element; softmax=4 per score";

struct Counts {
    u64 attn = 0, sigma = 0, mlp = 0, norm = 0;
};

Counts block_params(const ModelConfig& c) {
    const u64 d = c.width, h = c.mlp_hidden();
    const u64 bias = c.linear_bias ? 1 : 0;
    Counts k;
    const u64 proj = d * d + bias * d;
    switch (c.attention) {
        case AttentionKind::gka:
            k.sigma = c.heads;
            k.attn = proj + k.sigma;
            break;
        case AttentionKind::standard: k.attn = 4 * proj; break;
        case AttentionKind::vlt: k.attn = 3 * proj; break;
    }
    k.mlp = d * h + bias * h + h * d + bias * d;
    k.norm = c.norm_affine ? 4 * d : 0;
    return k;
}

/// Forward FLOPs of one block over a sequence; `pairs` is the number of
/// allowed (query, key) pairs per head.
u64 block_flops(const ModelConfig& c, u64 n, u64 pairs) {
    const u64 d = c.width, hid = c.mlp_hidden(), heads = c.heads;
    const u64 bias = c.linear_bias ? 1 : 0;
    u64 f = 0;
    f += 2 * 5 * n * d;  // two layer norms
    f += 2 * n * d;      // two residual adds
    switch (c.attention) {
        case AttentionKind::gka:
            f += 2 * pairs * d;          // Gram products over all heads
            f += 2 * n * d;              // squared norms
            f += 3 * pairs * heads;      // |a|^2 + |b|^2 - 2ab
            f += 2 * pairs * heads;      // scale + exp
            f += 2 * pairs * heads;      // row sum + divide
            if (c.feature_norm) f += 6 * n * d;  // rope rotation + unit norm
            break;
        case AttentionKind::standard:
        case AttentionKind::vlt: {
            const u64 projections = c.attention == AttentionKind::standard ? 3 : 2;
            f += projections * (2 * n * d * d + bias * n * d);
            f += 2 * pairs * d;      // scores
            f += pairs * heads;      // 1/sqrt(d) scaling
            f += 4 * pairs * heads;  // softmax
            break;
        }
    }
    f += 2 * pairs * d;                   // weights x values
    f += 2 * n * d * d + bias * n * d;    // output projection
    f += 2 * n * d * hid + bias * n * hid;
    f += n * hid;                         // activation
    f += 2 * n * hid * d + bias * n * d;
    return f;
}

u64 allowed_pairs(const LayerMask& mask, u64 n) {
    u64 total = 0;
    for (u64 i = 0; i < n; ++i) {
        const auto [first, last] = mask.key_range(i, n);
        total += last - first;
    }
    return total;
}

void fill_params(const ModelConfig& c, CostReport& r) {
    const u64 d = c.width, bias = c.linear_bias ? 1 : 0;
    const Counts blk = block_params(c);
    r.model = c.name;
    r.attn_params = blk.attn * c.depth;
    r.sigma_params = blk.sigma * c.depth;
    r.mlp_params = blk.mlp * c.depth;
    r.norm_params = blk.norm * c.depth + (c.norm_affine ? 2 * d : 0);
    if (c.family == ModelFamily::vit) {
        const u64 patch_in = static_cast<u64>(c.channels) * c.patch_size * c.patch_size;
        const u64 patch = patch_in * d + bias * d;
        const u64 cls = c.use_cls ? d : 0;
        const u64 pos = static_cast<u64>(c.tokens()) * d;
        r.embed_params = patch + cls + pos;
        r.head_params = d * c.num_classes + bias * c.num_classes;
        r.breakdown.push_back({"patch_embed", patch, 0});
        r.breakdown.push_back({"cls_token", cls, 0});
        r.breakdown.push_back({"pos_embed", pos, 0});
    } else {
        r.embed_params = static_cast<u64>(c.vocab_size) * d;
        r.head_params = d * c.vocab_size + bias * c.vocab_size;
        r.breakdown.push_back({"token_embed", r.embed_params, 0});
    }
    r.breakdown.push_back({"attention", r.attn_params, 0});
    r.breakdown.push_back({"mlp", r.mlp_params, 0});
    r.breakdown.push_back({"norms", r.norm_params, 0});
    r.breakdown.push_back({"head", r.head_params, 0});
    r.total_params = r.embed_params + r.attn_params + r.mlp_params + r.norm_params + r.head_params;
}

}  // namespace

CostReport count_params(const ModelConfig& config) {
    config.validate();
    CostReport r;
    fill_params(config, r);
    return r;
}

CostReport count_flops(const ModelConfig& config_in, std::size_t seq_or_image) {
    ModelConfig c = config_in;
    if (seq_or_image != 0) {
        if (c.family == ModelFamily::vit)
            c.image_size = seq_or_image;
        else
            c.seq_len = seq_or_image;
    }
    c.validate();
    CostReport r;
    fill_params(c, r);
    r.flop_convention = kConvention;
    const u64 d = c.width, bias = c.linear_bias ? 1 : 0;
    const u64 n = c.tokens();

    // Breakdown entries carry the FLOPs for the whole sequence / image.
    u64 embed_flops = 0, blocks_flops = 0, head_flops = 0;
    if (c.family == ModelFamily::vit) {
        const u64 patches = static_cast<u64>(c.grid()) * c.grid();
        const u64 patch_in = static_cast<u64>(c.channels) * c.patch_size * c.patch_size;
        embed_flops = 2 * patches * patch_in * d + bias * patches * d + n * d;  // + position add
        for (std::size_t l = 0; l < c.depth; ++l) blocks_flops += block_flops(c, n, n * n);
        head_flops = 5 * n * d + 2 * d * c.num_classes + bias * c.num_classes;
        r.flops_forward = embed_flops + blocks_flops + head_flops;
    } else {
        for (std::size_t l = 0; l < c.depth; ++l) {
            blocks_flops += block_flops(c, n, allowed_pairs(c.mask.resolve(l), n));
        }
        head_flops = 5 * n * d + 2 * n * d * c.vocab_size + bias * n * c.vocab_size;
        r.flops_forward = (embed_flops + blocks_flops + head_flops) / n;

        u64 context = 0;
        for (std::size_t l = 0; l < c.depth; ++l) {
            const LayerMask m = c.mask.resolve(l);
            context += m.kind == MaskKind::causal_window ? std::min<u64>(m.window, n) : n;
        }
        r.train_flops_per_token = 6 * (r.total_params - r.embed_params) + 12 * d * context;
    }
    for (auto& e : r.breakdown) {
        if (e.component == "patch_embed" || e.component == "token_embed") e.flops = embed_flops;
        if (e.component == "head") e.flops = head_flops;
    }
    r.breakdown.push_back({"blocks", 0, blocks_flops});
    return r;
}

std::string format_cost_table(const CostReport& r) {
    auto millions = [](u64 v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(v) / 1e6);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "model            " << r.model << '\n';
    os << "total params     " << r.total_params << " (" << millions(r.total_params) << ")\n";
    os << "attention params " << r.attn_params << " (" << millions(r.attn_params) << ")\n";
    os << "mlp params       " << r.mlp_params << " (" << millions(r.mlp_params) << ")\n";
    os << "sigma params     " << r.sigma_params << '\n';
    os << "embed params     " << r.embed_params << '\n';
    os << "norm params      " << r.norm_params << '\n';
    os << "head params      " << r.head_params << '\n';
    if (r.flops_forward) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4g", static_cast<double>(r.flops_forward));
        os << "forward flops    " << r.flops_forward << " (" << buf << ")\n";
    }
    if (r.train_flops_per_token) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.5g", static_cast<double>(r.train_flops_per_token));
        os << "train flops/tok  " << r.train_flops_per_token << " (" << buf << ")\n";
    }
    if (!r.flop_convention.empty()) os << "convention       " << r.flop_convention << '\n';
    return os.str();
}

}  // namespace gka
