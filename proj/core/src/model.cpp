#include "gka/model.hpp"

#include <cmath>

#include "gka/ops.hpp"

namespace gka {

template <typename T>
std::size_t Model<T>::num_params() const {
    std::size_t n = 0;
    visit_params(*this, [&](const std::string&, const Tensor<T>& t, ParamKind) { n += t.size(); });
    return n;
}

namespace {

template <typename T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
Tensor<T> linear_weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return normal<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

template <typename T>
Tensor<T> maybe(bool present, Shape shape, T fill = T{0}) {
    return present ? Tensor<T>(std::move(shape), fill) : Tensor<T>{};
}

template <typename T>
BlockParams<T> init_block(const ModelConfig& c, std::mt19937_64& rng) {
    const std::size_t d = c.width, hid = c.mlp_hidden();
    BlockParams<T> b;
    b.ln1_gamma = maybe<T>(c.norm_affine, {d}, T{1});
    b.ln1_beta = maybe<T>(c.norm_affine, {d});
    b.ln2_gamma = maybe<T>(c.norm_affine, {d}, T{1});
    b.ln2_beta = maybe<T>(c.norm_affine, {d});
    if (c.attention == AttentionKind::gka) {
        GkaLayerParams<T> a;
        a.log_sigma = Tensor<T>({c.heads}, static_cast<T>(c.init_log_sigma));
        a.w_o = linear_weight<T>(d, d, rng);
        a.b_o = maybe<T>(c.linear_bias, {d});
        a.features = c.feature_transform();
        b.attn = std::move(a);
    } else {
        MhaLayerParams<T> a;
        a.num_heads = c.heads;
        a.variant = c.attention == AttentionKind::vlt ? MhaVariant::vlt : MhaVariant::standard;
        a.w_q = linear_weight<T>(d, d, rng);
        a.b_q = maybe<T>(c.linear_bias, {d});
        a.w_k = linear_weight<T>(d, d, rng);
        a.b_k = maybe<T>(c.linear_bias, {d});
        if (a.variant == MhaVariant::standard) {
            a.w_v = linear_weight<T>(d, d, rng);
            a.b_v = maybe<T>(c.linear_bias, {d});
        }
        a.w_o = linear_weight<T>(d, d, rng);
        a.b_o = maybe<T>(c.linear_bias, {d});
        b.attn = std::move(a);
    }
    b.w1 = linear_weight<T>(d, hid, rng);
    b.b1 = maybe<T>(c.linear_bias, {hid});
    b.w2 = linear_weight<T>(hid, d, rng);
    b.b2 = maybe<T>(c.linear_bias, {d});
    b.drop_path_rate = c.drop_path_rate;
    return b;
}

}  // namespace

template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    Model<T> m;
    m.config = config;
    const std::size_t d = config.width;
    if (config.family == ModelFamily::vit) {
        const std::size_t patch_in = config.channels * config.patch_size * config.patch_size;
        m.patch_w = linear_weight<T>(patch_in, d, rng);
        m.patch_b = maybe<T>(config.linear_bias, {d});
        if (config.use_cls) m.cls_token = normal<T>({d}, 0.02, rng);
        m.pos_embed = normal<T>({config.tokens(), d}, 0.02, rng);
    } else {
        m.token_embed = normal<T>({config.vocab_size, d}, 1.0, rng);
    }
    for (std::size_t l = 0; l < config.depth; ++l) m.blocks.push_back(init_block<T>(config, rng));
    m.norm_gamma = maybe<T>(config.norm_affine, {d}, T{1});
    m.norm_beta = maybe<T>(config.norm_affine, {d});
    const std::size_t out = config.family == ModelFamily::vit ? config.num_classes : config.vocab_size;
    m.head_w = linear_weight<T>(d, out, rng);
    m.head_b = maybe<T>(config.linear_bias, {out});
    return m;
}

template <typename T>
Model<T> zeros_like(const Model<T>& model) {
    Model<T> z = model;
    visit_params(z, [](const std::string&, Tensor<T>& t, ParamKind) { t.fill(T{0}); });
    return z;
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttentionParams<T>& attn, const MaskSpec& mask,
                            std::size_t layer_index, std::type_identity_t<AttentionCapture<T>>* capture) {
    return std::visit(
        [&](const auto& a) -> Tensor<T> {
            if constexpr (std::is_same_v<std::decay_t<decltype(a)>, GkaLayerParams<T>>)
                return gka_forward(x, a, mask, layer_index, capture);
            else
                return mha_forward(x, a, mask, layer_index, capture);
        },
        attn);
}

namespace {

template <typename T>
Tensor<T> attention_backward(const Tensor<T>& x, const AttentionParams<T>& attn, const MaskSpec& mask,
                             std::size_t layer_index, const Tensor<T>& grad_out, AttentionParams<T>& grads) {
    return std::visit(
        [&](const auto& a) -> Tensor<T> {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, GkaLayerParams<T>>) {
                auto g = gka_backward(x, a, mask, layer_index, grad_out);
                auto& dst = std::get<GkaLayerParams<T>>(grads);
                add_inplace(dst.log_sigma, g.log_sigma);
                add_inplace(dst.w_o, g.w_o);
                if (!dst.b_o.empty()) add_inplace(dst.b_o, g.b_o);
                return std::move(g.x);
            } else {
                auto g = mha_backward(x, a, mask, layer_index, grad_out);
                auto& dst = std::get<MhaLayerParams<T>>(grads);
                auto acc = [](Tensor<T>& d, const Tensor<T>& s) {
                    if (!d.empty()) add_inplace(d, s);
                };
                acc(dst.w_q, g.w_q);
                acc(dst.b_q, g.b_q);
                acc(dst.w_k, g.w_k);
                acc(dst.b_k, g.b_k);
                acc(dst.w_v, g.w_v);
                acc(dst.b_v, g.b_v);
                acc(dst.w_o, g.w_o);
                acc(dst.b_o, g.b_o);
                return std::move(g.x);
            }
        },
        attn);
}

/// Per-sample drop-path factors, or empty when the branch is kept as is.
template <typename T>
std::vector<T> drop_path_scales(std::size_t batch, double rate, bool train, std::mt19937_64* rng) {
    if (!train || rate <= 0.0) return {};
    if (!rng) throw ParameterError("drop path in train mode needs a random generator");
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<T> s(batch);
    for (auto& v : s) v = keep(*rng) ? static_cast<T>(1.0 / (1.0 - rate)) : T{0};
    return s;
}

template <typename T>
void add_scaled_branch(Tensor<T>& x, const Tensor<T>& branch, const std::vector<T>& scales) {
    if (scales.empty()) {
        add_inplace(x, branch);
        return;
    }
    const std::size_t per = x.size() / scales.size();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += scales[i / per] * branch[i];
}

template <typename T>
Tensor<T> scale_branch_grad(const Tensor<T>& g, const std::vector<T>& scales) {
    if (scales.empty()) return g;
    Tensor<T> out(g.shape());
    const std::size_t per = g.size() / scales.size();
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = scales[i / per] * g[i];
    return out;
}

}  // namespace

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& block, const MaskSpec& mask,
                        std::size_t layer_index, bool train_mode, std::type_identity_t<AttentionCapture<T>>* capture,
                        std::mt19937_64* rng, std::type_identity_t<BlockCache<T>>* cache) {
    const std::size_t batch = x.dim(0);
    Tensor<T> ln1 = layer_norm(x, block.ln1_gamma, block.ln1_beta);
    const Tensor<T> attn = attention_forward(ln1, block.attn, mask, layer_index, capture);
    auto attn_scale = drop_path_scales<T>(batch, block.drop_path_rate, train_mode, rng);
    Tensor<T> mid = x;
    add_scaled_branch(mid, attn, attn_scale);

    Tensor<T> ln2 = layer_norm(mid, block.ln2_gamma, block.ln2_beta);
    Tensor<T> hidden_pre = linear(ln2, block.w1, block.b1);
    Tensor<T> hidden_act = gelu(hidden_pre);
    const Tensor<T> mlp = linear(hidden_act, block.w2, block.b2);
    auto mlp_scale = drop_path_scales<T>(batch, block.drop_path_rate, train_mode, rng);
    Tensor<T> y = mid;
    add_scaled_branch(y, mlp, mlp_scale);

    if (cache) {
        cache->x_in = x;
        cache->ln1_out = std::move(ln1);
        cache->x_mid = std::move(mid);
        cache->ln2_out = std::move(ln2);
        cache->hidden_pre = std::move(hidden_pre);
        cache->hidden_act = std::move(hidden_act);
        cache->attn_scale = std::move(attn_scale);
        cache->mlp_scale = std::move(mlp_scale);
    }
    return y;
}

template <typename T>
Tensor<T> block_backward(const BlockParams<T>& block, const MaskSpec& mask, std::size_t layer_index,
                         const BlockCache<T>& cache, const Tensor<T>& grad_out, BlockParams<T>& grads) {
    // MLP branch
    const Tensor<T> grad_mlp = scale_branch_grad(grad_out, cache.mlp_scale);
    const Tensor<T> grad_act = linear_backward(cache.hidden_act, block.w2, grad_mlp, grads.w2, &grads.b2);
    const Tensor<T> grad_pre = gelu_backward(cache.hidden_pre, grad_act);
    const Tensor<T> grad_ln2 = linear_backward(cache.ln2_out, block.w1, grad_pre, grads.w1, &grads.b1);
    Tensor<T> grad_mid = grad_out;
    add_inplace(grad_mid, layer_norm_backward(cache.x_mid, block.ln2_gamma, grad_ln2, &grads.ln2_gamma,
                                              &grads.ln2_beta));

    // attention branch
    const Tensor<T> grad_attn = scale_branch_grad(grad_mid, cache.attn_scale);
    const Tensor<T> grad_ln1 =
        attention_backward(cache.ln1_out, block.attn, mask, layer_index, grad_attn, grads.attn);
    Tensor<T> grad_x = grad_mid;
    add_inplace(grad_x,
                layer_norm_backward(cache.x_in, block.ln1_gamma, grad_ln1, &grads.ln1_gamma, &grads.ln1_beta));
    return grad_x;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t p) {
    if (images.rank() != 4) throw ShapeError("patchify expects [B x C x H x W], got " + shape_str(images.shape()));
    const std::size_t batch = images.dim(0), ch = images.dim(1), hgt = images.dim(2), wid = images.dim(3);
    if (hgt != wid || hgt % p != 0) {
        throw ShapeError("image " + shape_str(images.shape()) + " is not square or not divisible by patch " +
                         std::to_string(p));
    }
    const std::size_t grid = hgt / p, feat = ch * p * p;
    Tensor<T> out({batch, grid * grid, feat});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t py = 0; py < grid; ++py)
            for (std::size_t px = 0; px < grid; ++px)
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx) {
                            const std::size_t src = ((b * ch + c) * hgt + py * p + dy) * wid + px * p + dx;
                            out.at(b, py * grid + px, (c * p + dy) * p + dx) = images[src];
                        }
    return out;
}

namespace {

template <typename T>
Tensor<T> run_blocks(const Model<T>& model, Tensor<T> x, std::type_identity_t<AttentionCapture<T>>* capture,
                     const ForwardOptions<T>& opt) {
    const MaskSpec mask = model.mask();
    if (opt.cache) opt.cache->blocks.assign(model.blocks.size(), {});
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        x = block_forward(x, model.blocks[l], mask, l, opt.train, capture, opt.rng,
                          opt.cache ? &opt.cache->blocks[l] : nullptr);
    }
    return x;
}

template <typename T>
Tensor<T> run_blocks_backward(const Model<T>& model, const ModelCache<T>& cache, Tensor<T> grad, Model<T>& grads) {
    const MaskSpec mask = model.mask();
    for (std::size_t l = model.blocks.size(); l-- > 0;) {
        grad = block_backward(model.blocks[l], mask, l, cache.blocks[l], grad, grads.blocks[l]);
    }
    return grad;
}

}  // namespace

template <typename T>
Tensor<T> vit_forward(const Model<T>& model, const Tensor<T>& images, std::type_identity_t<AttentionCapture<T>>* capture,
                      std::type_identity_t<ForwardOptions<T>> opt) {
    const ModelConfig& c = model.config;
    if (c.family != ModelFamily::vit) throw ParameterError("vit_forward needs a vit model");
    if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
        images.dim(3) != c.image_size) {
        throw ShapeError("vit_forward: expected images [B x " + std::to_string(c.channels) + " x " +
                         std::to_string(c.image_size) + " x " + std::to_string(c.image_size) + "], got " +
                         shape_str(images.shape()));
    }
    const std::size_t batch = images.dim(0), n = c.tokens(), d = c.width;
    const std::size_t offset = c.use_cls ? 1 : 0;
    Tensor<T> patches = patchify(images, c.patch_size);
    const Tensor<T> emb = linear(patches, model.patch_w, model.patch_b);
    Tensor<T> x({batch, n, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < d; ++k) {
                const T base = t < offset ? model.cls_token[k] : emb.at(b, t - offset, k);
                x.at(b, t, k) = base + model.pos_embed.at(t, k);
            }
        }
    }
    Tensor<T> h = run_blocks(model, std::move(x), capture, opt);
    Tensor<T> normed = layer_norm(h, model.norm_gamma, model.norm_beta);
    Tensor<T> pooled({batch, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < d; ++k) {
            if (c.use_cls) {
                pooled.at(b, k) = normed.at(b, 0, k);
            } else {
                T s{0};
                for (std::size_t t = 0; t < n; ++t) s += normed.at(b, t, k);
                pooled.at(b, k) = s / static_cast<T>(n);
            }
        }
    }
    if (opt.cache) {
        opt.cache->patches = std::move(patches);
        opt.cache->final_in = std::move(h);
        opt.cache->final_out = std::move(normed);
    }
    return linear(pooled, model.head_w, model.head_b);
}

template <typename T>
void vit_backward(const Model<T>& model, const ModelCache<T>& cache, const Tensor<T>& grad_logits,
                  Model<T>& grads) {
    const ModelConfig& c = model.config;
    const std::size_t batch = grad_logits.dim(0), n = c.tokens(), d = c.width;
    const std::size_t offset = c.use_cls ? 1 : 0;
    Tensor<T> pooled({batch, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < d; ++k) {
            if (c.use_cls) {
                pooled.at(b, k) = cache.final_out.at(b, 0, k);
            } else {
                T s{0};
                for (std::size_t t = 0; t < n; ++t) s += cache.final_out.at(b, t, k);
                pooled.at(b, k) = s / static_cast<T>(n);
            }
        }
    }
    const Tensor<T> grad_pooled = linear_backward(pooled, model.head_w, grad_logits, grads.head_w, &grads.head_b);
    Tensor<T> grad_normed({batch, n, d});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t k = 0; k < d; ++k) {
            if (c.use_cls) {
                grad_normed.at(b, 0, k) = grad_pooled.at(b, k);
            } else {
                for (std::size_t t = 0; t < n; ++t) grad_normed.at(b, t, k) = grad_pooled.at(b, k) / static_cast<T>(n);
            }
        }
    Tensor<T> grad_h =
        layer_norm_backward(cache.final_in, model.norm_gamma, grad_normed, &grads.norm_gamma, &grads.norm_beta);
    const Tensor<T> grad_x = run_blocks_backward(model, cache, std::move(grad_h), grads);

    Tensor<T> grad_emb({batch, n - offset, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < d; ++k) {
                const T g = grad_x.at(b, t, k);
                grads.pos_embed.at(t, k) += g;
                if (t < offset)
                    grads.cls_token[k] += g;
                else
                    grad_emb.at(b, t - offset, k) = g;
            }
        }
    }
    linear_backward(cache.patches, model.patch_w, grad_emb, grads.patch_w, &grads.patch_b);
}

template <typename T>
Tensor<T> lm_forward(const Model<T>& model, const TokenBatch& tokens, std::type_identity_t<AttentionCapture<T>>* capture,
                     std::type_identity_t<ForwardOptions<T>> opt) {
    const ModelConfig& c = model.config;
    if (c.family != ModelFamily::causal_lm) throw ParameterError("lm_forward needs a causal_lm model");
    if (tokens.ids.size() != tokens.batch * tokens.length || tokens.batch == 0 || tokens.length == 0) {
        throw ShapeError("lm_forward: token batch is empty or inconsistent");
    }
    if (tokens.length > c.seq_len) {
        throw InputError("lm_forward: sequence length " + std::to_string(tokens.length) + " exceeds seq_len " +
                         std::to_string(c.seq_len));
    }
    const std::size_t d = c.width;
    Tensor<T> x({tokens.batch, tokens.length, d});
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        for (std::size_t t = 0; t < tokens.length; ++t) {
            const std::int64_t id = tokens.at(b, t);
            if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
                throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(c.vocab_size));
            }
            for (std::size_t k = 0; k < d; ++k) x.at(b, t, k) = model.token_embed.at(static_cast<std::size_t>(id), k);
        }
    }
    Tensor<T> h = run_blocks(model, std::move(x), capture, opt);
    Tensor<T> normed = layer_norm(h, model.norm_gamma, model.norm_beta);
    Tensor<T> logits = linear(normed, model.head_w, model.head_b);
    if (opt.cache) {
        opt.cache->ids = tokens.ids;
        opt.cache->final_in = std::move(h);
        opt.cache->final_out = std::move(normed);
    }
    return logits;
}

template <typename T>
void lm_backward(const Model<T>& model, const ModelCache<T>& cache, const Tensor<T>& grad_logits,
                 Model<T>& grads) {
    const Tensor<T> grad_normed =
        linear_backward(cache.final_out, model.head_w, grad_logits, grads.head_w, &grads.head_b);
    Tensor<T> grad_h =
        layer_norm_backward(cache.final_in, model.norm_gamma, grad_normed, &grads.norm_gamma, &grads.norm_beta);
    const Tensor<T> grad_x = run_blocks_backward(model, cache, std::move(grad_h), grads);
    const std::size_t d = model.config.width;
    for (std::size_t r = 0; r < cache.ids.size(); ++r) {
        const auto id = static_cast<std::size_t>(cache.ids[r]);
        for (std::size_t k = 0; k < d; ++k) grads.token_embed.at(id, k) += grad_x[r * d + k];
    }
}

template <typename T>
Tensor<double> collect_log_sigma(const Model<T>& model) {
    if (model.config.attention != AttentionKind::gka || model.blocks.empty()) return {};
    const std::size_t heads = model.config.heads;
    Tensor<double> out({model.blocks.size(), heads});
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& a = std::get<GkaLayerParams<T>>(model.blocks[l].attn);
        for (std::size_t h = 0; h < heads; ++h) out.at(l, h) = static_cast<double>(a.log_sigma[h]);
    }
    return out;
}

template <typename U, typename T>
Model<U> cast_model(const Model<T>& model) {
    Model<U> out = init_model<U>(model.config, 0);
    std::vector<const Tensor<T>*> src;
    visit_params(model, [&](const std::string&, const Tensor<T>& t, ParamKind) { src.push_back(&t); });
    std::size_t i = 0;
    visit_params(out, [&](const std::string&, Tensor<U>& t, ParamKind) { t = src[i++]->template cast<U>(); });
    return out;
}

#define GKA_INSTANTIATE_MODEL(T)                                                                               \
    template struct Model<T>;                                                                                  \
    template Model<T> init_model<T>(const ModelConfig&, std::uint64_t);                                        \
    template Model<T> zeros_like(const Model<T>&);                                                             \
    template Tensor<T> attention_forward(const Tensor<T>&, const AttentionParams<T>&, const MaskSpec&,         \
                                         std::size_t, AttentionCapture<T>*);                                   \
    template Tensor<T> block_forward(const Tensor<T>&, const BlockParams<T>&, const MaskSpec&, std::size_t,    \
                                     bool, AttentionCapture<T>*, std::mt19937_64*, BlockCache<T>*);            \
    template Tensor<T> block_backward(const BlockParams<T>&, const MaskSpec&, std::size_t,                     \
                                      const BlockCache<T>&, const Tensor<T>&, BlockParams<T>&);                \
    template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> vit_forward(const Model<T>&, const Tensor<T>&, AttentionCapture<T>*, ForwardOptions<T>); \
    template void vit_backward(const Model<T>&, const ModelCache<T>&, const Tensor<T>&, Model<T>&);            \
    template Tensor<T> lm_forward(const Model<T>&, const TokenBatch&, AttentionCapture<T>*, ForwardOptions<T>); \
    template void lm_backward(const Model<T>&, const ModelCache<T>&, const Tensor<T>&, Model<T>&);             \
    template Tensor<double> collect_log_sigma(const Model<T>&);

GKA_INSTANTIATE_MODEL(float)
GKA_INSTANTIATE_MODEL(double)
template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<double> cast_model<double, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);

}  // namespace gka
