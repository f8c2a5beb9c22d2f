#include "gka/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace gka {

std::string to_string(ModelFamily f) { return f == ModelFamily::vit ? "vit" : "causal_lm"; }

std::string to_string(AttentionKind k) {
    switch (k) {
        case AttentionKind::gka: return "gka";
        case AttentionKind::standard: return "standard";
        case AttentionKind::vlt: return "vlt";
    }
    return "gka";
}

void ModelConfig::validate() const {
    if (depth == 0 || heads == 0 || width == 0 || mlp_ratio == 0) {
        throw ParameterError("depth, heads, width and mlp_ratio must be positive");
    }
    if (width % heads != 0) {
        throw ParameterError("width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                             " heads");
    }
    if (family == ModelFamily::vit) {
        if (patch_size == 0 || image_size % patch_size != 0) {
            throw ParameterError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                                 std::to_string(patch_size));
        }
        if (channels == 0 || num_classes == 0) throw ParameterError("channels and num_classes must be positive");
    } else {
        if (vocab_size == 0 || seq_len == 0) throw ParameterError("vocab_size and seq_len must be positive");
    }
    mask.validate();
    if (feature_norm && head_dim() % 2 != 0) throw ParameterError("feature_norm (rope) needs an even head dim");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ParameterError("drop_path_rate must be in [0, 1)");
}

std::size_t ModelConfig::tokens() const {
    if (family == ModelFamily::causal_lm) return seq_len;
    return grid() * grid() + (use_cls ? 1 : 0);
}

FeatureTransform ModelConfig::feature_transform() const {
    FeatureTransform t;
    t.rope = feature_norm;
    t.unit_norm = feature_norm;
    t.rope_base = rope_base;
    return t;
}

bool ModelConfig::operator==(const ModelConfig& o) const {
    return format_config(*this) == format_config(o);
}

namespace {

ModelConfig vision(const std::string& name, AttentionKind kind, std::size_t heads, std::size_t width) {
    ModelConfig c;
    c.name = name;
    c.family = ModelFamily::vit;
    c.depth = 12;
    c.heads = heads;
    c.width = width;
    c.attention = kind;
    return c;
}

ModelConfig lm_d20(const std::string& name, AttentionKind kind) {
    ModelConfig c;
    c.name = name;
    c.family = ModelFamily::causal_lm;
    c.depth = 20;
    c.heads = 10;
    c.width = 1280;
    c.attention = kind;
    c.vocab_size = 32768;
    c.seq_len = 2048;
    c.mask = {MaskKind::causal_window, 1024, "SSSL"};
    // the reference LM stack uses bias-free linears and parameter-free norms
    c.linear_bias = false;
    c.norm_affine = false;
    c.feature_norm = kind == AttentionKind::gka;
    return c;
}

const std::map<std::string, std::function<ModelConfig()>>& registry() {
    static const std::map<std::string, std::function<ModelConfig()>> presets = {
        {"deit-ti", [] { return vision("deit-ti", AttentionKind::standard, 3, 192); }},
        {"deit-s", [] { return vision("deit-s", AttentionKind::standard, 6, 384); }},
        {"deit-b", [] { return vision("deit-b", AttentionKind::standard, 12, 768); }},
        {"gka-ti", [] { return vision("gka-ti", AttentionKind::gka, 3, 192); }},
        {"gka-s", [] { return vision("gka-s", AttentionKind::gka, 6, 384); }},
        {"gka-b", [] { return vision("gka-b", AttentionKind::gka, 12, 768); }},
        {"vlt-ti", [] { return vision("vlt-ti", AttentionKind::vlt, 3, 192); }},
        {"vlt-s", [] { return vision("vlt-s", AttentionKind::vlt, 6, 384); }},
        {"vlt-b", [] { return vision("vlt-b", AttentionKind::vlt, 12, 768); }},
        {"gka-lm-d20", [] { return lm_d20("gka-lm-d20", AttentionKind::gka); }},
        {"std-lm-d20", [] { return lm_d20("std-lm-d20", AttentionKind::standard); }},
        {"gka-lm-toy",
         [] {
             ModelConfig c;
             c.name = "gka-lm-toy";
             c.family = ModelFamily::causal_lm;
             c.depth = 2;
             c.heads = 4;
             c.width = 64;
             c.attention = AttentionKind::gka;
             c.vocab_size = 16;
             c.seq_len = 17;
             c.mask = {MaskKind::causal, 1, ""};
             c.feature_norm = true;
             return c;
         }},
        {"gka-vit-toy",
         [] {
             ModelConfig c;
             c.name = "gka-vit-toy";
             c.family = ModelFamily::vit;
             c.depth = 2;
             c.heads = 4;
             c.width = 32;
             c.attention = AttentionKind::gka;
             c.image_size = 32;
             c.patch_size = 8;
             c.channels = 1;
             c.num_classes = 4;
             return c;
         }},
    };
    return presets;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw InputError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw InputError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw InputError("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::vector<std::string> preset_names() {
    std::vector<std::string> names;
    for (const auto& kv : registry()) names.push_back(kv.first);
    return names;
}

ModelConfig preset(const std::string& name) {
    auto it = registry().find(name);
    if (it == registry().end()) {
        std::string valid;
        for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw InputError("unknown preset '" + name + "'; valid presets: " + valid);
    }
    return it->second();
}

ModelConfig parse_config(std::string_view text) {
    ModelConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    bool seen_key = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw InputError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        }
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        if (key == "preset") {
            if (seen_key) throw InputError("config: 'preset' must come before other keys");
            c = preset(value);
        } else if (key == "name") {
            c.name = value;
        } else if (key == "family") {
            if (value == "vit")
                c.family = ModelFamily::vit;
            else if (value == "causal_lm")
                c.family = ModelFamily::causal_lm;
            else
                throw InputError("config: unknown family '" + value + "'");
        } else if (key == "depth") {
            c.depth = to_size(key, value);
        } else if (key == "heads") {
            c.heads = to_size(key, value);
        } else if (key == "width") {
            c.width = to_size(key, value);
        } else if (key == "mlp_ratio") {
            c.mlp_ratio = to_size(key, value);
        } else if (key == "attention") {
            if (value == "gka")
                c.attention = AttentionKind::gka;
            else if (value == "standard")
                c.attention = AttentionKind::standard;
            else if (value == "vlt")
                c.attention = AttentionKind::vlt;
            else
                throw InputError("config: unknown attention '" + value + "'");
        } else if (key == "image_size") {
            c.image_size = to_size(key, value);
        } else if (key == "patch_size") {
            c.patch_size = to_size(key, value);
        } else if (key == "channels") {
            c.channels = to_size(key, value);
        } else if (key == "num_classes") {
            c.num_classes = to_size(key, value);
        } else if (key == "use_cls") {
            c.use_cls = to_bool(key, value);
        } else if (key == "vocab_size") {
            c.vocab_size = to_size(key, value);
        } else if (key == "seq_len") {
            c.seq_len = to_size(key, value);
        } else if (key == "mask") {
            try {
                c.mask.kind = parse_mask_kind(value);
            } catch (const ParameterError& e) {
                throw InputError(std::string("config: ") + e.what());
            }
        } else if (key == "window_size") {
            c.mask.window = to_size(key, value);
        } else if (key == "layer_pattern") {
            c.mask.layer_pattern = value;
        } else if (key == "linear_bias") {
            c.linear_bias = to_bool(key, value);
        } else if (key == "norm_affine") {
            c.norm_affine = to_bool(key, value);
        } else if (key == "drop_path_rate") {
            c.drop_path_rate = to_double(key, value);
        } else if (key == "feature_norm") {
            c.feature_norm = to_bool(key, value);
        } else if (key == "rope_base") {
            c.rope_base = to_double(key, value);
        } else if (key == "init_log_sigma") {
            c.init_log_sigma = to_double(key, value);
        } else {
            throw InputError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        seen_key = true;
    }
    try {
        c.validate();
    } catch (const ParameterError& e) {
        throw InputError(std::string("invalid config: ") + e.what());
    }
    return c;
}

std::string format_config(const ModelConfig& c) {
    std::ostringstream os;
    os << "name = " << c.name << '\n'
       << "family = " << to_string(c.family) << '\n'
       << "depth = " << c.depth << '\n'
       << "heads = " << c.heads << '\n'
       << "width = " << c.width << '\n'
       << "mlp_ratio = " << c.mlp_ratio << '\n'
       << "attention = " << to_string(c.attention) << '\n'
       << "image_size = " << c.image_size << '\n'
       << "patch_size = " << c.patch_size << '\n'
       << "channels = " << c.channels << '\n'
       << "num_classes = " << c.num_classes << '\n'
       << "use_cls = " << (c.use_cls ? "true" : "false") << '\n'
       << "vocab_size = " << c.vocab_size << '\n'
       << "seq_len = " << c.seq_len << '\n'
       << "mask = " << to_string(c.mask.kind) << '\n'
       << "window_size = " << c.mask.window << '\n'
       << "layer_pattern = " << c.mask.layer_pattern << '\n'
       << "linear_bias = " << (c.linear_bias ? "true" : "false") << '\n'
       << "norm_affine = " << (c.norm_affine ? "true" : "false") << '\n'
       << "drop_path_rate = " << fmt_double(c.drop_path_rate) << '\n'
       << "feature_norm = " << (c.feature_norm ? "true" : "false") << '\n'
       << "rope_base = " << fmt_double(c.rope_base) << '\n'
       << "init_log_sigma = " << fmt_double(c.init_log_sigma) << '\n';
    return os.str();
}

ModelConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

}  // namespace gka
