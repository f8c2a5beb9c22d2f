#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "gka/analysis.hpp"
#include "gka/checkpoint.hpp"
#include "gka/errors.hpp"
#include "gka/kernel_attention.hpp"
#include "gka/ops.hpp"
#include "gka/parallel.hpp"
#include "gka/streaming.hpp"
#include "gka/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gka::cli {

json to_json(const CostReport& r) {
    json breakdown = json::array();
    for (const auto& e : r.breakdown) breakdown.push_back({{"component", e.component}, {"params", e.params}, {"flops", e.flops}});
    return {{"model", r.model},
            {"total_params", r.total_params},
            {"attn_params", r.attn_params},
            {"mlp_params", r.mlp_params},
            {"sigma_params", r.sigma_params},
            {"embed_params", r.embed_params},
            {"norm_params", r.norm_params},
            {"head_params", r.head_params},
            {"flops_forward", r.flops_forward},
            {"train_flops_per_token", r.train_flops_per_token},
            {"flop_convention", r.flop_convention},
            {"breakdown", breakdown}};
}

CostReport cost_report_from_json(const json& j) {
    CostReport r;
    try {
        r.model = j.at("model").get<std::string>();
        r.total_params = j.at("total_params").get<std::uint64_t>();
        r.attn_params = j.at("attn_params").get<std::uint64_t>();
        r.mlp_params = j.at("mlp_params").get<std::uint64_t>();
        r.sigma_params = j.at("sigma_params").get<std::uint64_t>();
        r.embed_params = j.at("embed_params").get<std::uint64_t>();
        r.norm_params = j.at("norm_params").get<std::uint64_t>();
        r.head_params = j.at("head_params").get<std::uint64_t>();
        r.flops_forward = j.at("flops_forward").get<std::uint64_t>();
        r.train_flops_per_token = j.at("train_flops_per_token").get<std::uint64_t>();
        r.flop_convention = j.at("flop_convention").get<std::string>();
        for (const auto& e : j.at("breakdown")) {
            r.breakdown.push_back({e.at("component").get<std::string>(), e.at("params").get<std::uint64_t>(),
                                   e.at("flops").get<std::uint64_t>()});
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed cost report: ") + e.what());
    }
    return r;
}

std::string default_out_dir(const std::string& run) {
    const char* env = std::getenv("GKA_OUT_DIR");
    const fs::path base = env && *env ? fs::path(env) : fs::path("out");
    return (base / run).string();
}

namespace {

struct Common {
    std::size_t threads = 1;
    std::string precision = "f64";
};

std::string utc_timestamp() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const fs::path& dir, const std::string& command, const std::string& config, std::uint64_t seed,
                    const std::string& precision, const std::vector<std::string>& args) {
    fs::create_directories(dir);
    const json m{{"command", command},     {"config", config},           {"seed", seed},
                 {"output_dir", dir.string()}, {"timestamp", utc_timestamp()}, {"precision", precision},
                 {"args", args}};
    std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

ModelConfig resolve_config(const std::string& preset_name, const std::string& config_path,
                           const std::string& fallback) {
    if (!preset_name.empty() && !config_path.empty()) throw InputError("give either --preset or --config, not both");
    if (!config_path.empty()) return load_config_file(config_path);
    return preset(preset_name.empty() ? fallback : preset_name);
}

std::string config_label(const std::string& preset_name, const std::string& config_path, const ModelConfig& c) {
    return config_path.empty() ? "preset:" + (preset_name.empty() ? c.name : preset_name) : config_path;
}

// ---- count ------------------------------------------------------------------

struct CountArgs {
    std::string preset, config, out;
    bool json_only = false;
    std::size_t seq = 0;
};

int cmd_count(const CountArgs& a, const std::vector<std::string>& args, std::ostream& out) {
    if (a.preset.empty() && a.config.empty()) throw InputError("count needs --preset or --config");
    const ModelConfig c = resolve_config(a.preset, a.config, "");
    const CostReport r = count_flops(c, a.seq);
    const json j = to_json(r);
    if (a.json_only) {
        out << j.dump(2) << '\n';
    } else {
        out << format_cost_table(r);
    }
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream(fs::path(a.out) / "cost.json") << j.dump(2) << '\n';
        write_manifest(a.out, "count", config_label(a.preset, a.config, c), 0, "exact", args);
    }
    return ok;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
    std::string preset = "gka-ti", seq_lens = "128,256,512", path = "both", tiles = "64", out;
    std::size_t batch = 1, warmup = 10, iters = 100;
    std::uint64_t seed = 0;
};

std::vector<std::size_t> parse_list(const std::string& text, const std::string& what) {
    std::vector<std::size_t> v;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t pos = 0;
            const long long x = std::stoll(item, &pos);
            if (pos != item.size() || x <= 0) throw std::invalid_argument(item);
            v.push_back(static_cast<std::size_t>(x));
        } catch (const std::exception&) {
            throw InputError(what + ": expected positive integers, got '" + text + "'");
        }
    }
    if (v.empty()) throw InputError(what + " is empty");
    return v;
}

TileConfig parse_tiles(const std::string& text) {
    TileConfig t;
    const auto x = text.find('x');
    if (x == std::string::npos) {
        t.tile_rows = t.tile_cols = parse_list(text, "--tiles").at(0);
    } else {
        t.tile_rows = parse_list(text.substr(0, x), "--tiles").at(0);
        t.tile_cols = parse_list(text.substr(x + 1), "--tiles").at(0);
    }
    return t;
}

template <typename T>
int run_bench(const BenchArgs& a, const Common& common, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
    const ModelConfig c = preset(a.preset);
    const std::size_t d_model = c.width, heads = c.heads, d = c.head_dim();
    const TileConfig tiles = parse_tiles(a.tiles);
    const bool naive = a.path == "naive" || a.path == "both";
    const bool streaming = a.path == "streaming" || a.path == "both";
    if (!naive && !streaming) throw InputError("--path must be naive, streaming or both");

    std::mt19937_64 rng(a.seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    GkaLayerParams<T> p;
    p.log_sigma = Tensor<T>({heads}, static_cast<T>(0.5 * std::log(static_cast<double>(d))));
    p.w_o = Tensor<T>({d_model, d_model});
    for (auto& v : p.w_o.data()) v = static_cast<T>(dist(rng) / std::sqrt(static_cast<double>(d_model)));
    const MaskSpec mask = c.family == ModelFamily::causal_lm ? MaskSpec{c.mask.kind, c.mask.window, {}} : MaskSpec::none();
    const double tol = sizeof(T) == 8 ? 1e-10 : 1e-5;

    json rows = json::array();
    out << std::left << std::setw(8) << "N" << std::setw(11) << "path" << std::right << std::setw(12) << "mean_ms"
        << std::setw(14) << "tokens/s" << std::setw(18) << "workspace_elems" << std::setw(12) << "key_tiles" << '\n';
    for (std::size_t n : parse_list(a.seq_lens, "--seq-lens")) {
        Tensor<T> x({a.batch, n, d_model});
        for (auto& v : x.data()) v = static_cast<T>(dist(rng));
        WorkspaceStats ws;
        const Tensor<T> y_naive = gka_forward(x, p, mask, 0);
        const Tensor<T> y_stream = gka_forward_streaming(x, p, mask, 0, tiles, &ws);
        const double diff = norm_rel_diff(y_stream, y_naive);
        if (diff > tol) {
            err << "bench: streaming and naive outputs differ at N=" << n << " (max rel diff " << diff << ")\n";
            return check_failed;
        }
        auto time_path = [&](bool stream) {
            for (std::size_t i = 0; i < a.warmup; ++i)
                stream ? gka_forward_streaming(x, p, mask, 0, tiles) : gka_forward(x, p, mask, 0);
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t i = 0; i < a.iters; ++i)
                stream ? gka_forward_streaming(x, p, mask, 0, tiles) : gka_forward(x, p, mask, 0);
            return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                   static_cast<double>(std::max<std::size_t>(a.iters, 1));
        };
        for (int s = 0; s < 2; ++s) {
            const bool stream = s == 1;
            if ((stream && !streaming) || (!stream && !naive)) continue;
            const double sec = time_path(stream);
            const std::size_t work = stream ? ws.peak_elements : naive_workspace_elements(n, d);
            const double tps = static_cast<double>(a.batch * n) / sec;
            out << std::left << std::setw(8) << n << std::setw(11) << (stream ? "streaming" : "naive") << std::right
                << std::setw(12) << std::fixed << std::setprecision(3) << sec * 1e3 << std::setw(14)
                << std::setprecision(0) << tps << std::setw(18) << work << std::setw(12)
                << (stream ? std::to_string(ws.max_key_tiles_per_query_tile) : "-") << '\n'
                << std::defaultfloat << std::setprecision(6);
            rows.push_back({{"seq_len", n},
                            {"path", stream ? "streaming" : "naive"},
                            {"mean_seconds", sec},
                            {"tokens_per_second", tps},
                            {"workspace_elements", work},
                            {"max_rel_diff", diff}});
        }
    }
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream(fs::path(a.out) / "bench.json") << rows.dump(2) << '\n';
        write_manifest(a.out, "bench", "preset:" + a.preset, a.seed, common.precision, args);
    }
    return ok;
}

// ---- gradcheck --------------------------------------------------------------

struct GradArgs {
    std::string target = "all";
    std::uint64_t seed = 0;
    std::size_t seeds = 1;
    bool corrupt = false;
    double tolerance = 1e-4;
    std::optional<double> abs_floor;  // default: 1e-9 for the model target, 0 elsewhere
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
    std::vector<std::string> targets;
    if (a.target == "all")
        targets = grad_check_targets();
    else if (a.target == "op")
        targets = {"linear", "gka", "mha", "vlt"};
    else
        targets = {a.target};
    GradCheckOptions opt;
    opt.tolerance = a.tolerance;
    opt.corrupt = a.corrupt;
    bool all_pass = true;
    for (std::size_t s = 0; s < a.seeds; ++s) {
        for (const auto& t : targets) {
            opt.abs_floor = a.abs_floor.value_or(t == "model" ? 1e-9 : 0.0);
            const GradCheckReport r = grad_check(t, a.seed + s, opt);
            for (const auto& g : r.groups) {
                out << std::left << std::setw(34) << g.name << " seed " << std::setw(4) << a.seed + s << " n="
                    << std::setw(4) << g.checked << " max_rel " << std::scientific << std::setprecision(2)
                    << g.max_rel_error << (g.max_rel_error <= r.tolerance ? "  ok" : "  FAIL") << '\n'
                    << std::defaultfloat;
            }
            all_pass = all_pass && r.passed();
        }
    }
    out << (all_pass ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << a.tolerance << ")\n";
    return all_pass ? ok : check_failed;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    std::string task = "copy_lm", preset, config, out;
    std::optional<std::size_t> steps, batch, log_every;
    std::optional<double> lr;
    std::uint64_t seed = 0;
    double sigma_init = 10.0;
    double stop_accuracy = 0.0;
};

template <typename T>
int run_train(const TrainArgs& a, const Common& common, const std::vector<std::string>& args, std::ostream& out) {
    const TaskKind kind = parse_task_kind(a.task);
    TrainConfig tc;
    tc.seed = a.seed;
    if (a.log_every) tc.log_every = *a.log_every;
    tc.stop_accuracy = a.stop_accuracy;
    auto log_line = [&](const MetricsRow& r) {
        out << "step " << r.step << " loss " << std::setprecision(6) << r.loss;
        if (kind != TaskKind::cluster_regression) out << " acc " << r.accuracy;
        if (kind == TaskKind::copy_lm) out << " bpb " << r.bpb;
        out << '\n';
    };
    MetricsTrace trace;
    std::string label, run;
    fs::path dir;

    if (kind == TaskKind::cluster_regression) {
        tc.steps = a.steps.value_or(100);
        tc.optimizer.lr = a.lr.value_or(0.05);
        tc.optimizer.weight_decay = 0.0;
        ClusterTaskSpec task;
        if (a.batch) task.batch = *a.batch;
        ClusterModel m = make_cluster_model(task.dim, a.sigma_init);
        label = "cluster_regression";
        dir = a.out.empty() ? fs::path(default_out_dir("train_cluster_regression_s" + std::to_string(a.seed))) : fs::path(a.out);
        trace = train_cluster_regression(m, task, tc, log_line);
        std::mt19937_64 rng(a.seed);
        const ClusterBatch b = gen_cluster_regression(task, rng);
        out << "final sigma " << m.layer.sigma(0) << " relative error "
            << relative_error(cluster_predict(m, b.tokens), b.targets) << '\n';
    } else {
        const std::string fallback = kind == TaskKind::copy_lm ? "gka-lm-toy" : "gka-vit-toy";
        const ModelConfig c = resolve_config(a.preset, a.config, fallback);
        label = config_label(a.preset, a.config, c);
        dir = a.out.empty() ? fs::path(default_out_dir("train_" + to_string(kind) + "_" + c.name + "_s" +
                                                       std::to_string(a.seed)))
                            : fs::path(a.out);
        Model<T> model = init_model<T>(c, a.seed);
        if (kind == TaskKind::copy_lm) {
            tc.steps = a.steps.value_or(3000);
            tc.optimizer.lr = a.lr.value_or(3e-3);
            CopyTaskSpec task;
            task.vocab = std::min<std::size_t>(c.vocab_size, 16);
            task.prefix = (c.seq_len - 1) / 2;
            if (a.batch) task.batch = *a.batch;
            trace = train_copy_lm(model, task, tc, log_line);
            out << "eval answer accuracy " << eval_copy_lm(model, task, 20, a.seed + 1000) << '\n';
        } else {
            tc.steps = a.steps.value_or(300);
            tc.optimizer.lr = a.lr.value_or(3e-3);
            QuadrantTaskSpec task;
            task.image_size = c.image_size;
            if (a.batch) task.batch = *a.batch;
            trace = train_quadrants(model, task, tc, log_line);
        }
        fs::create_directories(dir);
        save_checkpoint(dir / "checkpoint.gka", model,
                        {{"task", to_string(kind)}, {"steps", std::to_string(tc.steps)}, {"seed", std::to_string(a.seed)}});
    }
    fs::create_directories(dir);
    std::ofstream csv(dir / "metrics.csv");
    write_metrics_csv(csv, trace);
    write_manifest(dir, "train", label, a.seed, common.precision, args);
    out << "wrote " << dir.string() << '\n';
    return ok;
}

// ---- visualize --------------------------------------------------------------

struct VisArgs {
    std::string checkpoint, input, out;
    std::uint64_t seed = 0;
    std::size_t max_tokens = 50;
};

std::vector<double> read_numbers(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot read input file " + path.string());
    std::vector<double> v;
    std::string tok;
    while (f >> tok) {
        for (char& ch : tok)
            if (ch == ',') ch = ' ';
        std::istringstream ss(tok);
        double x;
        while (ss >> x) v.push_back(x);
        if (!ss.eof()) throw InputError("input file " + path.string() + " contains a non-numeric token '" + tok + "'");
    }
    return v;
}

template <typename T>
int run_visualize(const VisArgs& a, const Common& common, const std::vector<std::string>& args, std::ostream& out) {
    Checkpoint<T> ck = load_checkpoint<T>(a.checkpoint);
    const ModelConfig& c = ck.model.config;
    AttentionCapture<T> capture;
    if (c.family == ModelFamily::vit) {
        const std::size_t count = c.channels * c.image_size * c.image_size;
        Tensor<T> image({1, c.channels, c.image_size, c.image_size});
        if (!a.input.empty()) {
            const auto v = read_numbers(a.input);
            if (v.size() != count) {
                throw InputError("input has " + std::to_string(v.size()) + " values, model expects " + std::to_string(count));
            }
            for (std::size_t i = 0; i < count; ++i) image[i] = static_cast<T>(v[i]);
        } else if (c.channels == 1) {
            std::mt19937_64 rng(a.seed);
            QuadrantTaskSpec q;
            q.batch = 1;
            q.image_size = c.image_size;
            image = gen_quadrants(q, rng).images.template cast<T>();
        } else {
            throw InputError("--input is required for multi-channel models");
        }
        vit_forward(ck.model, image, &capture);
    } else {
        TokenBatch tokens{1, 0, {}};
        if (!a.input.empty()) {
            for (double v : read_numbers(a.input)) tokens.ids.push_back(static_cast<std::int64_t>(v));
        } else {
            std::mt19937_64 rng(a.seed);
            CopyTaskSpec task;
            task.batch = 1;
            task.vocab = std::min<std::size_t>(c.vocab_size, 16);
            task.prefix = (std::min<std::size_t>(c.seq_len, 17) - 1) / 2;
            tokens = gen_copy_lm(task, rng).tokens;
        }
        tokens.length = tokens.ids.size();
        if (tokens.length == 0) throw InputError("input token file is empty");
        lm_forward(ck.model, tokens, &capture);
    }
    const fs::path dir = a.out.empty() ? fs::path(default_out_dir("visualize_" + c.name)) : fs::path(a.out);
    ExportOptions opt;
    opt.max_tokens = a.max_tokens;
    const auto files = export_analysis(ck.model, capture.template cast<double>(), dir, opt);
    write_manifest(dir, "visualize", a.checkpoint, a.seed, common.precision, args);
    out << "wrote " << files.size() << " files to " << dir.string() << '\n';
    return ok;
}

template <typename F>
int dispatch(const Common& common, F&& f) {
    if (common.precision == "f64") return f(double{});
    if (common.precision == "f32") return f(float{});
    throw InputError("--precision must be f32 or f64");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Gaussian kernel attention toolkit"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--threads", common.threads, "worker threads (0 = hardware concurrency)");
    app.add_option("--precision", common.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

    CountArgs ca;
    auto* count = app.add_subcommand("count", "parameter and FLOP report");
    count->add_option("--preset", ca.preset, "preset name");
    count->add_option("--config", ca.config, "config file");
    count->add_option("--seq-len", ca.seq, "override sequence length (LM) or image size (vision)");
    count->add_flag("--json", ca.json_only, "print JSON only");
    count->add_option("--out", ca.out, "also write cost.json and manifest.json here");

    BenchArgs ba;
    auto* bench = app.add_subcommand("bench", "naive vs streaming GKA throughput");
    bench->add_option("--preset", ba.preset, "preset providing width/heads/mask");
    bench->add_option("--seq-lens", ba.seq_lens, "comma-separated sequence lengths");
    bench->add_option("--path", ba.path, "naive, streaming or both");
    bench->add_option("--tiles", ba.tiles, "tile size, e.g. 64 or 64x32");
    bench->add_option("--batch", ba.batch);
    bench->add_option("--warmup", ba.warmup);
    bench->add_option("--iters", ba.iters);
    bench->add_option("--seed", ba.seed);
    bench->add_option("--out", ba.out);

    GradArgs ga;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient certification");
    grad->add_option("--target", ga.target, "all, op, linear, gka, mha, vlt, block, model");
    grad->add_option("--seed", ga.seed);
    grad->add_option("--seeds", ga.seeds, "number of consecutive seeds");
    grad->add_option("--tolerance", ga.tolerance);
    grad->add_option("--abs-floor", ga.abs_floor, "absolute discrepancy treated as agreement (default 1e-9 for model, 0 otherwise)");
    grad->add_flag("--corrupt", ga.corrupt, "negate analytic gradients (must fail)");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "toy training run");
    train->add_option("--task", ta.task, "copy_lm, cluster_regression or quadrants");
    train->add_option("--preset", ta.preset);
    train->add_option("--config", ta.config);
    train->add_option("--steps", ta.steps);
    train->add_option("--batch", ta.batch);
    train->add_option("--lr", ta.lr);
    train->add_option("--log-every", ta.log_every);
    train->add_option("--seed", ta.seed);
    train->add_option("--stop-accuracy", ta.stop_accuracy, "stop once a logged batch accuracy reaches this (0 = off)");
    train->add_option("--sigma-init", ta.sigma_init, "initial sigma for cluster_regression");
    train->add_option("--out", ta.out);

    VisArgs va;
    auto* vis = app.add_subcommand("visualize", "attention analysis export");
    vis->add_option("--checkpoint", va.checkpoint)->required();
    vis->add_option("--input", va.input, "image values or token ids, whitespace/comma separated");
    vis->add_option("--out", va.out);
    vis->add_option("--seed", va.seed, "seed for the generated input when --input is absent");
    vis->add_option("--max-tokens", va.max_tokens);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::ParseError& e) {
        err << e.what() << '\n';
        return config_error;
    }

    try {
        set_max_threads(common.threads);
        if (*count) return cmd_count(ca, args, out);
        if (*bench) return dispatch(common, [&](auto t) { return run_bench<decltype(t)>(ba, common, args, out, err); });
        if (*grad) return cmd_gradcheck(ga, out);
        if (*train) return dispatch(common, [&](auto t) { return run_train<decltype(t)>(ta, common, args, out); });
        if (*vis) return dispatch(common, [&](auto t) { return run_visualize<decltype(t)>(va, common, args, out); });
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return numeric_error;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return config_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return config_error;
    }
    return ok;
}

}  // namespace gka::cli
