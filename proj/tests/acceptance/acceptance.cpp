// Acceptance checks P1-P10. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass a list of ids (e.g. `P5 P7`) to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gka/analysis.hpp"
#include "gka/cost.hpp"
#include "gka/ops.hpp"
#include "gka/streaming.hpp"
#include "gka/training.hpp"
#include "invariants.hpp"
#include "oracles.hpp"

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream note;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            if (!pass) note << "; ";
            pass = false;
            note << what;
        }
    }
};

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- P1 ---------------------------------------------------------------------

void p1(Outcome& o) {
    const char* sizes[] = {"ti", "s", "b"};
    const double deit[] = {5.72e6, 22.05e6, 86.57e6}, gka_total[] = {4.38e6, 16.73e6, 65.31e6};
    const double attn[] = {0.44e6, 1.77e6, 7.09e6};
    const std::uint64_t sigmas[] = {36, 72, 144};
    for (int i = 0; i < 3; ++i) {
        const auto d = gka::count_params(gka::preset(std::string("deit-") + sizes[i]));
        const auto g = gka::count_params(gka::preset(std::string("gka-") + sizes[i]));
        o.check(rel(d.total_params, deit[i]) <= 0.01, std::string("deit-") + sizes[i] + " total " + std::to_string(d.total_params));
        o.check(rel(g.total_params, gka_total[i]) <= 0.01, std::string("gka-") + sizes[i] + " total " + std::to_string(g.total_params));
        o.check(rel(g.attn_params, attn[i]) <= 0.01, std::string("gka-") + sizes[i] + " attention " + std::to_string(g.attn_params) +
                                                          " is " + fmt("%.2f%%", 100 * rel(g.attn_params, attn[i])) + " from " +
                                                          fmt("%.2fM", attn[i] / 1e6));
        o.check(g.sigma_params == sigmas[i], std::string("gka-") + sizes[i] + " sigma count " + std::to_string(g.sigma_params));
    }
    if (o.pass) o.note << "gka-ti " << gka::count_params(gka::preset("gka-ti")).total_params << " params";
}

void p2(Outcome& o) {
    const auto v = gka::count_params(gka::preset("vlt-ti"));
    o.check(rel(v.total_params, 5.28e6) <= 0.01, "vlt-ti total " + std::to_string(v.total_params));
    if (o.pass) o.note << "vlt-ti " << v.total_params << " params";
}

void p3(Outcome& o) {
    const char* sizes[] = {"ti", "s", "b"};
    const double delta[] = {-21.1, -22.7, -23.8}, absolute[] = {1.98e9, 7.11e9, 26.76e9};
    for (int i = 0; i < 3; ++i) {
        const double g = gka::count_flops(gka::preset(std::string("gka-") + sizes[i])).flops_forward;
        const double d = gka::count_flops(gka::preset(std::string("deit-") + sizes[i])).flops_forward;
        const double pct = 100.0 * (g / d - 1.0);
        o.check(std::abs(pct - delta[i]) <= 2.0, std::string(sizes[i]) + " delta " + fmt("%.2f%%", pct));
        o.check(rel(g, absolute[i]) <= 0.10, std::string(sizes[i]) + " absolute " + fmt("%.3gG", g / 1e9));
        if (o.pass) o.note << sizes[i] << " " << fmt("%+.1f%%", pct) << " " << fmt("%.2fG", g / 1e9) << (i < 2 ? ", " : "");
    }
}

void p4(Outcome& o) {
    const auto r = gka::count_flops(gka::preset("gka-lm-d20"));
    o.check(rel(r.total_params, 378e6) <= 0.02, "params " + std::to_string(r.total_params));
    o.check(rel(r.train_flops_per_token, 2.4143e9) <= 0.05, "flops/token " + std::to_string(r.train_flops_per_token));
    if (o.pass) o.note << r.total_params << " params, " << r.train_flops_per_token << " FLOPs/token";
}

// ---- P5 ---------------------------------------------------------------------

void p5(Outcome& o) {
    std::mt19937_64 rng(2024);
    const std::size_t tiles[] = {16, 33, 128};
    double worst64 = 0, worst32 = 0;
    for (int c = 0; c < 50; ++c) {
        const std::size_t heads = 1 + rng() % 3, d = 2 * (1 + rng() % 8), width = heads * d;
        const std::size_t n = 1 + rng() % 300, batch = 1 + rng() % 2;
        gka::MaskSpec mask;
        switch (c % 4) {
            case 0: mask = gka::MaskSpec::none(); break;
            case 1: mask = gka::MaskSpec::causal(); break;
            case 2: mask = gka::MaskSpec::causal_window(1 + rng() % 64); break;
            default: mask = {gka::MaskKind::causal_window, 1 + rng() % 64, "SL"}; break;
        }
        const gka::TileConfig t{tiles[c % 3], tiles[(c / 3) % 3]};
        auto p = oracle::random_gka<double>(width, heads, rng);
        if (c % 5 == 4) p.features = {true, true, 10000.0};
        const auto x = oracle::randn({batch, n, width}, rng);
        const std::size_t layer = rng() % 2;
        worst64 = std::max(worst64, gka::norm_rel_diff(gka::gka_forward_streaming(x, p, mask, layer, t),
                                                       gka::gka_forward(x, p, mask, layer)));
        gka::GkaLayerParams<float> pf;
        pf.log_sigma = p.log_sigma.cast<float>();
        pf.w_o = p.w_o.cast<float>();
        pf.b_o = p.b_o.cast<float>();
        pf.features = p.features;
        const auto xf = x.cast<float>();
        worst32 = std::max(worst32, gka::norm_rel_diff(gka::gka_forward_streaming(xf, pf, mask, layer, t),
                                                       gka::gka_forward(xf, pf, mask, layer)));
    }
    o.check(worst64 <= 1e-10, "double max rel diff " + fmt("%.3g", worst64));
    o.check(worst32 <= 1e-5, "single max rel diff " + fmt("%.3g", worst32));

    auto p = oracle::random_gka<double>(64, 4, rng);
    std::size_t peaks[2];
    for (int i = 0; i < 2; ++i) {
        gka::WorkspaceStats s;
        gka::gka_forward_streaming(oracle::randn({1, 256u << i, 64}, rng), p, gka::MaskSpec::none(), 0, {64, 64}, &s);
        peaks[i] = s.peak_elements;
    }
    o.check(peaks[1] <= peaks[0], "workspace grew " + std::to_string(peaks[0]) + " -> " + std::to_string(peaks[1]));
    if (o.pass)
        o.note << "max rel diff f64 " << fmt("%.2g", worst64) << ", f32 " << fmt("%.2g", worst32) << "; workspace "
               << peaks[0] << " elems at N=256 and N=512";
}

// ---- P6 ---------------------------------------------------------------------

void p6(Outcome& o) {
    gka::GradCheckOptions opt;  // relative criterion alone, no absolute floor
    double worst = 0;
    for (const char* target : {"gka", "mha", "block"}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto r = gka::grad_check(target, seed, opt);
            worst = std::max(worst, r.max_rel_error());
            o.check(r.passed(), std::string(target) + " seed " + std::to_string(seed) + " rel " + fmt("%.3g", r.max_rel_error()));
        }
        auto bad = opt;
        bad.corrupt = true;
        o.check(!gka::grad_check(target, 0, bad).passed(), std::string(target) + " negative control passed");
    }
    if (o.pass) o.note << "60 checks, max rel err " << fmt("%.2g", worst) << "; sign-flipped backward rejected";
}

// ---- P7 ---------------------------------------------------------------------

void p7(Outcome& o) {
    int failures = 0;
    for (std::uint64_t t = 0; t < 1000; ++t) {
        const auto err = invariants::run_trial(static_cast<int>(t % invariants::kKinds), 77'000 + t);
        if (err) {
            if (failures++ < 3) o.check(false, *err);
        }
    }
    if (failures > 3) o.note << "; " << failures << " failures in total";
    if (o.pass) o.note << "1000 trials over " << invariants::kKinds << " properties";
}

// ---- P8 ---------------------------------------------------------------------

void p8(Outcome& o) {
    const gka::ClusterTaskSpec spec;
    std::mt19937_64 rng(8);
    const auto batch = gka::gen_cluster_regression(spec, rng);
    double best = 1e9, best_sigma = 0;
    for (double s = 0.05; s < 8.0; s *= 1.5) {
        const double e = gka::relative_error(gka::cluster_predict(gka::make_cluster_model(spec.dim, s), batch.tokens),
                                             batch.targets);
        if (e < best) best = e, best_sigma = s;
    }
    o.check(best <= 0.10, "best relative error " + fmt("%.3g", best));

    auto model = gka::make_cluster_model(spec.dim, 10.0);
    gka::TrainConfig tc;
    tc.steps = 100;
    tc.log_every = 1;
    tc.optimizer.lr = 0.05;
    tc.optimizer.weight_decay = 0.0;
    const auto trace = gka::train_cluster_regression(model, spec, tc);
    bool decreasing = trace.rows.size() == 100;
    for (std::size_t i = 1; i < trace.rows.size(); ++i) decreasing = decreasing && trace.rows[i].loss < trace.rows[i - 1].loss;
    o.check(decreasing, "loss not strictly decreasing over 100 steps");
    if (o.pass)
        o.note << "rel err " << fmt("%.2g", best) << " at sigma " << fmt("%.2f", best_sigma) << "; learned sigma 10 -> "
               << fmt("%.2f", trace.rows.back().sigmas[0]) << ", loss " << fmt("%.3g", trace.rows.front().loss)
               << " -> " << fmt("%.3g", trace.rows.back().loss);
}

// ---- P9 ---------------------------------------------------------------------

void p9(Outcome& o) {
    const gka::ModelConfig c = gka::preset("gka-lm-toy");
    const gka::CopyTaskSpec task;  // 8 symbols, delimiter, 8 copied symbols
    gka::TrainConfig tc;
    tc.steps = 3000;
    tc.log_every = 50;
    tc.seed = 3;
    tc.optimizer.lr = 3e-3;
    tc.stop_accuracy = 0.99;
    auto run = [&](std::size_t steps) {
        auto cfg = tc;
        cfg.steps = steps;
        auto m = gka::init_model<double>(c, 1);
        auto trace = gka::train_copy_lm(m, task, cfg);
        return std::pair{std::move(m), std::move(trace)};
    };
    const auto [model, trace] = run(tc.steps);
    const std::size_t steps = trace.rows.back().step + 1;
    const double acc = gka::eval_copy_lm(model, task, 40, 999);
    o.check(acc >= 0.95, "answer accuracy " + fmt("%.3f", acc) + " after " + std::to_string(steps) + " steps");

    const auto [model2, trace2] = run(steps);
    bool same = trace.rows.size() == trace2.rows.size();
    for (std::size_t i = 0; same && i < trace.rows.size(); ++i)
        same = trace.rows[i].loss == trace2.rows[i].loss && trace.rows[i].sigmas == trace2.rows[i].sigmas;
    same = same && model.head_w == model2.head_w;
    o.check(same, "rerun with the same seed diverged");

    // bytes of a small corpus as tokens through a byte-vocabulary model
    const std::string corpus = "the quick brown fox jumps over the lazy dog\n";
    auto bc = c;
    bc.vocab_size = 256;
    bc.seq_len = corpus.size();
    const auto byte_model = gka::init_model<double>(bc, 2);
    gka::TokenBatch tokens{1, corpus.size(), {}};
    std::vector<std::int64_t> targets;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        tokens.ids.push_back(static_cast<unsigned char>(corpus[i]));
        targets.push_back(i + 1 < corpus.size() ? static_cast<unsigned char>(corpus[i + 1]) : gka::kIgnoreTarget);
    }
    const auto ce = gka::cross_entropy(gka::lm_forward(byte_model, tokens), targets);
    const double bpb = gka::bits_per_byte(ce.total_nats, ce.count);
    const double expect = ce.total_nats / static_cast<double>(ce.count) / std::numbers::ln2;
    o.check(std::abs(bpb - expect) <= 4 * std::numeric_limits<double>::epsilon() * expect,
            "bpb " + fmt("%.17g", bpb) + " vs nats/ln2 " + fmt("%.17g", expect));
    o.check(bpb == ce.total_nats / (std::numbers::ln2 * static_cast<double>(corpus.size() - 1)), "bpb definition");
    if (o.pass)
        o.note << "answer accuracy " << fmt("%.3f", acc) << " after " << steps << " steps, rerun identical; bpb "
               << fmt("%.4f", bpb) << " = nats/ln2";
}

// ---- P10 --------------------------------------------------------------------

void p10(Outcome& o) {
    // real mixing matrices from a small vision model
    const auto model = gka::init_model<double>(gka::preset("gka-vit-toy"), 5);
    std::mt19937_64 rng(5);
    gka::AttentionCapture<double> cap;
    gka::vit_forward(model, oracle::randn({1, 1, 32, 32}, rng), &cap);
    const std::size_t layers = model.config.depth, heads = model.config.heads;
    const auto want = oracle::rollout(cap, layers, heads, 0.5);
    const auto got = gka::rollout_matrix(cap, 0.0);
    const double diff = gka::max_abs_diff(got, want);
    o.check(diff <= 1e-8, "oracle diff " + fmt("%.3g", diff));
    o.check(got == want, "ratio 0 is not bitwise equal to the unthresholded product");
    const auto grids = gka::attention_rollout(cap, {}, model.config.grid());
    for (std::size_t t = 0; t < grids[0].grid.size(); ++t) o.check(grids[0].grid[t] == want.at(0, t + 1), "grid entry");

    const std::size_t n = 17;
    gka::AttentionCapture<double> uniform;
    for (std::size_t l = 0; l < 3; ++l)
        for (std::size_t h = 0; h < 2; ++h) uniform.record(l, 0, h, gka::Tensor<double>({n, n}, 1.0 / n));
    const auto r = gka::rollout_matrix(uniform, 0.0);
    const double p = 0.125;
    double closed = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            closed = std::max(closed, std::abs(r.at(i, j) - ((1 - p) / n + (i == j ? p : 0.0))));
    o.check(closed <= 1e-12, "uniform closed form off by " + fmt("%.3g", closed));
    if (o.pass) o.note << "oracle diff " << fmt("%.2g", diff) << ", ratio 0 bitwise equal, uniform closed form within " << fmt("%.1g", closed);
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> checks = {
        {"P1", p1}, {"P2", p2}, {"P3", p3}, {"P4", p4}, {"P5", p5},
        {"P6", p6}, {"P7", p7}, {"P8", p8}, {"P9", p9}, {"P10", p10}};
    const std::set<std::string> only(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& [id, fn] : checks) {
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn(o);
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%-4s %s  %s (%.2f s)\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.note.str().c_str(), sec);
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
