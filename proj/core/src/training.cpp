#include "gka/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include "gka/baseline_attention.hpp"
#include "gka/errors.hpp"
#include "gka/ops.hpp"

namespace gka {

bool decay_exempt(ParamKind kind) noexcept {
    switch (kind) {
        case ParamKind::bias:
        case ParamKind::norm:
        case ParamKind::log_sigma:
        case ParamKind::position:
        case ParamKind::cls: return true;
        case ParamKind::weight:
        case ParamKind::embedding: return false;
    }
    return false;
}

template <typename T>
std::vector<ParamRef<T>> param_refs(Model<T>& model, const Model<T>& grads) {
    std::vector<ParamRef<T>> refs;
    visit_params(model, [&](const std::string& name, Tensor<T>& t, ParamKind kind) {
        refs.push_back({name, &t, nullptr, kind});
    });
    std::size_t i = 0;
    visit_params(grads, [&](const std::string& name, const Tensor<T>& g, ParamKind) {
        if (i >= refs.size() || refs[i].name != name || refs[i].value->shape() != g.shape()) {
            throw ShapeError("gradient registry does not match parameters at '" + name + "'");
        }
        refs[i++].grad = &g;
    });
    if (i != refs.size()) throw ShapeError("gradient registry is missing tensors");
    return refs;
}

template <typename T>
void adamw_step(const std::vector<ParamRef<T>>& params, OptimizerState& state) {
    for (const auto& p : params) {
        if (!p.value || !p.grad) throw ParameterError("adamw_step: unbound parameter '" + p.name + "'");
        expect_shape(*p.grad, p.value->shape(), ("gradient of " + p.name).c_str());
        for (std::size_t i = 0; i < p.grad->size(); ++i) {
            if (!std::isfinite(static_cast<double>((*p.grad)[i]))) {
                throw NumericError("non-finite gradient in '" + p.name + "' at element " + std::to_string(i) +
                                   " (optimizer step " + std::to_string(state.step + 1) + ")");
            }
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.value->size(), 0.0);
            state.v.emplace_back(p.value->size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");

    const AdamWConfig& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& value = *params[k].value;
        const auto& grad = *params[k].grad;
        auto& m = state.m[k];
        auto& v = state.v[k];
        const double decay = decay_exempt(params[k].kind) ? 0.0 : c.weight_decay;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            double p = static_cast<double>(value[i]);
            p *= 1.0 - c.lr * decay;
            p -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
            value[i] = static_cast<T>(p);
        }
    }
}

template <typename T>
double clip_grad_norm(Model<T>& grads, double max_norm) {
    double sq = 0.0;
    visit_params(grads, [&](const std::string&, const Tensor<T>& g, ParamKind) {
        for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-6));
        visit_params(grads, [&](const std::string&, Tensor<T>& g, ParamKind) { scale_inplace(g, s); });
    }
    return norm;
}

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& targets) {
    const std::size_t classes = logits.shape().back();
    const std::size_t rows = logits.size() / classes;
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    LossResult<T> r;
    r.grad = Tensor<T>(logits.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const std::int64_t t = targets[i];
        if (t == kIgnoreTarget) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= classes) {
            throw InputError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
        ++r.count;
    }
    if (r.count == 0) return r;
    const double inv_count = 1.0 / static_cast<double>(r.count);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::int64_t t = targets[i];
        if (t == kIgnoreTarget) continue;
        const T* row = &logits.data()[i * classes];
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (static_cast<double>(row[c]) > mx) {
                mx = static_cast<double>(row[c]);
                arg = c;
            }
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
        const double lse = mx + std::log(sum);
        r.total_nats += lse - static_cast<double>(row[static_cast<std::size_t>(t)]);
        if (arg == static_cast<std::size_t>(t)) ++r.correct;
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(static_cast<double>(row[c]) - lse);
            const double onehot = c == static_cast<std::size_t>(t) ? 1.0 : 0.0;
            r.grad.data()[i * classes + c] = static_cast<T>((p - onehot) * inv_count);
        }
    }
    r.loss = r.total_nats * inv_count;
    return r;
}

template <typename T>
std::pair<double, Tensor<T>> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    expect_shape(target, pred.shape(), "mse target");
    Tensor<T> grad(pred.shape());
    double sum = 0.0;
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        sum += e * e;
        grad[i] = static_cast<T>(2.0 * e / n);
    }
    return {sum / n, std::move(grad)};
}

double bits_per_byte(double total_nats, std::size_t total_bytes) {
    if (total_bytes == 0) throw InputError("bits_per_byte: total_bytes must be > 0");
    return total_nats / (std::numbers::ln2 * static_cast<double>(total_bytes));
}

// ---- tasks -----------------------------------------------------------------

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::cluster_regression: return "cluster_regression";
        case TaskKind::copy_lm: return "copy_lm";
        case TaskKind::quadrants: return "quadrants";
    }
    return "copy_lm";
}

TaskKind parse_task_kind(const std::string& text) {
    if (text == "cluster_regression") return TaskKind::cluster_regression;
    if (text == "copy_lm") return TaskKind::copy_lm;
    if (text == "quadrants") return TaskKind::quadrants;
    throw InputError("unknown task '" + text + "' (expected cluster_regression, copy_lm, quadrants)");
}

ClusterBatch gen_cluster_regression(const ClusterTaskSpec& spec, std::mt19937_64& rng) {
    if (spec.batch == 0 || spec.tokens == 0 || spec.dim == 0 || spec.clusters == 0) {
        throw InputError("cluster task sizes must be positive");
    }
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, spec.clusters - 1);
    const std::size_t b_n = spec.batch, n = spec.tokens, d = spec.dim, k = spec.clusters;
    ClusterBatch out{Tensor<double>({b_n, n, d}), Tensor<double>({b_n, n, d}), std::vector<std::size_t>(b_n * n)};
    for (std::size_t b = 0; b < b_n; ++b) {
        std::vector<double> centroids(k * d);
        for (auto& c : centroids) c = spec.separation * unit(rng);
        std::vector<double> sums(k * d, 0.0);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = pick(rng);
            out.assignment[b * n + i] = c;
            ++counts[c];
            for (std::size_t j = 0; j < d; ++j) {
                const double v = centroids[c * d + j] + spec.spread * unit(rng);
                out.tokens.at(b, i, j) = v;
                sums[c * d + j] += v;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = out.assignment[b * n + i];
            for (std::size_t j = 0; j < d; ++j) {
                out.targets.at(b, i, j) = sums[c * d + j] / static_cast<double>(counts[c]);
            }
        }
    }
    return out;
}

CopyBatch gen_copy_lm(const CopyTaskSpec& spec, std::mt19937_64& rng) {
    if (spec.vocab < 3 || spec.prefix == 0 || spec.batch == 0) {
        throw InputError("copy task needs vocab >= 3, prefix >= 1, batch >= 1");
    }
    const std::size_t len = spec.length();
    const auto delim = static_cast<std::int64_t>(spec.vocab - 1);
    std::uniform_int_distribution<std::int64_t> sym(0, delim - 1);
    CopyBatch out;
    out.tokens = {spec.batch, len, std::vector<std::int64_t>(spec.batch * len)};
    out.targets.assign(spec.batch * len, kIgnoreTarget);
    for (std::size_t b = 0; b < spec.batch; ++b) {
        std::int64_t* row = &out.tokens.ids[b * len];
        for (std::size_t i = 0; i < spec.prefix; ++i) row[i] = sym(rng);
        row[spec.prefix] = delim;
        for (std::size_t i = 0; i < spec.prefix; ++i) row[spec.prefix + 1 + i] = row[i];
        // position t predicts token t + 1; answers are the copied half
        for (std::size_t t = spec.prefix; t + 1 < len; ++t) out.targets[b * len + t] = row[t + 1];
    }
    return out;
}

ImageBatch gen_quadrants(const QuadrantTaskSpec& spec, std::mt19937_64& rng) {
    if (spec.batch == 0 || spec.image_size < 2 || spec.image_size % 2 != 0) {
        throw InputError("quadrant task needs batch >= 1 and an even image size");
    }
    const std::size_t s = spec.image_size, half = s / 2;
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::uniform_int_distribution<std::int64_t> pick(0, 3);
    ImageBatch out{Tensor<double>({spec.batch, 1, s, s}), std::vector<std::int64_t>(spec.batch)};
    for (std::size_t b = 0; b < spec.batch; ++b) {
        const std::int64_t label = pick(rng);
        out.labels[b] = label;
        const std::size_t qy = static_cast<std::size_t>(label / 2), qx = static_cast<std::size_t>(label % 2);
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const bool lit = y / half == qy && x / half == qx;
                out.images[(b * s + y) * s + x] = (lit ? 1.0 : 0.0) + noise(rng);
            }
        }
    }
    return out;
}

// ---- training loops --------------------------------------------------------

void write_metrics_csv(std::ostream& out, const MetricsTrace& trace) {
    out << "step,loss,accuracy,bpb";
    for (std::size_t l = 0; l < trace.layers; ++l)
        for (std::size_t h = 0; h < trace.heads; ++h) out << ",sigma_L" << l << "_H" << h;
    out << '\n';
    std::ostringstream line;
    for (const auto& r : trace.rows) {
        line.str({});
        line << std::setprecision(9) << r.step << ',' << r.loss << ',' << r.accuracy << ',' << r.bpb;
        for (double s : r.sigmas) line << ',' << s;
        out << line.str() << '\n';
    }
}

namespace {

template <typename T>
std::vector<double> sigma_row(const Model<T>& model) {
    const Tensor<double> ls = collect_log_sigma(model);
    std::vector<double> out;
    for (double v : ls.values()) out.push_back(std::exp(v));
    return out;
}

template <typename T>
MetricsTrace make_trace(const Model<T>& model) {
    MetricsTrace t;
    if (model.config.attention == AttentionKind::gka) {
        t.layers = model.config.depth;
        t.heads = model.config.heads;
    }
    return t;
}

bool should_log(const TrainConfig& c, std::size_t step) {
    return c.log_every == 0 ? step + 1 == c.steps : (step % c.log_every == 0 || step + 1 == c.steps);
}

bool reached(const TrainConfig& c, const MetricsRow& row) {
    return c.stop_accuracy > 0.0 && row.accuracy >= c.stop_accuracy;
}

template <typename T>
void check_finite_loss(double loss, std::size_t step, double last_good) {
    if (std::isfinite(loss)) return;
    std::ostringstream msg;
    msg << "non-finite loss at step " << step;
    if (step > 0)
        msg << "; last finite loss " << last_good << " at step " << step - 1;
    else
        msg << " (no finite step yet)";
    throw NumericError(msg.str());
}

/// One optimizer step from a filled gradient model.
template <typename T>
void apply_update(Model<T>& model, Model<T>& grads, OptimizerState& opt, const TrainConfig& config) {
    if (config.clip_norm > 0.0) clip_grad_norm(grads, config.clip_norm);
    adamw_step(param_refs(model, grads), opt);
}

}  // namespace

template <typename T>
MetricsTrace train_copy_lm(Model<T>& model, const CopyTaskSpec& task, const TrainConfig& config,
                           const StepCallback& on_log) {
    if (model.config.family != ModelFamily::causal_lm) throw ParameterError("copy_lm needs a causal_lm model");
    if (task.length() > model.config.seq_len || task.vocab > model.config.vocab_size) {
        throw ParameterError("copy task (length " + std::to_string(task.length()) + ", vocab " +
                             std::to_string(task.vocab) + ") does not fit the model");
    }
    std::mt19937_64 data_rng(config.seed);
    std::mt19937_64 drop_rng(config.seed + 1);
    OptimizerState opt;
    opt.config = config.optimizer;
    MetricsTrace trace = make_trace(model);
    CopyBatch fixed;
    if (config.fixed_batch) fixed = gen_copy_lm(task, data_rng);
    double last_good = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const CopyBatch batch = config.fixed_batch ? fixed : gen_copy_lm(task, data_rng);
        ModelCache<T> cache;
        const Tensor<T> logits = lm_forward(model, batch.tokens, nullptr, {true, &drop_rng, &cache});
        const LossResult<T> ce = cross_entropy(logits, batch.targets);
        check_finite_loss<T>(ce.loss, step, last_good);
        last_good = ce.loss;
        if (should_log(config, step)) {
            MetricsRow row{step, ce.loss, static_cast<double>(ce.correct) / static_cast<double>(ce.count),
                           bits_per_byte(ce.total_nats, ce.count), sigma_row(model)};
            if (on_log) on_log(row);
            trace.rows.push_back(std::move(row));
            if (reached(config, trace.rows.back())) break;
        }
        Model<T> grads = zeros_like(model);
        lm_backward(model, cache, ce.grad, grads);
        apply_update(model, grads, opt, config);
    }
    return trace;
}

template <typename T>
double eval_copy_lm(const Model<T>& model, const CopyTaskSpec& task, std::size_t batches, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t correct = 0, count = 0;
    for (std::size_t i = 0; i < batches; ++i) {
        const CopyBatch batch = gen_copy_lm(task, rng);
        const LossResult<T> ce = cross_entropy(lm_forward(model, batch.tokens), batch.targets);
        correct += ce.correct;
        count += ce.count;
    }
    return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0;
}

template <typename T>
MetricsTrace train_quadrants(Model<T>& model, const QuadrantTaskSpec& task, const TrainConfig& config,
                             const StepCallback& on_log) {
    const ModelConfig& c = model.config;
    if (c.family != ModelFamily::vit || c.channels != 1 || c.image_size != task.image_size || c.num_classes < 4) {
        throw ParameterError("quadrant task needs a 1-channel vit model with image_size " +
                             std::to_string(task.image_size) + " and >= 4 classes");
    }
    std::mt19937_64 data_rng(config.seed);
    std::mt19937_64 drop_rng(config.seed + 1);
    OptimizerState opt;
    opt.config = config.optimizer;
    MetricsTrace trace = make_trace(model);
    ImageBatch fixed;
    if (config.fixed_batch) fixed = gen_quadrants(task, data_rng);
    double last_good = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const ImageBatch batch = config.fixed_batch ? fixed : gen_quadrants(task, data_rng);
        ModelCache<T> cache;
        const Tensor<T> logits =
            vit_forward(model, batch.images.template cast<T>(), nullptr, {true, &drop_rng, &cache});
        const LossResult<T> ce = cross_entropy(logits, batch.labels);
        check_finite_loss<T>(ce.loss, step, last_good);
        last_good = ce.loss;
        if (should_log(config, step)) {
            MetricsRow row{step, ce.loss, static_cast<double>(ce.correct) / static_cast<double>(ce.count), 0.0,
                           sigma_row(model)};
            if (on_log) on_log(row);
            trace.rows.push_back(std::move(row));
            if (reached(config, trace.rows.back())) break;
        }
        Model<T> grads = zeros_like(model);
        vit_backward(model, cache, ce.grad, grads);
        apply_update(model, grads, opt, config);
    }
    return trace;
}

ClusterModel make_cluster_model(std::size_t dim, double sigma) {
    if (!(sigma > 0.0)) throw ParameterError("cluster model sigma must be > 0");
    ClusterModel m;
    m.layer.log_sigma = Tensor<double>({1}, std::log(sigma));
    m.layer.w_o = Tensor<double>({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) m.layer.w_o.at(i, i) = 1.0;
    return m;
}

Tensor<double> cluster_predict(const ClusterModel& model, const Tensor<double>& tokens) {
    return gka_forward(tokens, model.layer, MaskSpec::none(), 0);
}

double relative_error(const Tensor<double>& pred, const Tensor<double>& target) {
    expect_shape(pred, target.shape(), "relative_error prediction");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        num += (pred[i] - target[i]) * (pred[i] - target[i]);
        den += target[i] * target[i];
    }
    if (den == 0.0) throw NumericError("relative_error: target has zero norm");
    return std::sqrt(num / den);
}

MetricsTrace train_cluster_regression(ClusterModel& model, const ClusterTaskSpec& task, const TrainConfig& config,
                                      const StepCallback& on_log) {
    std::mt19937_64 rng(config.seed);
    const ClusterBatch batch = gen_cluster_regression(task, rng);
    OptimizerState opt;
    opt.config = config.optimizer;
    MetricsTrace trace{1, model.layer.heads(), {}};
    double last_good = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const Tensor<double> pred = cluster_predict(model, batch.tokens);
        auto [loss, grad] = mse_loss(pred, batch.targets);
        check_finite_loss<double>(loss, step, last_good);
        last_good = loss;
        if (should_log(config, step)) {
            MetricsRow row{step, loss, 0.0, 0.0, {}};
            for (double v : model.layer.log_sigma.values()) row.sigmas.push_back(std::exp(v));
            if (on_log) on_log(row);
            trace.rows.push_back(std::move(row));
        }
        const GkaGrads<double> g = gka_backward(batch.tokens, model.layer, MaskSpec::none(), 0, grad);
        adamw_step(std::vector<ParamRef<double>>{{"log_sigma", &model.layer.log_sigma, &g.log_sigma,
                                                  ParamKind::log_sigma}},
                   opt);
    }
    return trace;
}

// ---- gradient checking -----------------------------------------------------

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
}

double grad_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

std::vector<std::string> grad_check_targets() { return {"linear", "gka", "mha", "vlt", "block", "model"}; }

namespace {

using Td = Tensor<double>;

Td random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Td t(std::move(shape));
    std::normal_distribution<double> dist(0.0, scale);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

double dot_all(const Td& a, const Td& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

struct Probe {
    std::string name;
    Td* param;
    Td analytic;
    // Gradient is identically zero (a key bias shifts every score of a softmax
    // row equally). Central differences only see roundoff there, so the check
    // is |analytic| <= 1e-12 and |numeric| <= 1e-6 instead of a ratio.
    bool expect_zero = false;
};

bool is_key_bias(const std::string& name) {
    return name.size() >= 3 && name.compare(name.size() - 3, 3, "b_k") == 0;
}

/// Compares analytic gradients against central differences of `loss`.
/// `analytic` holds gradients evaluated at the unperturbed point.
void check_probes(std::vector<Probe>& probes, const std::function<double()>& loss, const GradCheckOptions& o,
                  GradCheckReport& report) {
    for (auto& p : probes) {
        GradGroupReport g{p.name, 0, 0.0, 0.0};
        const std::size_t n = p.param->size();
        const std::size_t count = std::min(n, std::max<std::size_t>(o.max_elements, 1));
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t i = count == n ? s : (s * n) / count + (s * 7919) % std::max<std::size_t>(n / count, 1);
            double& x = (*p.param)[i];
            const double saved = x;
            auto at = [&](double offset) {
                x = saved + offset;
                return loss();
            };
            // fourth-order central stencil; the plain two-point rule leaves
            // O(h^2) truncation error comparable to the smallest gradients
            const double h = o.step;
            const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
            x = saved;
            const double analytic = o.corrupt ? -p.analytic[i] : p.analytic[i];
            if (p.expect_zero) {
                const bool zero = std::abs(analytic) <= 1e-12 && std::abs(numeric) <= 1e-6;
                g.max_rel_error = std::max(g.max_rel_error, zero ? 0.0 : 1.0);
            } else {
                const bool resolved = std::abs(analytic - numeric) <= o.abs_floor;
                g.max_rel_error = std::max(g.max_rel_error, resolved ? 0.0 : grad_rel_error(analytic, numeric));
            }
            g.max_abs_error = std::max(g.max_abs_error, std::abs(analytic - numeric));
            ++g.checked;
        }
        report.groups.push_back(g);
    }
}

void check_linear(std::uint64_t seed, const GradCheckOptions& o, GradCheckReport& rep) {
    std::mt19937_64 rng(seed);
    Td x = random_tensor({2, 3, 5}, rng), w = random_tensor({5, 4}, rng), b = random_tensor({4}, rng);
    const Td r = random_tensor({2, 3, 4}, rng);
    Td gw({5, 4}), gb({4});
    Td gx = linear_backward(x, w, r, gw, &gb);
    std::vector<Probe> probes{{"linear.x", &x, gx}, {"linear.w", &w, gw}, {"linear.b", &b, gb}};
    check_probes(probes, [&] { return dot_all(linear(x, w, b), r); }, o, rep);
}

struct GkaCase {
    std::string label;
    MaskSpec mask;
    FeatureTransform features;
};

std::vector<GkaCase> gka_cases() {
    return {{"none", MaskSpec::none(), {}},
            {"causal", MaskSpec::causal(), {}},
            {"window", MaskSpec::causal_window(3), {}},
            {"causal+rope+norm", MaskSpec::causal(), {true, true, 10000.0}}};
}

GkaLayerParams<double> random_gka(std::size_t d_model, std::size_t heads, std::mt19937_64& rng) {
    GkaLayerParams<double> p;
    std::uniform_real_distribution<double> ls(0.3, 1.2);
    p.log_sigma = Td({heads});
    for (auto& v : p.log_sigma.data()) v = ls(rng);
    p.w_o = random_tensor({d_model, d_model}, rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
    p.b_o = random_tensor({d_model}, rng, 0.1);
    return p;
}

void check_gka(std::uint64_t seed, const GradCheckOptions& o, GradCheckReport& rep) {
    for (const auto& c : gka_cases()) {
        std::mt19937_64 rng(seed);
        Td x = random_tensor({2, 6, 8}, rng);
        GkaLayerParams<double> p = random_gka(8, 2, rng);
        p.features = c.features;
        const Td r = random_tensor({2, 6, 8}, rng);
        const GkaGrads<double> g = gka_backward(x, p, c.mask, 0, r);
        const std::string pre = "gka[" + c.label + "].";
        std::vector<Probe> probes{{pre + "x", &x, g.x},
                                  {pre + "log_sigma", &p.log_sigma, g.log_sigma},
                                  {pre + "w_o", &p.w_o, g.w_o},
                                  {pre + "b_o", &p.b_o, g.b_o}};
        check_probes(probes, [&] { return dot_all(gka_forward(x, p, c.mask, 0), r); }, o, rep);
    }
}

void check_mha(std::uint64_t seed, MhaVariant variant, const GradCheckOptions& o, GradCheckReport& rep) {
    const std::string tag = variant == MhaVariant::vlt ? "vlt" : "mha";
    const std::vector<std::pair<std::string, MaskSpec>> masks{{"none", MaskSpec::none()},
                                                              {"causal", MaskSpec::causal()}};
    for (const auto& [label, mask] : masks) {
        std::mt19937_64 rng(seed);
        const std::size_t dm = 8;
        const double s = 1.0 / std::sqrt(static_cast<double>(dm));
        Td x = random_tensor({2, 5, dm}, rng);
        MhaLayerParams<double> p;
        p.num_heads = 2;
        p.variant = variant;
        p.w_q = random_tensor({dm, dm}, rng, s);
        p.b_q = random_tensor({dm}, rng, 0.1);
        p.w_k = random_tensor({dm, dm}, rng, s);
        p.b_k = random_tensor({dm}, rng, 0.1);
        if (variant == MhaVariant::standard) {
            p.w_v = random_tensor({dm, dm}, rng, s);
            p.b_v = random_tensor({dm}, rng, 0.1);
        }
        p.w_o = random_tensor({dm, dm}, rng, s);
        p.b_o = random_tensor({dm}, rng, 0.1);
        const Td r = random_tensor({2, 5, dm}, rng);
        const MhaGrads<double> g = mha_backward(x, p, mask, 0, r);
        const std::string pre = tag + "[" + label + "].";
        std::vector<Probe> probes{{pre + "x", &x, g.x},         {pre + "w_q", &p.w_q, g.w_q},
                                  {pre + "b_q", &p.b_q, g.b_q}, {pre + "w_k", &p.w_k, g.w_k},
                                  {pre + "b_k", &p.b_k, g.b_k, true}, {pre + "w_o", &p.w_o, g.w_o},
                                  {pre + "b_o", &p.b_o, g.b_o}};
        if (variant == MhaVariant::standard) {
            probes.push_back({pre + "w_v", &p.w_v, g.w_v});
            probes.push_back({pre + "b_v", &p.b_v, g.b_v});
        }
        check_probes(probes, [&] { return dot_all(mha_forward(x, p, mask, 0), r); }, o, rep);
    }
}

/// Perturbs every norm gain/bias away from its init so their gradients are
/// exercised at a generic point.
void jitter_norms(Model<double>& m, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 0.1);
    visit_params(m, [&](const std::string&, Td& t, ParamKind kind) {
        if (kind == ParamKind::norm || kind == ParamKind::bias)
            for (auto& v : t.data()) v += dist(rng);
    });
}

std::vector<Probe> model_probes(Model<double>& model, Model<double>& grads, const std::string& prefix) {
    std::vector<Probe> probes;
    std::vector<Td*> values;
    visit_params(model, [&](const std::string&, Td& t, ParamKind) { values.push_back(&t); });
    std::size_t i = 0;
    visit_params(grads, [&](const std::string& name, const Td& g, ParamKind) {
        probes.push_back({prefix + name, values[i++], g, is_key_bias(name)});
    });
    return probes;
}

ModelConfig small_vit(AttentionKind kind) {
    ModelConfig c = preset("gka-vit-toy");
    c.attention = kind;
    c.image_size = 8;
    c.patch_size = 4;
    c.width = 8;
    c.heads = 2;
    c.depth = 2;
    c.mlp_ratio = 2;
    c.num_classes = 3;
    c.name = "gradcheck-vit";
    return c;
}

ModelConfig small_lm() {
    ModelConfig c = preset("gka-lm-toy");
    c.width = 8;
    c.heads = 2;
    c.depth = 2;
    c.mlp_ratio = 2;
    c.vocab_size = 7;
    c.seq_len = 6;
    c.mask = MaskSpec{MaskKind::causal_window, 3, "SL"};
    c.linear_bias = true;
    c.norm_affine = true;
    c.name = "gradcheck-lm";
    return c;
}

void check_block(std::uint64_t seed, const GradCheckOptions& o, GradCheckReport& rep) {
    // two stacked blocks; only the block parameters of the registry are probed
    for (AttentionKind kind : {AttentionKind::gka, AttentionKind::standard}) {
        std::mt19937_64 rng(seed);
        ModelConfig cfg = small_vit(kind);
        Model<double> model = init_model<double>(cfg, seed);
        jitter_norms(model, rng);
        Td x = random_tensor({2, 5, cfg.width}, rng);
        const Td r = random_tensor({2, 5, cfg.width}, rng);
        const MaskSpec mask = MaskSpec::none();
        auto forward = [&](std::vector<BlockCache<double>>* caches) {
            Td h = x;
            for (std::size_t l = 0; l < model.blocks.size(); ++l)
                h = block_forward(h, model.blocks[l], mask, l, false, nullptr, nullptr, caches ? &(*caches)[l] : nullptr);
            return h;
        };
        std::vector<BlockCache<double>> caches(model.blocks.size());
        forward(&caches);
        Model<double> grads = zeros_like(model);
        Td g = r;
        for (std::size_t l = model.blocks.size(); l-- > 0;)
            g = block_backward(model.blocks[l], mask, l, caches[l], g, grads.blocks[l]);

        const std::string pre = std::string("block[") + (kind == AttentionKind::gka ? "gka" : "mha") + "].";
        std::vector<Probe> probes{{pre + "x", &x, g}};
        for (auto& p : model_probes(model, grads, pre))
            if (p.name.rfind(pre + "blocks.", 0) == 0) probes.push_back(std::move(p));
        check_probes(probes, [&] { return dot_all(forward(nullptr), r); }, o, rep);
    }
}

void check_model(std::uint64_t seed, const GradCheckOptions& o, GradCheckReport& rep) {
    {
        std::mt19937_64 rng(seed);
        const ModelConfig cfg = small_lm();
        Model<double> model = init_model<double>(cfg, seed);
        jitter_norms(model, rng);
        TokenBatch tokens{2, cfg.seq_len, {}};
        std::uniform_int_distribution<std::int64_t> sym(0, static_cast<std::int64_t>(cfg.vocab_size) - 1);
        std::vector<std::int64_t> targets;
        for (std::size_t i = 0; i < tokens.batch * tokens.length; ++i) {
            tokens.ids.push_back(sym(rng));
            targets.push_back(i % 3 == 0 ? kIgnoreTarget : sym(rng));
        }
        ModelCache<double> cache;
        const auto ce = cross_entropy(lm_forward(model, tokens, nullptr, {false, nullptr, &cache}), targets);
        Model<double> grads = zeros_like(model);
        lm_backward(model, cache, ce.grad, grads);
        auto probes = model_probes(model, grads, "lm.");
        check_probes(probes, [&] { return cross_entropy(lm_forward(model, tokens), targets).loss; }, o, rep);
    }
    {
        std::mt19937_64 rng(seed + 17);
        const ModelConfig cfg = small_vit(AttentionKind::gka);
        Model<double> model = init_model<double>(cfg, seed);
        jitter_norms(model, rng);
        const Td images = random_tensor({2, cfg.channels, cfg.image_size, cfg.image_size}, rng);
        const std::vector<std::int64_t> labels{0, 2};
        ModelCache<double> cache;
        const auto ce = cross_entropy(vit_forward(model, images, nullptr, {false, nullptr, &cache}), labels);
        Model<double> grads = zeros_like(model);
        vit_backward(model, cache, ce.grad, grads);
        auto probes = model_probes(model, grads, "vit.");
        check_probes(probes, [&] { return cross_entropy(vit_forward(model, images), labels).loss; }, o, rep);
    }
}

}  // namespace

GradCheckReport grad_check(const std::string& target, std::uint64_t seed, const GradCheckOptions& options) {
    GradCheckReport rep;
    rep.target = target;
    rep.tolerance = options.tolerance;
    if (target == "linear")
        check_linear(seed, options, rep);
    else if (target == "gka")
        check_gka(seed, options, rep);
    else if (target == "mha")
        check_mha(seed, MhaVariant::standard, options, rep);
    else if (target == "vlt")
        check_mha(seed, MhaVariant::vlt, options, rep);
    else if (target == "block")
        check_block(seed, options, rep);
    else if (target == "model")
        check_model(seed, options, rep);
    else
        throw InputError("unknown gradcheck target '" + target + "'");
    return rep;
}

#define GKA_INSTANTIATE_TRAINING(T)                                                                              \
    template std::vector<ParamRef<T>> param_refs(Model<T>&, const Model<T>&);                                   \
    template void adamw_step(const std::vector<ParamRef<T>>&, OptimizerState&);                                 \
    template double clip_grad_norm(Model<T>&, double);                                                          \
    template LossResult<T> cross_entropy(const Tensor<T>&, const std::vector<std::int64_t>&);                   \
    template std::pair<double, Tensor<T>> mse_loss(const Tensor<T>&, const Tensor<T>&);                         \
    template MetricsTrace train_copy_lm(Model<T>&, const CopyTaskSpec&, const TrainConfig&, const StepCallback&); \
    template double eval_copy_lm(const Model<T>&, const CopyTaskSpec&, std::size_t, std::uint64_t);             \
    template MetricsTrace train_quadrants(Model<T>&, const QuadrantTaskSpec&, const TrainConfig&,               \
                                          const StepCallback&);

GKA_INSTANTIATE_TRAINING(float)
GKA_INSTANTIATE_TRAINING(double)

}  // namespace gka
