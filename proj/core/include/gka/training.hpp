#pragma once

// Desk-scale training: AdamW, losses and metrics, synthetic tasks, training
// loops and the finite-difference gradient checker.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "gka/kernel_attention.hpp"
#include "gka/model.hpp"
#include "gka/tensor.hpp"

namespace gka {

// ---- optimizer -------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Biases, norm parameters, position embeddings, the class token and every
/// log sigma are exempt from weight decay.
bool decay_exempt(ParamKind kind) noexcept;

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    const Tensor<T>* grad = nullptr;
    ParamKind kind = ParamKind::weight;
};

/// Pairs every parameter of `model` with its slot in `grads` (same structure).
template <typename T>
std::vector<ParamRef<T>> param_refs(Model<T>& model, const Model<T>& grads);

struct OptimizerState {
    AdamWConfig config;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;  // one pair per parameter, in registry order
};

/// Decoupled-decay Adam update. Throws NumericError naming the parameter on a
/// non-finite gradient; nothing is modified in that case.
template <typename T>
void adamw_step(const std::vector<ParamRef<T>>& params, OptimizerState& state);

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(Model<T>& grads, double max_norm);

// ---- losses and metrics ----------------------------------------------------

inline constexpr std::int64_t kIgnoreTarget = -1;

template <typename T>
struct LossResult {
    double loss = 0.0;        // mean nats over counted targets
    double total_nats = 0.0;  // sum over counted targets
    std::size_t count = 0;
    std::size_t correct = 0;  // argmax hits
    Tensor<T> grad;           // d loss / d logits
};

/// Mean token-level cross entropy over rows of `logits` (last axis = classes).
/// Targets equal to kIgnoreTarget are skipped.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& targets);

/// Mean of squared errors over all elements; grad is d loss / d pred.
template <typename T>
std::pair<double, Tensor<T>> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

double bits_per_byte(double total_nats, std::size_t total_bytes);

// ---- synthetic tasks -------------------------------------------------------

enum class TaskKind { cluster_regression, copy_lm, quadrants };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

struct ClusterTaskSpec {
    std::size_t batch = 8;
    std::size_t tokens = 32;
    std::size_t dim = 8;
    std::size_t clusters = 4;
    double separation = 4.0;  // centroid coordinates ~ N(0, separation^2)
    double spread = 0.1;      // within-cluster standard deviation
};

struct ClusterBatch {
    Tensor<double> tokens;   // [B x N x dim]
    Tensor<double> targets;  // empirical mean of each token's cluster, same shape
    std::vector<std::size_t> assignment;
};

ClusterBatch gen_cluster_regression(const ClusterTaskSpec& spec, std::mt19937_64& rng);

/// Sequences [prefix, DELIM, prefix]; DELIM = vocab - 1, prefix symbols are
/// drawn from [0, vocab - 1). Targets are next tokens at the positions whose
/// successor is a copied symbol, kIgnoreTarget elsewhere.
struct CopyTaskSpec {
    std::size_t batch = 32;
    std::size_t vocab = 16;
    std::size_t prefix = 8;

    std::size_t length() const noexcept { return 2 * prefix + 1; }
};

struct CopyBatch {
    TokenBatch tokens;
    std::vector<std::int64_t> targets;  // [batch x length]
};

CopyBatch gen_copy_lm(const CopyTaskSpec& spec, std::mt19937_64& rng);

/// Single-channel images with one bright quadrant; the label is the quadrant
/// index (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
struct QuadrantTaskSpec {
    std::size_t batch = 16;
    std::size_t image_size = 32;
    double noise = 0.3;
};

struct ImageBatch {
    Tensor<double> images;  // [B x 1 x S x S]
    std::vector<std::int64_t> labels;
};

ImageBatch gen_quadrants(const QuadrantTaskSpec& spec, std::mt19937_64& rng);

// ---- training loops --------------------------------------------------------

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t log_every = 10;
    std::uint64_t seed = 0;
    AdamWConfig optimizer;
    double clip_norm = 1.0;    // <= 0 disables clipping
    bool fixed_batch = false;  // reuse the first batch every step
    // Stop after the first logged step whose batch accuracy reaches this
    // value (0 disables). The check happens before that step's update.
    double stop_accuracy = 0.0;
};

struct MetricsRow {
    std::size_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double bpb = 0.0;            // LM tasks only, 0 otherwise
    std::vector<double> sigmas;  // L x H, row-major
};

struct MetricsTrace {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<MetricsRow> rows;
};

/// step,loss,accuracy,bpb,sigma_L{l}_H{h}...
void write_metrics_csv(std::ostream& out, const MetricsTrace& trace);

using StepCallback = std::function<void(const MetricsRow&)>;

/// Next-token training on gen_copy_lm batches. Rows are logged every
/// log_every steps (and at the last step). Throws NumericError on a
/// non-finite loss, naming the last finite step.
template <typename T>
MetricsTrace train_copy_lm(Model<T>& model, const CopyTaskSpec& task, const TrainConfig& config,
                           const StepCallback& on_log = {});

/// Answer-token accuracy of a model on freshly drawn copy batches.
template <typename T>
double eval_copy_lm(const Model<T>& model, const CopyTaskSpec& task, std::size_t batches, std::uint64_t seed);

template <typename T>
MetricsTrace train_quadrants(Model<T>& model, const QuadrantTaskSpec& task, const TrainConfig& config,
                             const StepCallback& on_log = {});

/// Single GKA layer with identity output projection applied to raw tokens.
struct ClusterModel {
    GkaLayerParams<double> layer;
};

ClusterModel make_cluster_model(std::size_t dim, double sigma);

/// Prediction of the cluster model for tokens [B x N x dim].
Tensor<double> cluster_predict(const ClusterModel& model, const Tensor<double>& tokens);

/// |pred - target|_F / |target|_F.
double relative_error(const Tensor<double>& pred, const Tensor<double>& target);

/// Adam on log sigma alone, MSE loss, one fixed batch drawn from the seed.
MetricsTrace train_cluster_regression(ClusterModel& model, const ClusterTaskSpec& task, const TrainConfig& config,
                                      const StepCallback& on_log = {});

// ---- gradient checking -----------------------------------------------------

struct GradGroupReport {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

struct GradCheckReport {
    std::string target;
    double tolerance = 1e-4;
    std::vector<GradGroupReport> groups;

    double max_rel_error() const;
    bool passed() const { return max_rel_error() <= tolerance; }
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    std::size_t max_elements = 48;  // per tensor; larger tensors are sampled deterministically
    bool corrupt = false;           // negate the analytic gradient (negative control)
    // Elements whose absolute discrepancy is at most abs_floor count as
    // matching. Central differences at h = 1e-5 resolve gradients of an O(1)
    // loss to about 1e-11, so gradients near 1e-7 cannot meet a relative
    // bound. 0 applies the relative criterion alone.
    double abs_floor = 0.0;
};

/// |a - b| / max(|a|, |b|, 1e-8).
double grad_rel_error(double analytic, double numeric);

/// Targets: "linear", "gka", "mha", "vlt", "block", "model".
GradCheckReport grad_check(const std::string& target, std::uint64_t seed, const GradCheckOptions& options = {});

std::vector<std::string> grad_check_targets();

}  // namespace gka
