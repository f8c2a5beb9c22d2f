#include "gka/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gka/errors.hpp"

namespace gka {

void RolloutConfig::validate() const {
    for (std::size_t i = 0; i < discard_ratios.size(); ++i) {
        const double r = discard_ratios[i];
        if (!(r >= 0.0 && r < 1.0)) throw ParameterError("discard ratio must be in [0, 1), got " + std::to_string(r));
        if (i > 0 && r <= discard_ratios[i - 1]) throw ParameterError("discard ratios must be strictly increasing");
    }
    if (!(residual_weight >= 0.0 && residual_weight <= 1.0)) throw ParameterError("residual weight must be in [0, 1]");
}

Tensor<double> head_average(const AttentionCapture<double>& capture, std::size_t layer, std::size_t batch) {
    const std::size_t heads = capture.num_heads(layer);
    Tensor<double> avg = capture.weights(layer, 0, batch);
    for (std::size_t h = 1; h < heads; ++h) {
        const auto& w = capture.weights(layer, h, batch);
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += w[i];
    }
    for (auto& v : avg.data()) v /= static_cast<double>(heads);
    return avg;
}

namespace {

void normalize_rows(Tensor<double>& m) {
    const std::size_t n = m.dim(0), cols = m.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += m.at(i, j);
        if (s > 0.0)
            for (std::size_t j = 0; j < cols; ++j) m.at(i, j) /= s;
    }
}

Tensor<double> square_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t n = a.dim(0);
    Tensor<double> out({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double av = a.at(i, k);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

Tensor<double> cls_row_grid(const Tensor<double>& m, std::size_t grid) {
    if (m.dim(0) != grid * grid + 1) {
        throw ShapeError("matrix of " + std::to_string(m.dim(0)) + " tokens does not match a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " grid plus class token");
    }
    Tensor<double> out({grid, grid});
    for (std::size_t t = 0; t < grid * grid; ++t) out[t] = m.at(0, t + 1);
    return out;
}

}  // namespace

Tensor<double> rollout_step(const Tensor<double>& mean_attention, double discard_ratio, double residual_weight) {
    if (mean_attention.rank() != 2 || mean_attention.dim(0) != mean_attention.dim(1)) {
        throw ShapeError("rollout expects square matrices, got " + shape_str(mean_attention.shape()));
    }
    const std::size_t n = mean_attention.dim(0);
    Tensor<double> a(mean_attention.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            a.at(i, j) = (1.0 - residual_weight) * mean_attention.at(i, j) + (i == j ? residual_weight : 0.0);
    normalize_rows(a);
    if (discard_ratio > 0.0) {
        // the diagonal is kept so no row can lose all of its mass
        std::vector<std::size_t> off;
        off.reserve(n * n - n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) off.push_back(i * n + j);
        const auto drop = static_cast<std::size_t>(std::floor(discard_ratio * static_cast<double>(off.size())));
        std::stable_sort(off.begin(), off.end(), [&](std::size_t x, std::size_t y) { return a[x] < a[y]; });
        for (std::size_t k = 0; k < drop; ++k) a[off[k]] = 0.0;
        normalize_rows(a);
    }
    return a;
}

Tensor<double> rollout_matrix(const AttentionCapture<double>& capture, double discard_ratio, double residual_weight,
                              std::size_t batch) {
    const auto layers = capture.layer_indices();
    if (layers.empty()) throw InputError("rollout needs a non-empty capture");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l] != l) throw InputError("rollout: capture is missing layer " + std::to_string(l));
    }
    Tensor<double> r = rollout_step(head_average(capture, 0, batch), discard_ratio, residual_weight);
    for (std::size_t l = 1; l < layers.size(); ++l) {
        r = square_matmul(rollout_step(head_average(capture, l, batch), discard_ratio, residual_weight), r);
    }
    return r;
}

std::vector<RolloutGrid> attention_rollout(const AttentionCapture<double>& capture, const RolloutConfig& config,
                                           std::size_t grid, std::size_t batch) {
    config.validate();
    std::vector<RolloutGrid> out;
    for (double ratio : config.discard_ratios) {
        out.push_back({ratio, cls_row_grid(rollout_matrix(capture, ratio, config.residual_weight, batch), grid)});
    }
    return out;
}

Tensor<double> cls_attention_map(const AttentionCapture<double>& capture, std::size_t layer, std::size_t head,
                                 std::size_t grid, std::size_t batch) {
    return cls_row_grid(capture.weights(layer, head, batch), grid);
}

std::array<PatchQuery, 4> canonical_queries(std::size_t grid) {
    const std::size_t a = grid / 4, b = grid / 2, c = 3 * grid / 4;
    std::array<PatchQuery, 4> q{{{a, a, 0}, {b, b, 0}, {c, c, 0}, {a, c, 0}}};
    for (auto& p : q) p.token = 1 + p.row * grid + p.col;
    return q;
}

PatchMaps patch_attention_maps(const AttentionCapture<double>& capture, std::size_t layer, std::size_t grid,
                               std::size_t batch) {
    const Tensor<double> avg = head_average(capture, layer, batch);
    if (avg.dim(0) != grid * grid + 1) throw ShapeError("patch maps: token count does not match the grid");
    PatchMaps maps;
    maps.queries = canonical_queries(grid);
    for (std::size_t k = 0; k < 4; ++k) {
        maps.grids[k] = Tensor<double>({grid, grid});
        for (std::size_t t = 0; t < grid * grid; ++t) maps.grids[k][t] = avg.at(maps.queries[k].token, t + 1);
    }
    return maps;
}

template <typename T>
Tensor<double> sigma_report(const Model<T>& model) {
    Tensor<double> s = collect_log_sigma(model);
    for (auto& v : s.data()) v = std::exp(v);
    return s;
}

std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t max_tokens) {
    std::vector<std::size_t> idx;
    if (max_tokens == 0) throw ParameterError("max_tokens must be >= 1");
    if (n <= max_tokens) {
        idx.resize(n);
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }
    if (max_tokens == 1) return {0};
    const double step = static_cast<double>(n - 1) / static_cast<double>(max_tokens - 1);
    for (std::size_t k = 0; k < max_tokens; ++k) {
        idx.push_back(static_cast<std::size_t>(std::nearbyint(static_cast<double>(k) * step)));
    }
    return idx;
}

RawMatrix raw_matrix_export(const AttentionCapture<double>& capture, std::size_t layer, std::size_t head,
                            bool mask_diagonal, std::size_t max_tokens, std::size_t batch) {
    const Tensor<double>& w = capture.weights(layer, head, batch);
    RawMatrix out;
    out.indices = subsample_indices(w.dim(0), max_tokens);
    const std::size_t m = out.indices.size();
    out.values = Tensor<double>({m, m});
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            out.values.at(a, b) = mask_diagonal && out.indices[a] == out.indices[b]
                                      ? 0.0
                                      : w.at(out.indices[a], out.indices[b]);
    return out;
}

std::vector<EvolutionLayer> kernel_evolution_export(const AttentionCapture<double>& capture, std::size_t grid,
                                                    std::size_t batch) {
    if (capture.empty()) throw InputError("kernel evolution needs a non-empty capture");
    std::vector<EvolutionLayer> out;
    for (std::size_t layer : capture.layer_indices()) {
        EvolutionLayer e;
        e.layer = layer;
        e.matrix = head_average(capture, layer, batch);
        if (grid > 0) e.cls_grid = cls_row_grid(e.matrix, grid);
        out.push_back(std::move(e));
    }
    return out;
}

// ---- writers ----------------------------------------------------------------

void write_csv(std::ostream& out, const Tensor<double>& matrix) {
    const std::size_t cols = matrix.rank() >= 2 ? matrix.shape().back() : matrix.size();
    const std::size_t rows = cols ? matrix.size() / cols : 0;
    char buf[32];
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", matrix[i * cols + j]);
            if (j) out << ',';
            out << buf;
        }
        out << '\n';
    }
}

void write_csv(const std::filesystem::path& path, const Tensor<double>& matrix) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write " + path.string());
    write_csv(f, matrix);
}

Tensor<double> read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot read " + path.string());
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t c = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stod(cell));
            ++c;
        }
        if (rows > 0 && c != cols) throw InputError(path.string() + ": ragged row " + std::to_string(rows));
        cols = c;
        ++rows;
    }
    if (rows == 0) throw InputError(path.string() + " is empty");
    return Tensor<double>({rows, cols}, std::move(values));
}

void write_pgm(const std::filesystem::path& path, const Tensor<double>& matrix) {
    if (matrix.rank() != 2) throw ShapeError("write_pgm expects a 2-D matrix");
    const auto [lo, hi] = std::minmax_element(matrix.values().begin(), matrix.values().end());
    const double span = *hi - *lo;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path.string());
    f << "P5\n" << matrix.dim(1) << ' ' << matrix.dim(0) << "\n255\n";
    for (double v : matrix.values()) {
        const double u = span > 0.0 ? (v - *lo) / span : 0.0;
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
    }
}

std::string ratio_label(double ratio) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", ratio);
    std::string s = buf;
    if (s.find('.') == std::string::npos) s += ".0";
    return s;
}

template <typename T>
std::vector<std::string> export_analysis(const Model<T>& model, const AttentionCapture<double>& capture,
                                         const std::filesystem::path& dir, const ExportOptions& options) {
    if (capture.empty()) throw InputError("analysis export needs a non-empty capture");
    std::filesystem::create_directories(dir);
    std::vector<std::string> written;
    auto emit = [&](const std::string& stem, const Tensor<double>& m, bool image) {
        write_csv(dir / (stem + ".csv"), m);
        written.push_back(stem + ".csv");
        if (image) {
            write_pgm(dir / (stem + ".pgm"), m);
            written.push_back(stem + ".pgm");
        }
    };
    const ModelConfig& c = model.config;
    const bool spatial = c.family == ModelFamily::vit && c.use_cls;
    const std::size_t grid = spatial ? c.grid() : 0;
    const std::size_t b = options.batch;

    if (spatial) {
        for (const auto& r : attention_rollout(capture, options.rollout, grid, b)) {
            emit("rollout_r" + ratio_label(r.ratio), r.grid, true);
        }
    }
    for (std::size_t layer : capture.layer_indices()) {
        const std::string L = "L" + std::to_string(layer);
        for (std::size_t h = 0; h < capture.num_heads(layer); ++h) {
            const std::string H = "H" + std::to_string(h);
            if (spatial) emit("cls_" + L + "_" + H, cls_attention_map(capture, layer, h, grid, b), true);
            emit("raw_" + L + "_" + H, raw_matrix_export(capture, layer, h, true, options.max_tokens, b).values, true);
        }
        if (spatial) {
            const PatchMaps maps = patch_attention_maps(capture, layer, grid, b);
            for (std::size_t k = 0; k < 4; ++k) emit("patch_" + L + "_q" + std::to_string(k), maps.grids[k], true);
        }
    }
    if (spatial) {
        const auto q = canonical_queries(grid);
        std::ofstream f(dir / "patch_queries.csv");
        f << "query,row,col,token\n";
        for (std::size_t k = 0; k < 4; ++k) f << k << ',' << q[k].row << ',' << q[k].col << ',' << q[k].token << '\n';
        written.push_back("patch_queries.csv");
    }
    {
        const auto idx = subsample_indices(capture.num_tokens(capture.layer_indices().front()), options.max_tokens);
        std::ofstream f(dir / "raw_indices.csv");
        for (std::size_t i = 0; i < idx.size(); ++i) f << (i ? "," : "") << idx[i];
        f << '\n';
        written.push_back("raw_indices.csv");
    }
    for (const auto& e : kernel_evolution_export(capture, grid, b)) {
        const std::string L = "L" + std::to_string(e.layer);
        emit("evolution_" + L + "_matrix", e.matrix, true);
        if (spatial) emit("evolution_" + L + "_cls", e.cls_grid, true);
    }

    const Tensor<double> sigma = sigma_report(model);
    if (!sigma.empty()) {
        std::ofstream f(dir / "sigma.csv");
        char buf[32];
        f << "layer";
        for (std::size_t h = 0; h < sigma.dim(1); ++h) f << ",H" << h;
        f << '\n';
        for (std::size_t l = 0; l < sigma.dim(0); ++l) {
            f << l;
            for (std::size_t h = 0; h < sigma.dim(1); ++h) {
                std::snprintf(buf, sizeof buf, "%.9g", sigma.at(l, h));
                f << ',' << buf;
            }
            f << '\n';
        }
        written.push_back("sigma.csv");
        std::ofstream s(dir / "sigma_series.csv");
        s << "head,layer,sigma\n";
        for (std::size_t h = 0; h < sigma.dim(1); ++h)
            for (std::size_t l = 0; l < sigma.dim(0); ++l) {
                std::snprintf(buf, sizeof buf, "%.9g", sigma.at(l, h));
                s << h << ',' << l << ',' << buf << '\n';
            }
        written.push_back("sigma_series.csv");
    }
    return written;
}

template Tensor<double> sigma_report(const Model<float>&);
template Tensor<double> sigma_report(const Model<double>&);
template std::vector<std::string> export_analysis(const Model<float>&, const AttentionCapture<double>&,
                                                  const std::filesystem::path&, const ExportOptions&);
template std::vector<std::string> export_analysis(const Model<double>&, const AttentionCapture<double>&,
                                                  const std::filesystem::path&, const ExportOptions&);

}  // namespace gka
