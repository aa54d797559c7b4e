#pragma once

// Activation-aware importance scores, group channel pruning of the
// feed-forward sub-layer (with retention of the least important groups),
// whole-head pruning for attention comparisons, and the mask / spectrum
// diagnostics.

#include <lorap/error.hpp>
#include <lorap/linalg.hpp>
#include <lorap/model.hpp>
#include <lorap/transformer.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lorap {

/// I_ij = |W_ij| * ||X_j||_2
inline Matrix weight_importance(const Matrix& w, std::span<const double> x_din) {
    if (x_din.size() != w.cols()) {
        throw ArgumentError("weight_importance: activation norm length " + std::to_string(x_din.size()) +
                            " does not match d_in " + std::to_string(w.cols()));
    }
    Matrix out(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) out(i, j) = std::abs(w(i, j)) * x_din[j];
    }
    return out;
}

enum class Aggregation { L1, L2, Linf };

inline Aggregation parse_aggregation(std::string_view s) {
    if (s == "l1") return Aggregation::L1;
    if (s == "l2") return Aggregation::L2;
    if (s == "linf") return Aggregation::Linf;
    throw ArgumentError("aggregation must be one of l1, l2, linf (got '" + std::string(s) + "')");
}

inline const char* aggregation_name(Aggregation a) {
    switch (a) {
    case Aggregation::L1: return "l1";
    case Aggregation::L2: return "l2";
    case Aggregation::Linf: return "linf";
    }
    return "?";
}

inline double aggregate(std::span<const double> v, Aggregation agg) {
    double acc = 0.0;
    for (double x : v) {
        switch (agg) {
        case Aggregation::L1: acc += x; break;
        case Aggregation::L2: acc += x * x; break;
        case Aggregation::Linf: acc = std::max(acc, x); break;
        }
    }
    return agg == Aggregation::L2 ? std::sqrt(acc) : acc;
}

/// One score per output channel (row) of an importance matrix.
inline std::vector<double> channel_scores(const Matrix& importance, Aggregation agg) {
    std::vector<double> out(importance.rows());
    for (std::size_t i = 0; i < importance.rows(); ++i) out[i] = aggregate(importance.row(i), agg);
    return out;
}

/// Group score per intermediate channel i over {up row i, gate row i,
/// down column i}. `x_ffn` are the norms at the up/gate input, `x_hidden` the
/// norms of the gated intermediate activation feeding down.
inline std::vector<double> group_scores(const Matrix& up, const Matrix& gate, const Matrix& down,
                                        std::span<const double> x_ffn, std::span<const double> x_hidden,
                                        Aggregation agg = Aggregation::L2) {
    if (up.rows() != gate.rows() || down.cols() != up.rows() || up.cols() != gate.cols()) {
        throw ArgumentError("group_scores: up/gate/down dimensions are inconsistent");
    }
    if (x_ffn.empty() || x_hidden.empty()) throw ArgumentError("group_scores: missing activation statistics");
    const auto s_up = channel_scores(weight_importance(up, x_ffn), agg);
    const auto s_gate = channel_scores(weight_importance(gate, x_ffn), agg);
    const auto s_down = channel_scores(transpose(weight_importance(down, x_hidden)), agg);
    std::vector<double> out(up.rows());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s_up[i] + s_gate[i] + s_down[i];
    return out;
}

enum class Provenance { Top, Bottom };

inline const char* provenance_name(Provenance p) { return p == Provenance::Top ? "top" : "bottom"; }

struct PruneDecision {
    std::vector<std::size_t> retained; // ascending
    std::vector<Provenance> provenance; // parallel to retained
    std::size_t total = 0;
    double keep = 1.0;
    double retain_least = 0.0;
    Aggregation aggregation = Aggregation::L2;

    [[nodiscard]] std::size_t count(Provenance p) const {
        return static_cast<std::size_t>(std::ranges::count(provenance, p));
    }
};

struct RetentionCounts {
    std::size_t retained = 0;
    std::size_t top = 0;
    std::size_t bottom = 0;
};

/// retained = round(keep * n); bottom = max(1, floor(retain_least * n)) when
/// retention is on, shrunk so at least one top slot remains.
inline RetentionCounts retention_counts(std::size_t n, double keep, double retain_least) {
    if (!(keep > 0.0 && keep <= 1.0)) throw ArgumentError("retained fraction must lie in (0, 1]");
    if (!(retain_least >= 0.0 && retain_least < keep)) {
        throw ArgumentError("retain-least fraction must lie in [0, retained fraction)");
    }
    RetentionCounts c;
    c.retained = static_cast<std::size_t>(std::llround(keep * static_cast<double>(n)));
    c.retained = std::min(c.retained, n);
    if (c.retained < 1) {
        throw InfeasibleError("retained fraction " + std::to_string(keep) + " keeps no channel out of " +
                              std::to_string(n));
    }
    if (retain_least > 0.0) {
        c.bottom = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(retain_least * static_cast<double>(n) + 1e-9)));
    }
    if (c.bottom > c.retained - 1) c.bottom = c.retained - 1;
    c.top = c.retained - c.bottom;
    return c;
}

/// Keeps the `top` highest-scoring groups and the `bottom` lowest-scoring of
/// the rest. Ties go to the lower index in both orders.
inline PruneDecision decide_pruning(std::span<const double> scores, double keep, double retain_least,
                                    Aggregation agg = Aggregation::L2) {
    const std::size_t n = scores.size();
    if (n == 0) throw ArgumentError("decide_pruning: empty score vector");
    const RetentionCounts counts = retention_counts(n, keep, retain_least);

    std::vector<std::size_t> desc(n);
    std::iota(desc.begin(), desc.end(), 0);
    std::ranges::sort(desc, [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    });
    std::vector<char> chosen(n, 0);
    std::vector<Provenance> tag(n, Provenance::Top);
    for (std::size_t i = 0; i < counts.top; ++i) chosen[desc[i]] = 1;

    std::vector<std::size_t> asc(n);
    std::iota(asc.begin(), asc.end(), 0);
    std::ranges::sort(asc, [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] < scores[b] : a < b;
    });
    std::size_t taken = 0;
    for (std::size_t i = 0; i < n && taken < counts.bottom; ++i) {
        if (chosen[asc[i]]) continue;
        chosen[asc[i]] = 1;
        tag[asc[i]] = Provenance::Bottom;
        ++taken;
    }

    PruneDecision d;
    d.total = n;
    d.keep = keep;
    d.retain_least = retain_least;
    d.aggregation = agg;
    for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i]) {
            d.retained.push_back(i);
            d.provenance.push_back(tag[i]);
        }
    }
    return d;
}

struct PrunedFfn {
    Matrix up;
    Matrix gate;
    Matrix down;
};

/// Keeps the retained rows of up/gate and the matching columns of down.
inline PrunedFfn apply_pruning(const Matrix& up, const Matrix& gate, const Matrix& down,
                               std::span<const std::size_t> retained) {
    for (auto i : retained) {
        if (i >= up.rows()) {
            throw ArgumentError("apply_pruning: channel index " + std::to_string(i) + " out of range " +
                                std::to_string(up.rows()));
        }
    }
    return {select_rows(up, retained), select_rows(gate, retained), select_cols(down, retained)};
}

inline PrunedFfn apply_pruning(const Matrix& up, const Matrix& gate, const Matrix& down, const PruneDecision& d) {
    return apply_pruning(up, gate, down, d.retained);
}

// ---- attention head pruning (comparison baseline) -------------------------------

/// Per-head score: q/k/v channel scores of the head's rows plus o channel
/// scores of the head's columns.
inline std::vector<double> head_scores(const Layer& layer, const ActivationStats& stats, std::size_t head_dim,
                                       Aggregation agg = Aggregation::L2) {
    const auto& x_in = stats.at(Site::AttnInput);
    const auto& x_o = stats.at(Site::AttnOInput);
    const std::size_t inner = layer[Proj::Q].out_features();
    std::vector<double> rows(inner, 0.0);
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) {
        const auto s = channel_scores(weight_importance(layer[p].materialize(), x_in), agg);
        for (std::size_t i = 0; i < inner; ++i) rows[i] += s[i];
    }
    const auto so = channel_scores(transpose(weight_importance(layer[Proj::O].materialize(), x_o)), agg);
    for (std::size_t i = 0; i < inner; ++i) rows[i] += so[i];
    std::vector<double> out(inner / head_dim, 0.0);
    for (std::size_t i = 0; i < inner; ++i) out[i / head_dim] += rows[i];
    return out;
}

/// Drops whole heads: q/k/v rows and o columns outside the retained heads.
inline void apply_head_pruning(Layer& layer, std::span<const std::size_t> heads, std::size_t head_dim) {
    std::vector<std::size_t> idx;
    for (auto h : heads) {
        for (std::size_t c = 0; c < head_dim; ++c) idx.push_back(h * head_dim + c);
    }
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) layer[p] = Linear::dense(select_rows(layer[p].materialize(), idx));
    layer[Proj::O] = Linear::dense(select_cols(layer[Proj::O].materialize(), idx));
}

// ---- diagnostics ------------------------------------------------------------------

struct WandaMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep; // row-major, 1 = kept
    std::size_t kept = 0;

    /// Binary graymap (P5): 255 = kept, 0 = pruned; one byte per weight.
    [[nodiscard]] std::string pgm() const {
        std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
        out.reserve(out.size() + keep.size());
        for (auto k : keep) out.push_back(static_cast<char>(k ? 255 : 0));
        return out;
    }
};

/// Unstructured mask keeping the highest-importance (1 - sparsity) share of
/// weights over the whole matrix; ties go to the lower flat index.
inline WandaMask wanda_mask(const Matrix& w, std::span<const double> x_din, double sparsity) {
    if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ArgumentError("wanda_mask: sparsity must lie in [0, 1)");
    const Matrix imp = weight_importance(w, x_din);
    const std::size_t n = imp.size();
    const std::size_t pruned = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n) + 1e-9));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const auto data = imp.data();
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return data[a] > data[b]; });
    WandaMask m;
    m.rows = w.rows();
    m.cols = w.cols();
    m.keep.assign(n, 0);
    m.kept = n - pruned;
    for (std::size_t i = 0; i < m.kept; ++i) m.keep[order[i]] = 1;
    return m;
}

enum class EnergyMode { SquaredSingular, Singular };

/// Percentage of singular values needed to reach `energy` of the total
/// (sigma^2 mass by default). With `x_din` the spectrum of W * diag(x_din) is used.
inline double energy_rank_ratio(const Matrix& w, double energy, std::span<const double> x_din = {},
                                EnergyMode mode = EnergyMode::SquaredSingular) {
    if (!(energy > 0.0 && energy < 1.0)) throw ArgumentError("energy_rank_ratio: energy must lie in (0, 1)");
    if (frobenius_norm(w) == 0.0) return 0.0;
    const Matrix target = x_din.empty() ? w : scale_columns(w, floored_weights(x_din));
    const auto s = svd(target, "energy").singular_values;
    std::vector<double> mass(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) mass[i] = mode == EnergyMode::SquaredSingular ? s[i] * s[i] : s[i];
    const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    if (total == 0.0) return 0.0;
    double acc = 0.0;
    std::size_t k = s.size();
    for (std::size_t i = 0; i < s.size(); ++i) {
        acc += mass[i];
        if (acc >= energy * total * (1.0 - 1e-12)) {
            k = i + 1;
            break;
        }
    }
    return 100.0 * static_cast<double>(k) / static_cast<double>(s.size());
}

} // namespace lorap
