#pragma once

// Activation-weighted low-rank factorization of attention projections and the
// (q, k) : (v, o) parameter allocation that decides their ranks.

#include <lorap/config.hpp>
#include <lorap/error.hpp>
#include <lorap/linalg.hpp>
#include <lorap/model.hpp>
#include <lorap/transformer.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace lorap {

struct FactorPair {
    Matrix l; // d_out x r
    Matrix r; // r x d_in
    std::size_t rank = 0;
    std::string source;
    double weighted_error = 0.0;

    [[nodiscard]] std::size_t param_count() const { return rank * (l.rows() + r.cols()); }
    [[nodiscard]] Matrix product() const { return matmul(l, r); }
};

inline void check_rank(const Matrix& w, std::size_t rank, const std::string& name) {
    const std::size_t k = std::min(w.rows(), w.cols());
    if (rank < 1 || rank > k) {
        throw ArgumentError("rank " + std::to_string(rank) + " for '" + name + "' outside [1, " + std::to_string(k) +
                            "]");
    }
}

/// Minimizes ||(W - L R) D||_F over rank-r pairs with D = diag(max(x_din, eps)):
/// SVD(W D) = U S V^T, L = U_r S_r, R = V_r^T D^-1.
inline FactorPair awsvd_factor(const Matrix& w, std::span<const double> x_din, std::size_t rank,
                               const std::string& name = "matrix") {
    if (x_din.size() != w.cols()) {
        throw ArgumentError("awsvd_factor: activation norm length " + std::to_string(x_din.size()) +
                            " does not match d_in " + std::to_string(w.cols()) + " for '" + name + "'");
    }
    check_rank(w, rank, name);
    const std::vector<double> d = floored_weights(x_din);
    const SvdResult s = svd(scale_columns(w, d), name);
    auto [left, right] = truncate(s, rank);
    std::vector<double> inv(d.size());
    for (std::size_t j = 0; j < d.size(); ++j) inv[j] = 1.0 / d[j];
    right = scale_columns(right, inv);
    FactorPair fp{std::move(left), std::move(right), rank, name, 0.0};
    fp.weighted_error = weighted_frobenius_error(w, fp.l, fp.r, d);
    return fp;
}

/// Plain truncated SVD. `x_din`, when given, only sets the reported weighted error.
inline FactorPair svd_factor(const Matrix& w, std::size_t rank, const std::string& name = "matrix",
                             std::span<const double> x_din = {}) {
    check_rank(w, rank, name);
    auto [left, right] = truncate(svd(w, name), rank);
    FactorPair fp{std::move(left), std::move(right), rank, name, 0.0};
    if (!x_din.empty()) {
        fp.weighted_error = weighted_frobenius_error(w, fp.l, fp.r, floored_weights(x_din));
    } else {
        fp.weighted_error = frobenius_error(w, fp.l, fp.r);
    }
    return fp;
}

// ---- parameter allocation -------------------------------------------------------

/// Parameter ratio (q + k) : (v + o).
struct AllocRatio {
    double qk = 1.0;
    double vo = 3.0;

    [[nodiscard]] double vo_fraction() const { return vo / (qk + vo); }

    [[nodiscard]] std::string str() const {
        auto fmt = [](double v) {
            std::string s = std::to_string(v);
            s.erase(s.find_last_not_of('0') + 1);
            if (!s.empty() && s.back() == '.') s.pop_back();
            return s;
        };
        return fmt(qk) + ":" + fmt(vo);
    }

    static AllocRatio parse(std::string_view s) {
        const auto colon = s.find(':');
        if (colon == std::string_view::npos) throw ArgumentError("allocation ratio must look like 'a:b'");
        auto num = [&](std::string_view part) {
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
            if (ec != std::errc() || ptr != part.data() + part.size() || !(v > 0.0)) {
                throw ArgumentError("allocation ratio parts must be positive numbers: '" + std::string(s) + "'");
            }
            return v;
        };
        return {num(s.substr(0, colon)), num(s.substr(colon + 1))};
    }
};

struct MatrixDims {
    std::size_t d_out = 0;
    std::size_t d_in = 0;

    [[nodiscard]] std::size_t dense() const { return d_out * d_in; }
    [[nodiscard]] std::size_t per_rank() const { return d_out + d_in; }
};

enum class Scheme { Dense, Factored };

struct MatrixPlan {
    Scheme scheme = Scheme::Dense;
    std::size_t rank = 0;
    double budget = 0.0;     // parameters granted to this matrix
    std::size_t params = 0;  // parameters actually used

    [[nodiscard]] double slack() const { return budget - static_cast<double>(params); }
};

struct MhaAllocation {
    std::size_t total_budget = 0;
    std::size_t qk_budget = 0;
    std::size_t vo_budget = 0;
    AllocRatio ratio;
    bool dense_overflow = false;
    std::array<MatrixPlan, 4> plans{}; // q, k, v, o

    [[nodiscard]] const MatrixPlan& operator[](Proj p) const { return plans[static_cast<std::size_t>(p)]; }
    [[nodiscard]] std::size_t used_params() const {
        std::size_t n = 0;
        for (const auto& p : plans) n += p.params;
        return n;
    }
};

namespace detail {

inline MatrixPlan plan_matrix(double budget, const MatrixDims& dims) {
    MatrixPlan p;
    p.budget = budget;
    const auto rank = static_cast<std::size_t>(std::floor(budget / static_cast<double>(dims.per_rank())));
    const std::size_t r = std::max<std::size_t>(1, rank);
    if (r * dims.per_rank() >= dims.dense() || r >= std::min(dims.d_out, dims.d_in)) {
        p.scheme = Scheme::Dense;
        p.params = dims.dense();
    } else {
        p.scheme = Scheme::Factored;
        p.rank = r;
        p.params = r * dims.per_rank();
    }
    return p;
}

} // namespace detail

/// budget = round(total * keep), split between the (q, k) and (v, o) groups by
/// `ratio` and equally inside each group; rank = floor(budget / (d_out + d_in)).
/// A group whose share reaches its dense size stays dense and hands the surplus
/// to the other group.
inline MhaAllocation allocate_mha(std::size_t mha_param_total, double layer_keep, AllocRatio ratio,
                                  const std::array<MatrixDims, 4>& dims) {
    if (!(layer_keep > 0.0 && layer_keep <= 1.0)) throw ArgumentError("allocate_mha: layer ratio must lie in (0, 1]");
    MhaAllocation a;
    a.ratio = ratio;
    a.total_budget = static_cast<std::size_t>(std::llround(static_cast<double>(mha_param_total) * layer_keep));

    std::size_t min_needed = 0;
    for (const auto& d : dims) min_needed += d.per_rank();
    if (min_needed > a.total_budget) {
        throw InfeasibleError("attention budget of " + std::to_string(a.total_budget) +
                              " parameters cannot hold a rank-1 pair for every projection (" +
                              std::to_string(min_needed) + " needed)");
    }

    a.vo_budget = static_cast<std::size_t>(std::llround(static_cast<double>(a.total_budget) * ratio.vo_fraction()));
    a.vo_budget = std::min(a.vo_budget, a.total_budget);
    a.qk_budget = a.total_budget - a.vo_budget;

    const std::size_t qk_dense = dims[0].dense() + dims[1].dense();
    const std::size_t vo_dense = dims[2].dense() + dims[3].dense();
    double qk = static_cast<double>(a.qk_budget);
    double vo = static_cast<double>(a.vo_budget);
    bool qk_dense_all = false;
    bool vo_dense_all = false;
    if (vo >= static_cast<double>(vo_dense)) {
        qk += vo - static_cast<double>(vo_dense);
        vo = static_cast<double>(vo_dense);
        vo_dense_all = true;
        a.dense_overflow = true;
    }
    if (qk >= static_cast<double>(qk_dense)) {
        if (!vo_dense_all) vo += qk - static_cast<double>(qk_dense);
        qk = static_cast<double>(qk_dense);
        qk_dense_all = true;
        a.dense_overflow = true;
        if (vo >= static_cast<double>(vo_dense)) {
            vo = static_cast<double>(vo_dense);
            vo_dense_all = true;
        }
    }
    a.qk_budget = static_cast<std::size_t>(std::llround(qk));
    a.vo_budget = static_cast<std::size_t>(std::llround(vo));

    auto group = [&](std::size_t first, double budget, bool all_dense) {
        for (std::size_t i = first; i < first + 2; ++i) {
            if (all_dense) {
                a.plans[i] = MatrixPlan{Scheme::Dense, 0, static_cast<double>(dims[i].dense()), dims[i].dense()};
            } else {
                a.plans[i] = detail::plan_matrix(budget / 2.0, dims[i]);
            }
        }
    };
    group(0, qk, qk_dense_all);
    group(2, vo, vo_dense_all);
    return a;
}

inline std::array<MatrixDims, 4> mha_dims(const Layer& layer) {
    std::array<MatrixDims, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = {layer.proj[i].out_features(), layer.proj[i].in_features()};
    }
    return out;
}

// ---- per-layer compression ----------------------------------------------------

enum class LowRankMethod { Awsvd, Svd };

struct MhaMatrixResult {
    std::variant<Matrix, FactorPair> value;

    [[nodiscard]] bool factored() const { return std::holds_alternative<FactorPair>(value); }
    [[nodiscard]] const FactorPair& pair() const { return std::get<FactorPair>(value); }
    [[nodiscard]] Linear to_linear() const {
        if (factored()) return Linear::factored(pair().l, pair().r);
        return Linear::dense(std::get<Matrix>(value));
    }
};

/// Applies `alloc` to the q, k, v, o projections of one layer. Each matrix is
/// weighted by the activation norms of its own input site.
inline std::array<MhaMatrixResult, 4> compress_mha(const Layer& layer, const ActivationStats& stats,
                                                   const MhaAllocation& alloc,
                                                   LowRankMethod method = LowRankMethod::Awsvd,
                                                   std::size_t layer_index = 0) {
    std::array<MhaMatrixResult, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
        const Proj p = kMhaProjs[i];
        const Matrix w = layer[p].materialize();
        const MatrixPlan& plan = alloc.plans[i];
        if (plan.scheme == Scheme::Dense) {
            out[i].value = w;
            continue;
        }
        const std::string name = proj_base_name(layer_index, p);
        const auto& x = stats.for_matrix(p);
        if (x.size() != w.cols()) {
            throw ArgumentError("compress_mha: missing or mis-sized activation statistics for '" + name + "'");
        }
        out[i].value = method == LowRankMethod::Awsvd ? awsvd_factor(w, x, plan.rank, name)
                                                      : svd_factor(w, plan.rank, name, x);
    }
    return out;
}

} // namespace lorap
