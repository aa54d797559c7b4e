#pragma once

// Dense row-major matrices in double precision and the SVD-based helpers the
// compressors are built on. Convention throughout: y = W x, W is d_out x d_in,
// and W = U diag(s) V^T.

#include <lorap/error.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lorap {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ArgumentError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                                std::to_string(rows_) + "x" + std::to_string(cols_));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw ArgumentError("matrix contains a non-finite entry");
            }
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(std::span<const double> values) {
        Matrix m(values.size(), values.size());
        for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }

    [[nodiscard]] std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMajor> view(const Matrix& m) {
    return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

inline Eigen::Map<RowMajor> view(Matrix& m) {
    return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename Expr>
Matrix from_eigen(const Expr& e) {
    Matrix out(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    view(out) = e;
    return out;
}

} // namespace detail

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ArgumentError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
    return detail::from_eigen(detail::view(a) * detail::view(b));
}

/// a * b^T; the shape of every linear layer applied to a token-major batch.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ArgumentError("matmul_transposed: inner dimensions differ");
    return detail::from_eigen(detail::view(a) * detail::view(b).transpose());
}

inline Matrix transpose(const Matrix& m) {
    return detail::from_eigen(detail::view(m).transpose());
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "subtract");
    return detail::from_eigen(detail::view(a) - detail::view(b));
}

inline double frobenius_norm(const Matrix& m) {
    double sum = 0.0;
    for (double v : m.data()) sum += v * v;
    return std::sqrt(sum);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

/// m * diag(d)
inline Matrix scale_columns(const Matrix& m, std::span<const double> d) {
    if (d.size() != m.cols()) throw ArgumentError("scale_columns: weight length does not match column count");
    Matrix out = m;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) r[j] *= d[j];
    }
    return out;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m.rows()) throw ArgumentError("select_rows: index out of range");
        std::ranges::copy(m.row(rows[i]), out.row(i).begin());
    }
    return out;
}

inline Matrix select_cols(const Matrix& m, std::span<const std::size_t> cols) {
    Matrix out(m.rows(), cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) {
        if (cols[j] >= m.cols()) throw ArgumentError("select_cols: index out of range");
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
    }
    return out;
}

/// Floor applied to activation norms before they form the diagonal weight, so
/// dead input features never make D singular.
inline constexpr double kNormFloor = 1e-8;

inline std::vector<double> floored_weights(std::span<const double> x_din) {
    std::vector<double> d(x_din.begin(), x_din.end());
    for (double& v : d) v = std::max(v, kNormFloor);
    return d;
}

struct SvdResult {
    Matrix u;                            // d_out x k
    std::vector<double> singular_values; // non-increasing, length k
    Matrix vt;                           // k x d_in

    [[nodiscard]] std::size_t rank_capacity() const noexcept { return singular_values.size(); }
};

/// Thin SVD. Singular vectors are sign-canonicalized so the largest-magnitude
/// entry of every u column is positive (first such entry on ties).
inline SvdResult svd(const Matrix& m, const std::string& name = "matrix") {
    if (m.rows() == 0 || m.cols() == 0) throw ArgumentError("svd: empty matrix '" + name + "'");
    for (double v : m.data()) {
        if (!std::isfinite(v)) throw ArgumentError("svd: non-finite entry in '" + name + "'");
    }
    const Eigen::MatrixXd dense = detail::view(m);
    Eigen::BDCSVD<Eigen::MatrixXd> dec(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success) {
        throw DecompositionError("SVD failed to converge for '" + name + "'");
    }
    const Eigen::Index k = std::min(dense.rows(), dense.cols());
    Eigen::MatrixXd u = dec.matrixU().leftCols(k);
    Eigen::MatrixXd v = dec.matrixV().leftCols(k);
    const Eigen::VectorXd s = dec.singularValues().head(k);

    for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index r = 0; r < u.rows(); ++r) {
            if (std::abs(u(r, c)) > best + 1e-14) {
                best = std::abs(u(r, c));
                arg = r;
            }
        }
        if (u(arg, c) < 0.0) {
            u.col(c) = -u.col(c);
            v.col(c) = -v.col(c);
        }
    }

    SvdResult out;
    out.u = detail::from_eigen(u);
    out.vt = detail::from_eigen(v.transpose());
    out.singular_values.resize(static_cast<std::size_t>(k));
    for (Eigen::Index i = 0; i < k; ++i) out.singular_values[static_cast<std::size_t>(i)] = std::max(0.0, s(i));
    return out;
}

/// Leading-r factors (U_r diag(s_r), V_r^T); their product is the best
/// unweighted rank-r approximation.
inline std::pair<Matrix, Matrix> truncate(const SvdResult& s, std::size_t r) {
    const std::size_t k = s.rank_capacity();
    if (r < 1 || r > k) {
        throw ArgumentError("truncate: rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
    }
    Matrix left(s.u.rows(), r);
    for (std::size_t i = 0; i < s.u.rows(); ++i) {
        for (std::size_t j = 0; j < r; ++j) left(i, j) = s.u(i, j) * s.singular_values[j];
    }
    Matrix right(r, s.vt.cols());
    for (std::size_t i = 0; i < r; ++i) std::ranges::copy(s.vt.row(i), right.row(i).begin());
    return {std::move(left), std::move(right)};
}

/// ||(W - L R) diag(d)||_F
inline double weighted_frobenius_error(const Matrix& w, const Matrix& l, const Matrix& r, std::span<const double> d) {
    if (l.cols() != r.rows() || l.rows() != w.rows() || r.cols() != w.cols()) {
        throw ArgumentError("weighted_frobenius_error: factor shapes do not conform to W");
    }
    if (d.size() != w.cols()) throw ArgumentError("weighted_frobenius_error: weight length must equal d_in");
    for (double v : d) {
        if (!(v > 0.0)) throw ArgumentError("weighted_frobenius_error: weights must be positive");
    }
    const Matrix residual = subtract(w, matmul(l, r));
    double sum = 0.0;
    for (std::size_t i = 0; i < residual.rows(); ++i) {
        for (std::size_t j = 0; j < residual.cols(); ++j) {
            const double e = residual(i, j) * d[j];
            sum += e * e;
        }
    }
    return std::sqrt(sum);
}

inline double frobenius_error(const Matrix& w, const Matrix& l, const Matrix& r) {
    return frobenius_norm(subtract(w, matmul(l, r)));
}

} // namespace lorap
