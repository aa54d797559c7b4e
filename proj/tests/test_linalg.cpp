#include <catch_amalgamated.hpp>

#include <lorap/fixture.hpp>
#include <lorap/linalg.hpp>

#include <cmath>
#include <limits>

using namespace lorap;
using Catch::Approx;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix, sorted descending.
std::vector<double> jacobi_eigenvalues(Matrix a) {
    const std::size_t n = a.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::ranges::sort(ev, std::greater<>());
    return ev;
}

Matrix diag3() { return Matrix::diagonal(std::vector<double>{3.0, 2.0, 1.0}); }

} // namespace

TEST_CASE("matrix construction validates length and finiteness") {
    CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), ArgumentError);
    CHECK_THROWS_AS(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), ArgumentError);
    CHECK_THROWS_AS(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), ArgumentError);
    const Matrix m(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(m(1, 0) == 4.0);
    CHECK(m.row(1)[2] == 6.0);
}

TEST_CASE("matmul helpers agree with triple loops") {
    fixture::Rng rng(3);
    const Matrix a = rng.gaussian(7, 5, 1.0);
    const Matrix b = rng.gaussian(5, 4, 1.0);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
    const Matrix c = rng.gaussian(6, 5, 1.0);
    CHECK(max_abs_diff(matmul_transposed(a, c), naive_matmul(a, transpose(c))) < 1e-12);
    CHECK_THROWS_AS(matmul(a, a), ArgumentError);
}

TEST_CASE("svd of identity and diagonal matrices") {
    const auto id = svd(Matrix::identity(3));
    for (double s : id.singular_values) CHECK(s == Approx(1.0).margin(1e-14));
    const auto d = svd(diag3());
    CHECK(d.singular_values[0] == Approx(3.0));
    CHECK(d.singular_values[1] == Approx(2.0));
    CHECK(d.singular_values[2] == Approx(1.0));
}

TEST_CASE("svd invariants on random matrices up to 256x256") {
    fixture::Rng rng(11);
    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{5, 4}, {4, 5}, {1, 7}, {7, 1}, {33, 17}, {64, 64},
                                                                  {256, 256}, {128, 40}};
    for (auto [r, c] : shapes) {
        const Matrix m = rng.gaussian(r, c, 1.0);
        const SvdResult s = svd(m);
        const std::size_t k = std::min(r, c);
        REQUIRE(s.u.rows() == r);
        REQUIRE(s.u.cols() == k);
        REQUIRE(s.vt.rows() == k);
        REQUIRE(s.vt.cols() == c);
        for (std::size_t i = 0; i + 1 < k; ++i) CHECK(s.singular_values[i] >= s.singular_values[i + 1]);
        for (double v : s.singular_values) CHECK(v >= 0.0);
        CHECK(max_abs_diff(matmul(transpose(s.u), s.u), Matrix::identity(k)) < 1e-8);
        CHECK(max_abs_diff(matmul_transposed(s.vt, s.vt), Matrix::identity(k)) < 1e-8);
        auto [l, rr] = truncate(s, k);
        CHECK(frobenius_error(m, l, rr) / frobenius_norm(m) < 1e-6);
    }
}

TEST_CASE("singular values match Jacobi eigenvalues of the Gram matrix") {
    fixture::Rng rng(12);
    for (int t = 0; t < 10; ++t) {
        const Matrix m = rng.gaussian(9, 6, 1.0);
        const auto ev = jacobi_eigenvalues(matmul(transpose(m), m));
        const auto s = svd(m).singular_values;
        for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] * s[i] == Approx(ev[i]).epsilon(1e-9).margin(1e-10));
    }
}

TEST_CASE("svd signs are canonical and results bit-deterministic") {
    fixture::Rng rng(5);
    const Matrix m = rng.gaussian(12, 9, 1.0);
    const SvdResult a = svd(m);
    const SvdResult b = svd(m);
    CHECK(a.u == b.u);
    CHECK(a.vt == b.vt);
    CHECK(a.singular_values == b.singular_values);
    for (std::size_t c = 0; c < a.u.cols(); ++c) {
        double best = 0.0;
        double signed_best = 0.0;
        for (std::size_t r = 0; r < a.u.rows(); ++r) {
            if (std::abs(a.u(r, c)) > best) {
                best = std::abs(a.u(r, c));
                signed_best = a.u(r, c);
            }
        }
        CHECK(signed_best > 0.0);
    }
}

TEST_CASE("svd rejects empty and non-finite input") {
    CHECK_THROWS_AS(svd(Matrix()), ArgumentError);
    Matrix bad(2, 2);
    bad.data()[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(svd(bad), ArgumentError);
}

TEST_CASE("truncate applies Eckart-Young") {
    const auto s = svd(diag3());
    {
        auto [l, r] = truncate(s, 3);
        CHECK(max_abs_diff(matmul(l, r), diag3()) < 1e-14);
    }
    {
        auto [l, r] = truncate(s, 1);
        CHECK(frobenius_error(diag3(), l, r) == Approx(std::sqrt(5.0)));
    }
    CHECK_THROWS_AS(truncate(s, 0), ArgumentError);
    CHECK_THROWS_AS(truncate(s, 4), ArgumentError);

    fixture::Rng rng(21);
    for (int t = 0; t < 20; ++t) {
        const Matrix m = rng.gaussian(10, 8, 1.0);
        const auto sv = svd(m);
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t r = 1; r <= 8; ++r) {
            auto [l, rr] = truncate(sv, r);
            const double e = frobenius_error(m, l, rr);
            CHECK(e <= prev + 1e-12);
            prev = e;
        }
    }
}

TEST_CASE("truncated svd beats random same-rank pairs") {
    fixture::Rng rng(22);
    const Matrix m = rng.gaussian(12, 10, 1.0);
    const auto sv = svd(m);
    for (std::size_t r : {1u, 3u, 6u}) {
        auto [l, rr] = truncate(sv, r);
        const double best = frobenius_error(m, l, rr);
        for (int c = 0; c < 100; ++c) {
            const Matrix a = rng.gaussian(12, r, 1.0);
            const Matrix b = rng.gaussian(r, 10, 1.0);
            CHECK(best <= frobenius_error(m, a, b));
        }
    }
}

TEST_CASE("weighted frobenius error") {
    fixture::Rng rng(7);
    const Matrix w = rng.gaussian(3, 3, 1.0);
    const Matrix l = rng.gaussian(3, 1, 1.0);
    const Matrix r = rng.gaussian(1, 3, 1.0);
    const std::vector<double> d{1.0, 2.0, 3.0};
    double brute = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double lr = l(i, 0) * r(0, j);
            brute += std::pow((w(i, j) - lr) * d[j], 2);
        }
    CHECK(weighted_frobenius_error(w, l, r, d) == Approx(std::sqrt(brute)).epsilon(1e-13));

    const std::vector<double> ones{1.0, 1.0, 1.0};
    CHECK(weighted_frobenius_error(w, l, r, ones) == Approx(frobenius_error(w, l, r)).epsilon(1e-13));

    const auto sv = svd(w);
    auto [fl, fr] = truncate(sv, 3);
    CHECK(weighted_frobenius_error(w, fl, fr, d) < 1e-12);

    CHECK_THROWS_AS(weighted_frobenius_error(w, l, r, std::vector<double>{1.0, 2.0}), ArgumentError);
    CHECK_THROWS_AS(weighted_frobenius_error(w, l, r, std::vector<double>{1.0, 0.0, 1.0}), ArgumentError);
    CHECK_THROWS_AS(weighted_frobenius_error(w, rng.gaussian(2, 1, 1.0), r, d), ArgumentError);
}
