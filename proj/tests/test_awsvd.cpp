#include <catch_amalgamated.hpp>

#include <lorap/awsvd.hpp>
#include <lorap/ffn_prune.hpp>
#include <lorap/fixture.hpp>

#include "oracles.hpp"

#include <cmath>

using namespace lorap;
using Catch::Approx;

namespace {

std::array<MatrixDims, 4> square(std::size_t d) { return {MatrixDims{d, d}, {d, d}, {d, d}, {d, d}}; }

} // namespace

TEST_CASE("weighted factorization matches the ALS oracle on a 6x5 instance") {
    fixture::Rng rng(1);
    const Matrix w = rng.gaussian(6, 5, 1.0);
    const std::vector<double> d{1, 2, 3, 4, 5};
    const FactorPair fp = awsvd_factor(w, d, 2, "w");
    CHECK(fp.rank == 2);
    CHECK(fp.l.rows() == 6);
    CHECK(fp.l.cols() == 2);
    CHECK(fp.r.rows() == 2);
    CHECK(fp.r.cols() == 5);
    CHECK(fp.weighted_error == Approx(weighted_frobenius_error(w, fp.l, fp.r, d)));
    const double als = oracle::als_weighted_error(w, d, 2, rng, 20000);
    CHECK(std::abs(fp.weighted_error - als) < 1e-6);
    const FactorPair plain = svd_factor(w, 2, "w", d);
    CHECK(fp.weighted_error <= plain.weighted_error + 1e-12);
}

TEST_CASE("weighted factorization is never worse than ALS or random pairs") {
    fixture::Rng rng(2);
    for (int t = 0; t < 30; ++t) {
        const std::size_t m = 2 + rng.below(15), n = 2 + rng.below(15);
        const Matrix w = rng.gaussian(m, n, 1.0);
        const auto d = rng.positive(n, 0.1, 5.0);
        const std::size_t r = 1 + rng.below(std::min(m, n));
        const FactorPair fp = awsvd_factor(w, d, r);
        CHECK(fp.weighted_error <= oracle::als_weighted_error(w, d, r, rng, 500) + 1e-6);
        for (int c = 0; c < 20; ++c) {
            Matrix l = fp.l, rr = fp.r;
            for (double& v : l.data()) v += 0.05 * rng.normal();
            CHECK(fp.weighted_error <= weighted_frobenius_error(w, l, rr, d) + 1e-12);
            CHECK(fp.weighted_error <=
                  weighted_frobenius_error(w, rng.gaussian(m, r, 1.0), rng.gaussian(r, n, 1.0), d) + 1e-12);
        }
    }
}

TEST_CASE("unit weights reduce to plain truncated svd") {
    fixture::Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        const Matrix w = rng.gaussian(9, 7, 1.0);
        const std::vector<double> ones(7, 1.0);
        for (std::size_t r = 1; r <= 7; ++r) {
            CHECK(max_abs_diff(awsvd_factor(w, ones, r).product(), svd_factor(w, r).product()) < 1e-8);
        }
    }
}

TEST_CASE("full rank reconstructs; error is non-increasing in rank") {
    fixture::Rng rng(4);
    const Matrix w = rng.gaussian(8, 6, 1.0);
    const auto d = rng.positive(6, 0.01, 10.0);
    CHECK(frobenius_norm(subtract(awsvd_factor(w, d, 6).product(), w)) / frobenius_norm(w) < 1e-6);
    double prev = 1e300;
    for (std::size_t r = 1; r <= 6; ++r) {
        const double e = awsvd_factor(w, d, r).weighted_error;
        CHECK(e <= prev + 1e-12);
        prev = e;
    }
}

TEST_CASE("uniformly scaling activation norms leaves the product unchanged") {
    fixture::Rng rng(5);
    const Matrix w = rng.gaussian(10, 12, 1.0);
    const auto d = rng.positive(12, 0.5, 3.0);
    std::vector<double> scaled = d;
    for (double& v : scaled) v *= 37.0;
    CHECK(max_abs_diff(awsvd_factor(w, d, 4).product(), awsvd_factor(w, scaled, 4).product()) < 1e-8);
}

TEST_CASE("zero activation norms are floored, not an error") {
    fixture::Rng rng(6);
    const Matrix w = rng.gaussian(5, 4, 1.0);
    const std::vector<double> d{0.0, 1.0, 0.0, 2.0};
    const FactorPair fp = awsvd_factor(w, d, 2);
    for (double v : fp.r.data()) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(awsvd_factor(w, std::vector<double>{1.0, 2.0}, 2), ArgumentError);
    CHECK_THROWS_AS(awsvd_factor(w, d, 0), ArgumentError);
    CHECK_THROWS_AS(awsvd_factor(w, d, 5), ArgumentError);
}

TEST_CASE("activation weighting concentrates energy on planted directions") {
    fixture::Rng rng(7);
    for (int t = 0; t < 5; ++t) {
        const std::size_t n = 32;
        // low-rank part lives on the first 4 input features, noise everywhere
        Matrix w = matmul(rng.gaussian(n, 3, 1.0), rng.gaussian(3, n, 1.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) w(i, j) = (j < 4 ? w(i, j) : 0.0) + 0.3 * rng.normal();
        std::vector<double> x(n, 0.2);
        for (std::size_t j = 0; j < 4; ++j) x[j] = 20.0;
        CHECK(energy_rank_ratio(w, 0.8, x) <= energy_rank_ratio(w, 0.8));
    }
}

TEST_CASE("allocation ratio parsing") {
    const AllocRatio a = AllocRatio::parse("1:3");
    CHECK(a.vo_fraction() == Approx(0.75));
    CHECK(a.str() == "1:3");
    CHECK(AllocRatio::parse("1:2.5").str() == "1:2.5");
    CHECK_THROWS_AS(AllocRatio::parse("13"), ArgumentError);
    CHECK_THROWS_AS(AllocRatio::parse("1:-3"), ArgumentError);
    CHECK_THROWS_AS(AllocRatio::parse("a:b"), ArgumentError);
}

TEST_CASE("attention allocation on the toy 64x64 shape") {
    SECTION("half the parameters at 1:3") {
        const MhaAllocation a = allocate_mha(4 * 64 * 64, 0.5, {}, square(64));
        CHECK(a.total_budget == 8192);
        CHECK(a.qk_budget == 2048);
        CHECK(a.vo_budget == 6144);
        CHECK(a[Proj::Q].rank == 8);
        CHECK(a[Proj::K].rank == 8);
        CHECK(a[Proj::V].rank == 24);
        CHECK(a[Proj::O].rank == 24);
        CHECK(a.used_params() == 8192);
        CHECK_FALSE(a.dense_overflow);
    }
    SECTION("80 percent keeps v, o dense and gives q, k the surplus") {
        const MhaAllocation a = allocate_mha(4 * 64 * 64, 0.8, {}, square(64));
        CHECK(a.total_budget == 13107);
        CHECK(a.dense_overflow);
        CHECK(a[Proj::V].scheme == Scheme::Dense);
        CHECK(a[Proj::O].scheme == Scheme::Dense);
        CHECK(a.qk_budget == 3277 + 1638);
        const double share = static_cast<double>(a.qk_budget) / (2.0 * 64 * 64);
        CHECK(std::abs(share - 0.60) <= 0.001);
        CHECK(a[Proj::Q].scheme == Scheme::Factored);
        CHECK(a[Proj::Q].rank == 19);
    }
    SECTION("no compression keeps everything dense") {
        const MhaAllocation a = allocate_mha(4 * 64 * 64, 1.0, {}, square(64));
        for (const auto& p : a.plans) CHECK(p.scheme == Scheme::Dense);
        CHECK(a.used_params() == 4 * 64 * 64);
    }
    SECTION("slack stays below one rank step") {
        for (double keep : {0.2, 0.35, 0.5, 0.61, 0.7}) {
            for (const char* r : {"1:1", "1:2", "1:2.5", "1:3", "1:3.5"}) {
                const MhaAllocation a = allocate_mha(4 * 64 * 64, keep, AllocRatio::parse(r), square(64));
                CHECK(a.qk_budget + a.vo_budget == a.total_budget);
                for (const auto& p : a.plans) {
                    if (p.scheme == Scheme::Factored) {
                        CHECK(p.slack() >= 0.0);
                        CHECK(p.slack() < 128.0);
                    }
                }
                CHECK(a.used_params() <= a.total_budget);
            }
        }
    }
    SECTION("a budget below rank 1 everywhere is infeasible") {
        CHECK_THROWS_AS(allocate_mha(4 * 64 * 64, 0.01, {}, square(64)), InfeasibleError);
        CHECK_THROWS_AS(allocate_mha(4 * 64 * 64, 0.0, {}, square(64)), ArgumentError);
        CHECK_THROWS_AS(allocate_mha(4 * 64 * 64, 1.5, {}, square(64)), ArgumentError);
    }
}

TEST_CASE("compressing one attention block") {
    const ModelConfig cfg = fixture::toy_config(1);
    const Model m = fixture::random_model(cfg, 8, 0.3);
    const std::vector<TokenStream> calib{{1, 2, 3, 4, 5, 6, 7, 8}, {9, 8, 7, 6, 5, 4, 3, 2}};
    const ActivationStats st = collect_stats(m, calib, 0);
    const Layer& layer = m.layers[0];

    SECTION("all dense passes weights through") {
        const auto alloc = allocate_mha(4 * 64 * 64, 1.0, {}, mha_dims(layer));
        const auto out = compress_mha(layer, st, alloc);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK_FALSE(out[i].factored());
            CHECK(out[i].to_linear().weight() == layer.proj[i].weight());
        }
    }
    SECTION("halved budget beats plain svd in the weighted norm") {
        const auto alloc = allocate_mha(4 * 64 * 64, 0.5, {}, mha_dims(layer));
        const auto aw = compress_mha(layer, st, alloc, LowRankMethod::Awsvd);
        const auto sv = compress_mha(layer, st, alloc, LowRankMethod::Svd);
        for (std::size_t i = 0; i < 4; ++i) {
            REQUIRE(aw[i].factored());
            CHECK(aw[i].pair().rank == alloc.plans[i].rank);
            CHECK(aw[i].pair().weighted_error <= sv[i].pair().weighted_error + 1e-12);
        }
        CHECK(aw[0].pair().source == proj_base_name(0, Proj::Q));
    }
    SECTION("missing statistics are rejected") {
        ActivationStats empty;
        const auto alloc = allocate_mha(4 * 64 * 64, 0.5, {}, mha_dims(layer));
        CHECK_THROWS_AS(compress_mha(layer, empty, alloc), ArgumentError);
    }
}
