#include <catch_amalgamated.hpp>

#include <lorap/ffn_prune.hpp>
#include <lorap/fixture.hpp>

#include "oracles.hpp"

#include <cmath>
#include <functional>
#include <numeric>

using namespace lorap;
using Catch::Approx;

namespace {

std::vector<bool> mask_of(const std::vector<std::size_t>& idx, std::size_t n) {
    std::vector<bool> m(n, false);
    for (auto i : idx) m[i] = true;
    return m;
}

} // namespace

TEST_CASE("weight importance") {
    const Matrix w(2, 2, {1, -2, 3, 4});
    const Matrix imp = weight_importance(w, std::vector<double>{2, 1});
    CHECK(imp == Matrix(2, 2, {2, 2, 6, 4}));
    CHECK(weight_importance(Matrix(2, 2), std::vector<double>{2, 1}) == Matrix(2, 2));
    CHECK(weight_importance(w, std::vector<double>{1, 1}) == Matrix(2, 2, {1, 2, 3, 4}));
    CHECK_THROWS_AS(weight_importance(w, std::vector<double>{1}), ArgumentError);
}

TEST_CASE("channel score aggregations") {
    const Matrix row(1, 2, {3, 4});
    CHECK(channel_scores(row, Aggregation::L2)[0] == Approx(5.0));
    CHECK(channel_scores(row, Aggregation::L1)[0] == Approx(7.0));
    CHECK(channel_scores(row, Aggregation::Linf)[0] == Approx(4.0));
    CHECK(parse_aggregation("linf") == Aggregation::Linf);
    CHECK_THROWS_AS(parse_aggregation("l3"), ArgumentError);

    fixture::Rng rng(1);
    Matrix imp = rng.gaussian(8, 8, 1.0);
    for (double& v : imp.data()) v = std::abs(v);
    const auto s = channel_scores(imp, Aggregation::L2);
    for (std::size_t i = 0; i < 8; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < 8; ++j) ss += imp(i, j) * imp(i, j);
        CHECK(s[i] == Approx(std::sqrt(ss)).epsilon(1e-10));
    }
}

TEST_CASE("group scores") {
    SECTION("zero weights give zero scores") {
        const auto s = group_scores(Matrix(4, 3), Matrix(4, 3), Matrix(3, 4), std::vector<double>(3, 1.0),
                                    std::vector<double>(4, 1.0), Aggregation::L2);
        for (double v : s) CHECK(v == 0.0);
    }
    SECTION("a single nonzero up row scores only its channel") {
        Matrix up(4, 3);
        up(2, 1) = 5.0;
        const auto s = group_scores(up, Matrix(4, 3), Matrix(3, 4), std::vector<double>(3, 1.0),
                                    std::vector<double>(4, 1.0), Aggregation::L2);
        CHECK(s == std::vector<double>{0, 0, 5, 0});
    }
    SECTION("hand-computed 4-channel instance") {
        // d = 2, d_m = 4
        const Matrix up(4, 2, {1, 0, 0, 2, 3, 4, 0, 0});
        const Matrix gate(4, 2, {0, 1, 1, 1, 0, 0, 2, 0});
        const Matrix down(2, 4, {1, 0, 2, 0, 0, 3, 0, 4});
        const std::vector<double> x{2, 1};
        const std::vector<double> h{1, 2, 0.5, 1};
        // up:   [2,0]->2, [0,2]->2, [6,4]->sqrt52, [0,0]->0
        // gate: [0,1]->1, [2,1]->sqrt5, 0, [4,0]->4
        // down column i scaled by h_i: [1,0]->1, [0,6]->6, [1,0]->1, [0,4]->4
        const std::vector<double> expect{2 + 1 + 1, 2 + std::sqrt(5.0) + 6, std::sqrt(52.0) + 0 + 1, 0 + 4 + 4};
        const auto s = group_scores(up, gate, down, x, h, Aggregation::L2);
        for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == Approx(expect[i]).epsilon(1e-12));
    }
    SECTION("permuting channels permutes scores and the retained set") {
        fixture::Rng rng(2);
        const Matrix up = rng.gaussian(40, 8, 1.0), gate = rng.gaussian(40, 8, 1.0), down = rng.gaussian(8, 40, 1.0);
        const auto x = rng.positive(8, 0.1, 2.0);
        const auto h = rng.positive(40, 0.1, 2.0);
        std::vector<std::size_t> perm(40);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 39; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        std::vector<double> hp(40);
        for (std::size_t i = 0; i < 40; ++i) hp[i] = h[perm[i]];
        const auto s = group_scores(up, gate, down, x, h, Aggregation::L2);
        const auto sp = group_scores(select_rows(up, perm), select_rows(gate, perm), select_cols(down, perm), x, hp,
                                     Aggregation::L2);
        for (std::size_t i = 0; i < 40; ++i) CHECK(sp[i] == s[perm[i]]);
        const auto d = decide_pruning(s, 0.5, 0.05);
        const auto dp = decide_pruning(sp, 0.5, 0.05);
        std::vector<std::size_t> mapped;
        for (auto i : dp.retained) mapped.push_back(perm[i]);
        std::ranges::sort(mapped);
        CHECK(mapped == d.retained);
    }
    SECTION("scaling activation norms scales scores and keeps the decision") {
        fixture::Rng rng(3);
        const Matrix up = rng.gaussian(30, 6, 1.0), gate = rng.gaussian(30, 6, 1.0), down = rng.gaussian(6, 30, 1.0);
        const auto x = rng.positive(6, 0.1, 2.0);
        const auto h = rng.positive(30, 0.1, 2.0);
        auto x2 = x, h2 = h;
        for (double& v : x2) v *= 4.0;
        for (double& v : h2) v *= 4.0;
        const auto s = group_scores(up, gate, down, x, h, Aggregation::L2);
        const auto s2 = group_scores(up, gate, down, x2, h2, Aggregation::L2);
        for (std::size_t i = 0; i < 30; ++i) CHECK(s2[i] == Approx(4.0 * s[i]).epsilon(1e-12));
        CHECK(decide_pruning(s, 0.6, 0.04).retained == decide_pruning(s2, 0.6, 0.04).retained);
    }
    CHECK_THROWS_AS(group_scores(Matrix(4, 3), Matrix(4, 3), Matrix(3, 4), std::vector<double>(3, 1.0), {},
                                 Aggregation::L2),
                    ArgumentError);
}

TEST_CASE("retention counts") {
    const RetentionCounts c = retention_counts(128, 0.8, 0.01);
    CHECK(c.retained == 102);
    CHECK(c.top == 101);
    CHECK(c.bottom == 1);
    CHECK(retention_counts(128, 1.0, 0.01).retained == 128);
    CHECK(retention_counts(172, 0.5, 0.0).bottom == 0);
    CHECK(retention_counts(3, 0.4, 0.3).bottom == 0); // one slot: bottom shrinks first
    CHECK_THROWS_AS(retention_counts(10, 0.01, 0.0), InfeasibleError);
    CHECK_THROWS_AS(retention_counts(10, 0.5, 0.6), ArgumentError);
    CHECK_THROWS_AS(retention_counts(10, 0.0, 0.0), ArgumentError);
}

TEST_CASE("decide_pruning equals the pairwise-rank oracle") {
    fixture::Rng rng(4);
    for (std::size_t n = 1; n <= 64; ++n) {
        for (int t = 0; t < 12; ++t) {
            std::vector<double> s(n);
            // coarse values force ties on some draws
            const bool coarse = t % 3 == 0;
            for (double& v : s) v = coarse ? static_cast<double>(rng.below(4)) : rng.uniform();
            const double keep = 0.05 + 0.95 * rng.uniform();
            if (std::llround(keep * static_cast<double>(n)) < 1) continue;
            const double rl = (t % 4 == 0) ? 0.0 : std::min(keep * 0.5, 0.2 * rng.uniform());
            const PruneDecision d = decide_pruning(s, keep, rl);
            const auto o = oracle::prune_oracle(s, keep, rl);
            std::vector<std::size_t> top, bottom;
            for (std::size_t i = 0; i < d.retained.size(); ++i) {
                (d.provenance[i] == Provenance::Top ? top : bottom).push_back(d.retained[i]);
            }
            CHECK(top == o.top);
            CHECK(bottom == o.bottom);
            CHECK(std::ranges::is_sorted(d.retained));
        }
    }
}

TEST_CASE("decision invariants") {
    fixture::Rng rng(5);
    std::vector<double> s(128);
    for (double& v : s) v = rng.uniform();
    const PruneDecision d = decide_pruning(s, 0.8, 0.01);
    CHECK(d.retained.size() == 102);
    CHECK(d.count(Provenance::Top) == 101);
    CHECK(d.count(Provenance::Bottom) == 1);
    const auto keep = mask_of(d.retained, 128);
    double min_top = 1e9, max_bottom = -1e9, min_pruned = 1e9, max_pruned = -1e9;
    for (std::size_t i = 0; i < d.retained.size(); ++i) {
        const double v = s[d.retained[i]];
        if (d.provenance[i] == Provenance::Top) min_top = std::min(min_top, v);
        else max_bottom = std::max(max_bottom, v);
    }
    for (std::size_t i = 0; i < 128; ++i) {
        if (keep[i]) continue;
        min_pruned = std::min(min_pruned, s[i]);
        max_pruned = std::max(max_pruned, s[i]);
    }
    CHECK(min_top >= max_pruned);
    CHECK(max_bottom <= min_pruned);

    CHECK(decide_pruning(s, 1.0, 0.01).retained.size() == 128);
    const PruneDecision pure = decide_pruning(s, 0.5, 0.0);
    CHECK(pure.count(Provenance::Bottom) == 0);
    CHECK(pure.retained.size() == 64);

    const std::vector<double> ties(10, 1.0);
    const PruneDecision t = decide_pruning(ties, 0.5, 0.1);
    CHECK(t.retained == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK(t.provenance.back() == Provenance::Bottom);
}

TEST_CASE("apply_pruning equals the masked dense block") {
    fixture::Rng rng(6);
    for (int t = 0; t < 50; ++t) {
        const std::size_t d = 4 + rng.below(13), m = 2 + rng.below(40);
        const Matrix up = rng.gaussian(m, d, 1.0), gate = rng.gaussian(m, d, 1.0), down = rng.gaussian(d, m, 1.0);
        std::vector<double> s(m);
        for (double& v : s) v = rng.uniform();
        const PruneDecision dec = decide_pruning(s, std::max(0.5, 1.0 / static_cast<double>(m)), 0.0);
        const PrunedFfn p = apply_pruning(up, gate, down, dec);
        REQUIRE(p.up.rows() == dec.retained.size());
        REQUIRE(p.down.cols() == dec.retained.size());
        const auto keep = mask_of(dec.retained, m);
        Layer pruned;
        pruned[Proj::Up] = Linear::dense(p.up);
        pruned[Proj::Gate] = Linear::dense(p.gate);
        pruned[Proj::Down] = Linear::dense(p.down);
        Matrix x(3, d);
        for (double& v : x.data()) v = rng.normal();
        const Matrix got = pruned[Proj::Down].apply(ffn_hidden(pruned, x));
        for (std::size_t k = 0; k < 3; ++k) {
            const std::vector<double> row(x.row(k).begin(), x.row(k).end());
            const auto want = oracle::masked_ffn(up, gate, down, row, keep);
            for (std::size_t i = 0; i < d; ++i) CHECK(got(k, i) == Approx(want[i]).margin(1e-6));
        }
    }
}

TEST_CASE("apply_pruning edge cases") {
    fixture::Rng rng(7);
    const Matrix up = rng.gaussian(6, 4, 1.0), gate = rng.gaussian(6, 4, 1.0), down = rng.gaussian(4, 6, 1.0);
    std::vector<std::size_t> all(6);
    std::iota(all.begin(), all.end(), 0);
    const PrunedFfn same = apply_pruning(up, gate, down, all);
    CHECK(same.up == up);
    CHECK(same.gate == gate);
    CHECK(same.down == down);
    const std::vector<std::size_t> one{3};
    const PrunedFfn single = apply_pruning(up, gate, down, one);
    CHECK(single.up.rows() == 1);
    CHECK(single.up.cols() == 4);
    CHECK(single.gate.rows() == 1);
    CHECK(single.down.rows() == 4);
    CHECK(single.down.cols() == 1);
    const std::vector<std::size_t> bad{6};
    CHECK_THROWS_AS(apply_pruning(up, gate, down, bad), ArgumentError);
}

TEST_CASE("head pruning drops whole heads") {
    const Model m = fixture::random_model(fixture::toy_config(1), 3, 0.2);
    const ActivationStats st = collect_stats(m, {{1, 2, 3, 4}}, 0);
    const auto scores = head_scores(m.layers[0], st, 16);
    REQUIRE(scores.size() == 4);
    Layer l = m.layers[0];
    const std::vector<std::size_t> heads{1, 3};
    apply_head_pruning(l, heads, 16);
    CHECK(l[Proj::Q].out_features() == 32);
    CHECK(l[Proj::V].out_features() == 32);
    CHECK(l[Proj::O].in_features() == 32);
    CHECK(l[Proj::Q].weight()(0, 5) == m.layers[0][Proj::Q].weight()(16, 5));
    CHECK(l[Proj::O].weight()(7, 16) == m.layers[0][Proj::O].weight()(7, 48));
}

TEST_CASE("wanda masks") {
    fixture::Rng rng(8);
    const Matrix w = rng.gaussian(4, 4, 1.0);
    const std::vector<double> x{1.0, 2.0, 0.5, 3.0};
    const WandaMask none = wanda_mask(w, x, 0.0);
    CHECK(none.kept == 16);

    const WandaMask half = wanda_mask(w, x, 0.5);
    CHECK(half.kept == 8);
    CHECK(std::ranges::count(half.keep, 1) == 8);
    const Matrix imp = weight_importance(w, x);
    std::vector<double> sorted(imp.data().begin(), imp.data().end());
    std::ranges::sort(sorted, std::greater<>());
    for (std::size_t i = 0; i < 16; ++i) CHECK((half.keep[i] == 1) == (imp.data()[i] >= sorted[7]));

    Matrix uniform(4, 4);
    for (double& v : uniform.data()) v = 1.0;
    const WandaMask u = wanda_mask(uniform, std::vector<double>(4, 1.0), 0.5);
    CHECK(u.kept == 8);
    for (std::size_t i = 0; i < 16; ++i) CHECK(u.keep[i] == (i < 8 ? 1 : 0));

    const std::string pgm = half.pgm();
    const std::string header = "P5\n4 4\n255\n";
    REQUIRE(pgm.size() == header.size() + 16);
    CHECK(pgm.substr(0, header.size()) == header);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(static_cast<unsigned char>(pgm[header.size() + i]) == (half.keep[i] ? 255 : 0));
    }
    CHECK_THROWS_AS(wanda_mask(w, x, 1.0), ArgumentError);
}

TEST_CASE("energy rank ratio") {
    const Matrix d3 = Matrix::diagonal(std::vector<double>{3, 2, 1});
    CHECK(energy_rank_ratio(d3, 0.5) == Approx(100.0 / 3.0));
    CHECK(energy_rank_ratio(d3, 0.6) == Approx(100.0 / 3.0));
    CHECK(energy_rank_ratio(d3, 0.6, {}, EnergyMode::Singular) == Approx(200.0 / 3.0));
    for (std::size_t n : {5u, 8u, 10u}) {
        CHECK(energy_rank_ratio(Matrix::identity(n), 0.8) ==
              Approx(100.0 * std::ceil(0.8 * static_cast<double>(n)) / static_cast<double>(n)));
    }
    fixture::Rng rng(9);
    const Matrix r1 = matmul(rng.gaussian(6, 1, 1.0), rng.gaussian(1, 9, 1.0));
    for (double e : {0.1, 0.5, 0.99}) CHECK(energy_rank_ratio(r1, e) == Approx(100.0 / 6.0));
    CHECK(energy_rank_ratio(Matrix(3, 3), 0.5) == 0.0);
    CHECK_THROWS_AS(energy_rank_ratio(d3, 1.0), ArgumentError);
    // weighting by x flips which direction dominates
    CHECK(energy_rank_ratio(d3, 0.5, std::vector<double>{1, 1, 10}) == Approx(100.0 / 3.0));
}
