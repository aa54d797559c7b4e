#pragma once

// Synthetic models and token streams for tests, the acceptance harness and the
// fixture tool. Everything is driven by raw mt19937_64 draws so fixtures are
// identical on every platform.

#include <lorap/config.hpp>
#include <lorap/linalg.hpp>
#include <lorap/model.hpp>
#include <lorap/transformer.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace lorap::fixture {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t below(std::uint64_t bound) { return uniform_below(gen_, bound); }

    Matrix gaussian(std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(rows, cols);
        for (double& v : m.data()) v = normal() * stddev;
        return m;
    }

    std::vector<double> positive(std::size_t n, double lo, double hi) {
        std::vector<double> v(n);
        for (double& x : v) x = lo + (hi - lo) * uniform();
        return v;
    }

    TokenStream tokens(std::size_t n, std::size_t vocab) {
        TokenStream t(n);
        for (auto& x : t) x = static_cast<std::uint32_t>(below(vocab));
        return t;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline ModelConfig toy_config(std::size_t n_layers = 2) {
    ModelConfig c;
    c.dim = 64;
    c.n_heads = 4;
    c.head_dim = 16;
    c.n_layers = n_layers;
    c.ffn_dim = 172;
    c.vocab_size = 256;
    c.norm_eps = 1e-6;
    c.rope_theta = 10000.0;
    return c;
}

/// Every weight N(0, init_std^2), norms at 1.
inline Model random_model(const ModelConfig& c, std::uint64_t seed, double init_std = 0.02) {
    c.validate();
    Rng rng(seed);
    Model m;
    m.config = c;
    m.embed = rng.gaussian(c.vocab_size, c.dim, init_std);
    m.layers.resize(c.n_layers);
    for (auto& layer : m.layers) {
        layer.attn_norm.assign(c.dim, 1.0);
        layer.ffn_norm.assign(c.dim, 1.0);
        for (Proj p : kAllProjs) {
            const auto [rows, cols] = expected_shape(c, p);
            layer[p] = Linear::dense(rng.gaussian(rows, cols, init_std));
        }
    }
    m.final_norm.assign(c.dim, 1.0);
    m.lm_head = rng.gaussian(c.vocab_size, c.dim, init_std);
    return m;
}

/// A few input features whose normalized activations are much larger than the rest.
inline const std::vector<std::size_t>& outlier_features() {
    static const std::vector<std::size_t> kFeatures{3, 17, 38, 55};
    return kFeatures;
}

inline Matrix planted_low_rank(Rng& rng, std::size_t rows, std::size_t cols, std::size_t rank, double scale,
                               double noise, double outlier_scale) {
    const Matrix a = rng.gaussian(rows, rank, 1.0);
    const Matrix b = rng.gaussian(rank, cols, 1.0);
    Matrix w = matmul(a, b);
    const double norm = scale / std::sqrt(static_cast<double>(rank * cols));
    for (double& v : w.data()) v = v * norm + rng.normal() * noise;
    for (std::size_t j : outlier_features()) {
        if (j >= cols) continue;
        for (std::size_t i = 0; i < rows; ++i) w(i, j) += rng.normal() * outlier_scale;
    }
    return w;
}

/// Model with planted low-rank attention, dense full-rank feed-forward blocks
/// with uneven channel gains, and norm weights that make a handful of input
/// features outliers at every projection input.
inline Model planted_model(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    Model m;
    m.config = c;
    m.embed = rng.gaussian(c.vocab_size, c.dim, 1.0);
    m.layers.resize(c.n_layers);
    const double x_scale = 1.0 / std::sqrt(static_cast<double>(c.dim));
    for (auto& layer : m.layers) {
        layer.attn_norm.assign(c.dim, 1.0);
        layer.ffn_norm.assign(c.dim, 1.0);
        for (std::size_t j : outlier_features()) {
            layer.attn_norm[j] = 6.0;
            layer.ffn_norm[j] = 6.0;
        }
        layer[Proj::Q] = Linear::dense(planted_low_rank(rng, c.dim, c.dim, 6, 2.5, 0.01, 0.08));
        layer[Proj::K] = Linear::dense(planted_low_rank(rng, c.dim, c.dim, 6, 2.5, 0.01, 0.08));
        layer[Proj::V] = Linear::dense(planted_low_rank(rng, c.dim, c.dim, 16, 1.2, 0.01, 0.08));
        layer[Proj::O] = Linear::dense(planted_low_rank(rng, c.dim, c.dim, 16, 1.2, 0.01, 0.0));

        layer[Proj::Gate] = Linear::dense(rng.gaussian(c.ffn_dim, c.dim, x_scale));
        layer[Proj::Up] = Linear::dense(rng.gaussian(c.ffn_dim, c.dim, x_scale));
        Matrix down = rng.gaussian(c.dim, c.ffn_dim, 1.0 / std::sqrt(static_cast<double>(c.ffn_dim)));
        for (std::size_t i = 0; i < c.ffn_dim; ++i) {
            const double gain = std::exp(1.2 * rng.normal());
            for (std::size_t r = 0; r < c.dim; ++r) down(r, i) *= gain;
        }
        layer[Proj::Down] = Linear::dense(std::move(down));
    }
    m.final_norm.assign(c.dim, 1.0);
    m.lm_head = rng.gaussian(c.vocab_size, c.dim, 2.5 * x_scale);
    return m;
}

/// Concatenation of `sequences` independent samples of `length` tokens drawn
/// autoregressively from the model (temperature 1, no cache).
inline TokenStream sample_stream(const Model& m, std::size_t sequences, std::size_t length, std::uint64_t seed) {
    Rng rng(seed);
    TokenStream out;
    out.reserve(sequences * length);
    for (std::size_t s = 0; s < sequences; ++s) {
        TokenStream seq{static_cast<std::uint32_t>(rng.below(m.config.vocab_size))};
        while (seq.size() < length) {
            const Matrix logits = forward(m, seq).logits;
            const auto row = logits.row(logits.rows() - 1);
            double mx = row[0];
            for (double v : row) mx = std::max(mx, v);
            std::vector<double> p(row.size());
            double z = 0.0;
            for (std::size_t i = 0; i < row.size(); ++i) z += (p[i] = std::exp(row[i] - mx));
            double u = rng.uniform() * z;
            std::size_t pick = row.size() - 1;
            for (std::size_t i = 0; i < row.size(); ++i) {
                u -= p[i];
                if (u < 0.0) {
                    pick = i;
                    break;
                }
            }
            seq.push_back(static_cast<std::uint32_t>(pick));
        }
        out.insert(out.end(), seq.begin(), seq.end());
    }
    return out;
}

} // namespace lorap::fixture
