#pragma once

// LLaMA-style forward pass (RMS norm, rotary attention with causal mask,
// SiLU-gated feed-forward) over one token sequence at a time, with hooks that
// expose each projection's input so calibration statistics can be gathered.

#include <lorap/config.hpp>
#include <lorap/error.hpp>
#include <lorap/linalg.hpp>
#include <lorap/model.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace lorap {

using TokenStream = std::vector<std::uint32_t>;

/// The four distinct projection inputs of a layer.
enum class Site { AttnInput, AttnOInput, FfnInput, FfnDownInput };

inline constexpr std::array<Site, 4> kAllSites{Site::AttnInput, Site::AttnOInput, Site::FfnInput, Site::FfnDownInput};

inline const char* site_name(Site s) {
    switch (s) {
    case Site::AttnInput: return "attn_input";
    case Site::AttnOInput: return "attn_o_input";
    case Site::FfnInput: return "ffn_input";
    case Site::FfnDownInput: return "ffn_down_input";
    }
    return "?";
}

inline Site input_site(Proj p) {
    switch (p) {
    case Proj::Q:
    case Proj::K:
    case Proj::V: return Site::AttnInput;
    case Proj::O: return Site::AttnOInput;
    case Proj::Gate:
    case Proj::Up: return Site::FfnInput;
    case Proj::Down: return Site::FfnDownInput;
    }
    return Site::AttnInput;
}

/// Receives (site, activations tokens x features) while a layer runs.
using ActivationSink = std::function<void(Site, const Matrix&)>;

// ---- primitive ops -----------------------------------------------------------

inline Matrix rms_norm(const Matrix& x, std::span<const double> weight, double eps) {
    if (weight.size() != x.cols()) throw ArgumentError("rms_norm: weight length does not match feature width");
    Matrix out(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto in = x.row(t);
        double ss = 0.0;
        for (double v : in) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
        auto o = out.row(t);
        for (std::size_t j = 0; j < x.cols(); ++j) o[j] = in[j] * inv * weight[j];
    }
    return out;
}

/// Rotates (x_i, x_{i+half}) pairs of every head in place by position-dependent
/// angles (the "rotate half" layout used by common LLaMA exports).
inline void apply_rotary(Matrix& x, std::size_t head_dim, double theta) {
    const std::size_t half = head_dim / 2;
    const std::size_t heads = x.cols() / head_dim;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i) {
        inv_freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
    for (std::size_t pos = 0; pos < x.rows(); ++pos) {
        auto r = x.row(pos);
        for (std::size_t i = 0; i < half; ++i) {
            const double angle = static_cast<double>(pos) * inv_freq[i];
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            for (std::size_t h = 0; h < heads; ++h) {
                double& a = r[h * head_dim + i];
                double& b = r[h * head_dim + i + half];
                const double a0 = a;
                const double b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

/// Causal softmax attention. q, k, v are tokens x (heads * head_dim); returns
/// the concatenated head outputs. If `probs` is given it receives one
/// tokens x tokens probability matrix per head.
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t head_dim,
                               std::vector<Matrix>* probs = nullptr) {
    const std::size_t n = q.rows();
    const std::size_t heads = q.cols() / head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Matrix out(n, q.cols());
    std::vector<double> p(n);
    if (probs != nullptr) probs->assign(heads, Matrix(n, n));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * head_dim;
        for (std::size_t i = 0; i < n; ++i) {
            double max_score = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) s += q(i, off + c) * k(j, off + c);
                p[j] = s * scale;
                max_score = std::max(max_score, p[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                p[j] = std::exp(p[j] - max_score);
                denom += p[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
                const double w = p[j] / denom;
                if (probs != nullptr) (*probs)[h](i, j) = w;
                for (std::size_t c = 0; c < head_dim; ++c) out(i, off + c) += w * v(j, off + c);
            }
        }
    }
    return out;
}

// ---- layers ---------------------------------------------------------------------

inline void check_layer(const Layer& layer, const ModelConfig& c) {
    const std::size_t inner = layer[Proj::Q].out_features();
    if (inner == 0 || inner % c.head_dim != 0 || layer[Proj::K].out_features() != inner ||
        layer[Proj::V].out_features() != inner || layer[Proj::O].in_features() != inner ||
        layer[Proj::O].out_features() != c.dim || layer[Proj::Q].in_features() != c.dim) {
        throw FormatError("attention projections have inconsistent shapes");
    }
    const std::size_t m = layer[Proj::Up].out_features();
    if (m == 0 || layer[Proj::Gate].out_features() != m || layer[Proj::Down].in_features() != m ||
        layer[Proj::Down].out_features() != c.dim || layer[Proj::Up].in_features() != c.dim) {
        throw FormatError("feed-forward projections have inconsistent shapes");
    }
}

/// Attention sub-layer including the residual add.
inline Matrix attention_block(const Layer& layer, const Matrix& x, const ModelConfig& c, const ActivationSink* sink) {
    const Matrix xn = rms_norm(x, layer.attn_norm, c.norm_eps);
    if (sink) (*sink)(Site::AttnInput, xn);
    Matrix q = layer[Proj::Q].apply(xn);
    Matrix k = layer[Proj::K].apply(xn);
    const Matrix v = layer[Proj::V].apply(xn);
    apply_rotary(q, c.head_dim, c.rope_theta);
    apply_rotary(k, c.head_dim, c.rope_theta);
    const Matrix heads = causal_attention(q, k, v, c.head_dim);
    if (sink) (*sink)(Site::AttnOInput, heads);
    Matrix out = layer[Proj::O].apply(heads);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += x.data()[i];
    return out;
}

/// The gated intermediate activation silu(gate x) * (up x) for normalized x.
inline Matrix ffn_hidden(const Layer& layer, const Matrix& xn) {
    Matrix g = layer[Proj::Gate].apply(xn);
    const Matrix u = layer[Proj::Up].apply(xn);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = silu(g.data()[i]) * u.data()[i];
    return g;
}

/// Feed-forward sub-layer including the residual add.
inline Matrix ffn_block(const Layer& layer, const Matrix& x, const ModelConfig& c, const ActivationSink* sink) {
    const Matrix xn = rms_norm(x, layer.ffn_norm, c.norm_eps);
    if (sink) (*sink)(Site::FfnInput, xn);
    const Matrix hidden = ffn_hidden(layer, xn);
    if (sink) (*sink)(Site::FfnDownInput, hidden);
    Matrix out = layer[Proj::Down].apply(hidden);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += x.data()[i];
    return out;
}

inline Matrix forward_layer(const Layer& layer, const Matrix& x, const ModelConfig& c,
                            const ActivationSink* sink = nullptr) {
    check_layer(layer, c);
    return ffn_block(layer, attention_block(layer, x, c, sink), c, sink);
}

inline Matrix embed_tokens(const Model& m, std::span<const std::uint32_t> tokens) {
    Matrix x(tokens.size(), m.config.dim);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= m.config.vocab_size) {
            throw ArgumentError("token id " + std::to_string(tokens[t]) + " outside vocabulary of " +
                                std::to_string(m.config.vocab_size));
        }
        std::ranges::copy(m.embed.row(tokens[t]), x.row(t).begin());
    }
    return x;
}

/// One layer's captured input at one site: tokens x features for a single sample.
struct CapturedActivation {
    std::size_t layer = 0;
    Site site = Site::AttnInput;
    Matrix values;
};

/// Samples x tokens x features at one site of one layer.
struct ActivationBatch {
    std::size_t layer = 0;
    Site site = Site::AttnInput;
    std::vector<Matrix> samples;
};

struct ForwardResult {
    Matrix logits; // tokens x vocab
    std::vector<CapturedActivation> captured;
};

inline ForwardResult forward(const Model& m, std::span<const std::uint32_t> tokens,
                             const std::set<Site>* capture = nullptr) {
    if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
    ForwardResult res;
    Matrix x = embed_tokens(m, tokens);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        ActivationSink sink = [&](Site s, const Matrix& a) {
            if (capture->contains(s)) res.captured.push_back({i, s, a});
        };
        x = forward_layer(m.layers[i], x, m.config, capture != nullptr ? &sink : nullptr);
    }
    res.logits = matmul_transposed(rms_norm(x, m.final_norm, m.config.norm_eps), m.lm_head);
    return res;
}

/// Groups captured activations of several forwards into per-(layer, site) batches.
inline std::vector<ActivationBatch> batch_captures(const std::vector<ForwardResult>& runs) {
    std::vector<ActivationBatch> out;
    for (const auto& r : runs) {
        for (const auto& c : r.captured) {
            auto it = std::ranges::find_if(out, [&](const auto& b) { return b.layer == c.layer && b.site == c.site; });
            if (it == out.end()) {
                out.push_back({c.layer, c.site, {}});
                it = std::prev(out.end());
            }
            it->samples.push_back(c.values);
        }
    }
    return out;
}

// ---- calibration statistics ---------------------------------------------------

/// Per-input-feature l2 norms over all calibration positions, one vector per site.
struct ActivationStats {
    std::size_t layer = 0;
    std::size_t sample_count = 0;
    std::size_t token_count = 0; // tokens per sample
    std::array<std::vector<double>, 4> site_norms;

    [[nodiscard]] const std::vector<double>& at(Site s) const { return site_norms[static_cast<std::size_t>(s)]; }
    [[nodiscard]] const std::vector<double>& for_matrix(Proj p) const { return at(input_site(p)); }
    [[nodiscard]] bool has(Site s) const { return !at(s).empty(); }
};

/// Accumulates per-feature sums of squares; finish() takes square roots.
class StatsAccumulator {
public:
    void add(Site s, const Matrix& a) {
        auto& acc = sums_[static_cast<std::size_t>(s)];
        if (acc.empty()) acc.assign(a.cols(), 0.0);
        if (acc.size() != a.cols()) throw ArgumentError("stats accumulator: feature width changed");
        for (std::size_t t = 0; t < a.rows(); ++t) {
            const auto r = a.row(t);
            for (std::size_t j = 0; j < a.cols(); ++j) acc[j] += r[j] * r[j];
        }
    }

    [[nodiscard]] ActivationStats finish(std::size_t layer, std::size_t samples, std::size_t tokens) const {
        ActivationStats st;
        st.layer = layer;
        st.sample_count = samples;
        st.token_count = tokens;
        for (std::size_t s = 0; s < 4; ++s) {
            st.site_norms[s].resize(sums_[s].size());
            for (std::size_t j = 0; j < sums_[s].size(); ++j) st.site_norms[s][j] = std::sqrt(sums_[s][j]);
        }
        return st;
    }

    [[nodiscard]] ActivationSink sink() {
        return [this](Site s, const Matrix& a) { add(s, a); };
    }

private:
    std::array<std::vector<double>, 4> sums_;
};

/// Forwards every calibration sample through layers [0, layer) as they stand
/// in `m` and measures the inputs of layer `layer`.
inline ActivationStats collect_stats(const Model& m, const std::vector<TokenStream>& calib, std::size_t layer) {
    if (calib.empty()) throw ArgumentError("collect_stats: empty calibration set");
    if (layer >= m.layers.size()) throw ArgumentError("collect_stats: layer index out of range");
    StatsAccumulator acc;
    const ActivationSink sink = acc.sink();
    std::size_t tokens = 0;
    for (const auto& sample : calib) {
        Matrix x = embed_tokens(m, sample);
        for (std::size_t i = 0; i < layer; ++i) x = forward_layer(m.layers[i], x, m.config);
        forward_layer(m.layers[layer], x, m.config, &sink);
        tokens = std::max(tokens, sample.size());
    }
    return acc.finish(layer, calib.size(), tokens);
}

// ---- evaluation -----------------------------------------------------------------

/// Sum of next-token negative log-likelihoods; logits row t predicts targets[t].
inline double sequence_nll(const Matrix& logits, std::span<const std::uint32_t> targets) {
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto row = logits.row(t);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : row) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        total += (std::log(z) + mx) - row[targets[t]];
    }
    return total;
}

/// Non-overlapping windows of seq_len inputs, each scored on its seq_len
/// shifted targets; a trailing partial window is dropped.
inline double perplexity(const Model& m, const TokenStream& eval, std::size_t seq_len) {
    if (seq_len == 0) throw ArgumentError("perplexity: seq_len must be >= 1");
    if (eval.size() < seq_len + 1) {
        throw ArgumentError("perplexity: evaluation stream of " + std::to_string(eval.size()) +
                            " tokens is shorter than seq_len + 1 = " + std::to_string(seq_len + 1));
    }
    const std::size_t windows = (eval.size() - 1) / seq_len;
    double nll = 0.0;
    for (std::size_t w = 0; w < windows; ++w) {
        const std::span<const std::uint32_t> inputs(eval.data() + w * seq_len, seq_len);
        const std::span<const std::uint32_t> targets(eval.data() + w * seq_len + 1, seq_len);
        nll += sequence_nll(forward(m, inputs).logits, targets);
    }
    return std::exp(nll / static_cast<double>(windows * seq_len));
}

struct ParamMacs {
    std::size_t params = 0;
    std::size_t macs = 0;
};

/// Stored-parameter count and multiply-accumulates for one sequence of
/// seq_len tokens: every projection, the attention score and value products
/// (full seq_len x seq_len per head) and the LM head.
inline ParamMacs count_params_macs(const Model& m, std::size_t seq_len) {
    ParamMacs r;
    r.params = m.param_count();
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        for (const auto& lin : m.layers[i].proj) r.macs += lin.macs(seq_len);
        r.macs += 2 * m.active_heads(i) * seq_len * seq_len * m.config.head_dim;
    }
    r.macs += seq_len * m.lm_head.rows() * m.lm_head.cols();
    return r;
}

// ---- tokens ---------------------------------------------------------------------

inline TokenStream tokenize_bytes(std::span<const std::byte> text) {
    TokenStream out(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<std::uint32_t>(text[i]);
    return out;
}

inline TokenStream tokenize_bytes(std::string_view text) { return tokenize_bytes(std::as_bytes(std::span(text))); }

inline std::string detokenize_bytes(const TokenStream& tokens) {
    std::string out(tokens.size(), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] > 255) throw ArgumentError("detokenize_bytes: id above 255");
        out[i] = static_cast<char>(tokens[i]);
    }
    return out;
}

enum class TokenFormat { U32, Text };

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline TokenStream read_tokens(const std::filesystem::path& path, TokenFormat format) {
    const auto raw = read_bytes(path);
    if (format == TokenFormat::Text) return tokenize_bytes(std::as_bytes(std::span(raw)));
    if (raw.size() % 4 != 0) throw FormatError("token file '" + path.string() + "' length is not a multiple of 4");
    TokenStream out(raw.size() / 4);
    std::memcpy(out.data(), raw.data(), raw.size());
    return out;
}

inline void write_tokens(const std::filesystem::path& path, const TokenStream& tokens) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(tokens.data()), static_cast<std::streamsize>(tokens.size() * 4));
}

inline void check_vocab(const TokenStream& tokens, std::size_t vocab) {
    for (auto t : tokens) {
        if (t >= vocab) throw FormatError("token id " + std::to_string(t) + " outside vocabulary");
    }
}

/// FNV-1a over the little-endian id bytes, as a 16-digit hex string.
inline std::string token_hash(const TokenStream& tokens) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto t : tokens) {
        for (int b = 0; b < 4; ++b) {
            h ^= (t >> (8 * b)) & 0xFFu;
            h *= 0x100000001b3ULL;
        }
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = kHex[h & 0xF];
        h >>= 4;
    }
    return s;
}

/// Uniform in [0, bound) from raw 64-bit draws, by rejection, so results do not
/// depend on the standard library's distribution implementation.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % bound;
}

/// Picks `samples` distinct non-overlapping windows of `tokens` ids. Windows
/// are the aligned slots [k*tokens, (k+1)*tokens); the chosen slots come from a
/// seeded partial Fisher-Yates shuffle.
inline std::vector<TokenStream> sample_windows(const TokenStream& source, std::size_t samples, std::size_t tokens,
                                               std::uint64_t seed) {
    if (samples == 0 || tokens == 0) throw ArgumentError("sample_windows: samples and tokens must be >= 1");
    const std::size_t slots = source.size() / tokens;
    if (slots < samples) {
        throw FormatError("calibration data holds " + std::to_string(slots) + " windows of " + std::to_string(tokens) +
                          " tokens but " + std::to_string(samples) + " are required");
    }
    std::vector<std::size_t> order(slots);
    for (std::size_t i = 0; i < slots; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::vector<TokenStream> out;
    out.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, slots - i));
        std::swap(order[i], order[j]);
        const auto start = source.begin() + static_cast<std::ptrdiff_t>(order[i] * tokens);
        out.emplace_back(start, start + static_cast<std::ptrdiff_t>(tokens));
    }
    return out;
}

} // namespace lorap
