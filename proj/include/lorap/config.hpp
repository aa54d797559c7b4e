#pragma once

#include <lorap/error.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace lorap {

struct ModelConfig {
    std::size_t dim = 0;
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    std::size_t n_layers = 0;
    std::size_t ffn_dim = 0;
    std::size_t vocab_size = 0;
    double norm_eps = 1e-6;
    double rope_theta = 10000.0;

    void validate() const {
        if (dim == 0 || n_heads == 0 || head_dim == 0 || n_layers == 0 || ffn_dim == 0 || vocab_size == 0) {
            throw FormatError("model config: all dimensions and counts must be >= 1");
        }
        if (dim != n_heads * head_dim) {
            throw FormatError("model config: dim (" + std::to_string(dim) + ") != n_heads * head_dim (" +
                              std::to_string(n_heads * head_dim) + ")");
        }
        if (head_dim % 2 != 0) throw FormatError("model config: head_dim must be even for rotary embedding");
        if (!(norm_eps > 0.0) || !(rope_theta > 0.0)) {
            throw FormatError("model config: norm_eps and rope_theta must be positive");
        }
    }

    /// Compressible parameters of one transformer layer: four d x d attention
    /// projections plus three d x d_m feed-forward projections.
    [[nodiscard]] std::size_t layer_params() const { return 4 * dim * dim + 3 * dim * ffn_dim; }
    [[nodiscard]] std::size_t mha_params() const { return 4 * dim * dim; }
    [[nodiscard]] std::size_t ffn_params() const { return 3 * dim * ffn_dim; }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"dim", c.dim},           {"n_heads", c.n_heads},       {"head_dim", c.head_dim},
         {"n_layers", c.n_layers}, {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size},
         {"norm_eps", c.norm_eps}, {"rope_theta", c.rope_theta}};
}

/// Accepts the native key names and the common Hugging Face aliases.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    auto pick = [&](std::initializer_list<const char*> keys, auto& field, bool required) {
        for (const char* k : keys) {
            if (j.contains(k)) {
                j.at(k).get_to(field);
                return;
            }
        }
        if (required) throw FormatError(std::string("model config: missing key '") + *keys.begin() + "'");
    };
    pick({"dim", "hidden_size"}, c.dim, true);
    pick({"n_heads", "num_attention_heads"}, c.n_heads, true);
    pick({"n_layers", "num_hidden_layers"}, c.n_layers, true);
    pick({"ffn_dim", "intermediate_size"}, c.ffn_dim, true);
    pick({"vocab_size"}, c.vocab_size, true);
    pick({"norm_eps", "rms_norm_eps"}, c.norm_eps, false);
    pick({"rope_theta"}, c.rope_theta, false);
    c.head_dim = 0;
    pick({"head_dim"}, c.head_dim, false);
    if (c.head_dim == 0 && c.n_heads != 0) c.head_dim = c.dim / c.n_heads;
}

inline ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    ModelConfig c;
    try {
        c = nlohmann::json::parse(in).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path.string() + "': " + e.what());
    }
    c.validate();
    return c;
}

// ---- tensor naming --------------------------------------------------------

enum class Proj { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<Proj, 7> kAllProjs{Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down};
inline constexpr std::array<Proj, 4> kMhaProjs{Proj::Q, Proj::K, Proj::V, Proj::O};
inline constexpr std::array<Proj, 3> kFfnProjs{Proj::Gate, Proj::Up, Proj::Down};

inline std::string_view proj_short_name(Proj p) {
    switch (p) {
    case Proj::Q: return "q_proj";
    case Proj::K: return "k_proj";
    case Proj::V: return "v_proj";
    case Proj::O: return "o_proj";
    case Proj::Gate: return "gate_proj";
    case Proj::Up: return "up_proj";
    case Proj::Down: return "down_proj";
    }
    return "";
}

inline Proj parse_proj(std::string_view s) {
    for (Proj p : kAllProjs) {
        const std::string_view full = proj_short_name(p);
        if (s == full || s == full.substr(0, full.size() - 5)) return p;
    }
    throw ArgumentError("unknown projection '" + std::string(s) + "'");
}

inline bool is_mha(Proj p) { return p == Proj::Q || p == Proj::K || p == Proj::V || p == Proj::O; }

inline std::string layer_prefix(std::size_t layer) { return "model.layers." + std::to_string(layer) + "."; }

/// Qualified matrix name without the ".weight" suffix, e.g.
/// "model.layers.0.self_attn.q_proj".
inline std::string proj_base_name(std::size_t layer, Proj p) {
    return layer_prefix(layer) + (is_mha(p) ? "self_attn." : "mlp.") + std::string(proj_short_name(p));
}

inline std::string proj_weight_name(std::size_t layer, Proj p) { return proj_base_name(layer, p) + ".weight"; }
inline std::string attn_norm_name(std::size_t layer) { return layer_prefix(layer) + "input_layernorm.weight"; }
inline std::string ffn_norm_name(std::size_t layer) { return layer_prefix(layer) + "post_attention_layernorm.weight"; }
inline std::string retained_index_name(std::size_t layer) { return layer_prefix(layer) + "mlp.retained_index"; }
inline std::string retained_heads_name(std::size_t layer) { return layer_prefix(layer) + "self_attn.retained_heads"; }
inline constexpr const char* kEmbedName = "model.embed_tokens.weight";
inline constexpr const char* kFinalNormName = "model.norm.weight";
inline constexpr const char* kLmHeadName = "lm_head.weight";

// ---- whole-model vs per-layer ratio ---------------------------------------

struct RatioPlan {
    std::size_t param_total = 0;
    std::size_t param_layer = 0;
    std::size_t n_layers = 0;
    double ratio_s = 0.0; // requested whole-model compression fraction
    double ratio_l = 0.0; // compression fraction each transformer layer must absorb

    /// Fraction of each layer's parameters that survives.
    [[nodiscard]] double layer_keep() const { return 1.0 - ratio_l; }
};

/// Embedding and LM head are left untouched, so the layers must be compressed
/// harder: ratio_l = param_total * ratio_s / (n_layers * param_layer).
inline RatioPlan plan_ratio(const ModelConfig& config, std::size_t param_total, double ratio_s) {
    if (!(ratio_s > 0.0 && ratio_s < 1.0)) throw ArgumentError("plan_ratio: ratio_s must lie in (0, 1)");
    RatioPlan p;
    p.param_total = param_total;
    p.param_layer = config.layer_params();
    p.n_layers = config.n_layers;
    p.ratio_s = ratio_s;
    p.ratio_l = static_cast<double>(param_total) * ratio_s /
                (static_cast<double>(config.n_layers) * static_cast<double>(p.param_layer));
    if (p.ratio_l > 1.0) {
        throw InfeasibleError("requested ratio " + std::to_string(ratio_s) + " needs a per-layer ratio of " +
                              std::to_string(p.ratio_l) + " > 1");
    }
    return p;
}

} // namespace lorap
