#pragma once

// In-memory LLaMA-style model: token embedding, a stack of attention +
// feed-forward layers whose projections are either dense or factored (L, R),
// a final RMS norm and the LM head. Plus loading and writing it through the
// tensor container.

#include <lorap/config.hpp>
#include <lorap/error.hpp>
#include <lorap/linalg.hpp>
#include <lorap/manifest.hpp>
#include <lorap/tensor_file.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lorap {

enum class InputAxis { Cols, Rows };

/// A 2-D weight with its input-feature axis. Projections and the LM head use
/// y = W x (input along columns); the embedding table is indexed by row.
struct WeightMatrix {
    Matrix values;
    InputAxis input_axis = InputAxis::Cols;

    [[nodiscard]] std::size_t d_in() const { return input_axis == InputAxis::Cols ? values.cols() : values.rows(); }
    [[nodiscard]] std::size_t d_out() const { return input_axis == InputAxis::Cols ? values.rows() : values.cols(); }
};

using WeightMap = std::map<std::string, WeightMatrix>;

class Linear {
public:
    Linear() = default;

    static Linear dense(Matrix w) {
        Linear l;
        l.dense_ = std::move(w);
        return l;
    }

    static Linear factored(Matrix left, Matrix right) {
        if (left.cols() != right.rows()) throw ArgumentError("factored linear: inner ranks differ");
        Linear l;
        l.left_ = std::move(left);
        l.right_ = std::move(right);
        l.is_factored_ = true;
        return l;
    }

    [[nodiscard]] bool is_factored() const noexcept { return is_factored_; }
    [[nodiscard]] std::size_t in_features() const { return is_factored_ ? right_.cols() : dense_.cols(); }
    [[nodiscard]] std::size_t out_features() const { return is_factored_ ? left_.rows() : dense_.rows(); }
    [[nodiscard]] std::size_t rank() const { return is_factored_ ? left_.cols() : 0; }

    [[nodiscard]] const Matrix& weight() const {
        if (is_factored_) throw ArgumentError("weight() called on a factored linear");
        return dense_;
    }
    [[nodiscard]] const Matrix& left() const { return left_; }
    [[nodiscard]] const Matrix& right() const { return right_; }

    [[nodiscard]] Matrix materialize() const { return is_factored_ ? matmul(left_, right_) : dense_; }

    /// x is tokens x in_features; returns tokens x out_features. A factored
    /// projection applies R first, then L.
    [[nodiscard]] Matrix apply(const Matrix& x) const {
        if (x.cols() != in_features()) throw ArgumentError("linear: input width does not match in_features");
        if (!is_factored_) return matmul_transposed(x, dense_);
        return matmul_transposed(matmul_transposed(x, right_), left_);
    }

    [[nodiscard]] std::size_t param_count() const {
        return is_factored_ ? left_.size() + right_.size() : dense_.size();
    }

    [[nodiscard]] std::size_t macs(std::size_t tokens) const {
        return tokens * (is_factored_ ? rank() * (in_features() + out_features()) : in_features() * out_features());
    }

    [[nodiscard]] MatrixRecord record() const {
        MatrixRecord r;
        r.scheme = is_factored_ ? "factored" : "dense";
        r.rows = out_features();
        r.cols = in_features();
        r.rank = rank();
        return r;
    }

private:
    Matrix dense_;
    Matrix left_;
    Matrix right_;
    bool is_factored_ = false;
};

struct Layer {
    std::vector<double> attn_norm;
    std::vector<double> ffn_norm;
    std::array<Linear, 7> proj; // indexed by Proj

    Linear& operator[](Proj p) { return proj[static_cast<std::size_t>(p)]; }
    const Linear& operator[](Proj p) const { return proj[static_cast<std::size_t>(p)]; }

    [[nodiscard]] std::size_t param_count() const {
        std::size_t n = attn_norm.size() + ffn_norm.size();
        for (const auto& l : proj) n += l.param_count();
        return n;
    }
};

struct Model {
    ModelConfig config;
    Matrix embed; // vocab x d
    std::vector<Layer> layers;
    std::vector<double> final_norm;
    Matrix lm_head; // vocab x d

    [[nodiscard]] std::size_t param_count() const {
        std::size_t n = embed.size() + final_norm.size() + lm_head.size();
        for (const auto& l : layers) n += l.param_count();
        return n;
    }

    /// Parameters that compression never touches: embedding, head and all norms.
    [[nodiscard]] std::size_t untouched_params() const {
        std::size_t n = embed.size() + final_norm.size() + lm_head.size();
        for (const auto& l : layers) n += l.attn_norm.size() + l.ffn_norm.size();
        return n;
    }

    [[nodiscard]] std::size_t transformer_params() const { return param_count() - untouched_params(); }

    [[nodiscard]] std::size_t active_heads(std::size_t layer) const {
        return layers.at(layer)[Proj::Q].out_features() / config.head_dim;
    }
};

// ---- shapes implied by a config ---------------------------------------------

inline std::pair<std::size_t, std::size_t> expected_shape(const ModelConfig& c, Proj p) {
    switch (p) {
    case Proj::Q:
    case Proj::K:
    case Proj::V:
    case Proj::O: return {c.dim, c.dim};
    case Proj::Gate:
    case Proj::Up: return {c.ffn_dim, c.dim};
    case Proj::Down: return {c.dim, c.ffn_dim};
    }
    return {0, 0};
}

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

inline Matrix read_matrix(const TensorContainer& c, const std::string& name, std::vector<std::size_t> shape) {
    const TensorEntry* e = c.find(name);
    if (e == nullptr) throw FormatError("missing tensor '" + name + "'");
    if (e->shape != shape) {
        throw FormatError("shape mismatch for tensor '" + name + "': expected " + shape_str(shape) + ", found " +
                          shape_str(e->shape));
    }
    const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
    const std::size_t cols = shape.back();
    try {
        return Matrix(rows, cols, c.read_real(*e));
    } catch (const ArgumentError&) {
        throw FormatError("tensor '" + name + "' contains non-finite values");
    }
}

} // namespace detail

/// Loads every tensor of an uncompressed model as 64-bit weights.
inline WeightMap load_model(const std::filesystem::path& path, const ModelConfig& config) {
    config.validate();
    const TensorContainer c = TensorContainer::from_file(path);
    WeightMap out;
    const std::size_t d = config.dim;
    const std::size_t v = config.vocab_size;
    out[kEmbedName] = {detail::read_matrix(c, kEmbedName, {v, d}), InputAxis::Rows};
    out[kLmHeadName] = {detail::read_matrix(c, kLmHeadName, {v, d}), InputAxis::Cols};
    out[kFinalNormName] = {detail::read_matrix(c, kFinalNormName, {d}), InputAxis::Cols};
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        out[attn_norm_name(i)] = {detail::read_matrix(c, attn_norm_name(i), {d}), InputAxis::Cols};
        out[ffn_norm_name(i)] = {detail::read_matrix(c, ffn_norm_name(i), {d}), InputAxis::Cols};
        for (Proj p : kAllProjs) {
            const auto [rows, cols] = expected_shape(config, p);
            out[proj_weight_name(i, p)] = {detail::read_matrix(c, proj_weight_name(i, p), {rows, cols}),
                                           InputAxis::Cols};
        }
    }
    return out;
}

inline Model model_from_weights(const ModelConfig& config, const WeightMap& w) {
    auto get = [&](const std::string& name) -> const Matrix& {
        auto it = w.find(name);
        if (it == w.end()) throw FormatError("missing tensor '" + name + "'");
        return it->second.values;
    };
    auto vec = [&](const std::string& name) {
        const auto d = get(name).data();
        return std::vector<double>(d.begin(), d.end());
    };
    Model m;
    m.config = config;
    m.embed = get(kEmbedName);
    m.lm_head = get(kLmHeadName);
    m.final_norm = vec(kFinalNormName);
    m.layers.resize(config.n_layers);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
        auto& layer = m.layers[i];
        layer.attn_norm = vec(attn_norm_name(i));
        layer.ffn_norm = vec(ffn_norm_name(i));
        for (Proj p : kAllProjs) layer[p] = Linear::dense(get(proj_weight_name(i, p)));
    }
    return m;
}

inline Model load_dense_model(const std::filesystem::path& path, const ModelConfig& config) {
    return model_from_weights(config, load_model(path, config));
}

/// Serializes the model tensors. Dense projections go to "<base>.weight",
/// factored ones to "<base>.L" / "<base>.R".
inline TensorWriter model_tensors(const Model& m, DType dtype = DType::F32) {
    TensorWriter w;
    auto put = [&](const std::string& name, std::vector<std::size_t> shape, std::span<const double> v) {
        if (dtype == DType::F16) {
            w.add_f16(name, std::move(shape), v);
        } else {
            w.add_f32(name, std::move(shape), v);
        }
    };
    auto put_matrix = [&](const std::string& name, const Matrix& x) { put(name, {x.rows(), x.cols()}, x.data()); };
    put_matrix(kEmbedName, m.embed);
    put_matrix(kLmHeadName, m.lm_head);
    put(kFinalNormName, {m.final_norm.size()}, m.final_norm);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& layer = m.layers[i];
        put(attn_norm_name(i), {layer.attn_norm.size()}, layer.attn_norm);
        put(ffn_norm_name(i), {layer.ffn_norm.size()}, layer.ffn_norm);
        for (Proj p : kAllProjs) {
            const Linear& lin = layer[p];
            const std::string base = proj_base_name(i, p);
            if (lin.is_factored()) {
                put_matrix(base + ".L", lin.left());
                put_matrix(base + ".R", lin.right());
            } else {
                put_matrix(base + ".weight", lin.weight());
            }
        }
    }
    return w;
}

inline void write_model(const std::filesystem::path& path, const Model& m, DType dtype = DType::F32) {
    model_tensors(m, dtype).write(path);
}

inline void write_config(const std::filesystem::path& path, const ModelConfig& c) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << nlohmann::json(c).dump(2) << "\n";
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void check_manifest_matches(const Model& m, const CompressionManifest& manifest) {
    if (manifest.layers.size() != m.layers.size()) throw FormatError("manifest/weights: layer count differs");
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        for (Proj p : kAllProjs) {
            const MatrixRecord actual = m.layers[i][p].record();
            const MatrixRecord& rec = manifest.layers[i][p];
            if (actual.scheme != rec.scheme || actual.rows != rec.rows || actual.cols != rec.cols ||
                actual.rank != rec.rank) {
                throw FormatError("manifest/weights inconsistency at '" + proj_base_name(i, p) + "'");
            }
        }
        if (manifest.layers[i].ffn_method == "prune" &&
            manifest.layers[i].ffn_retained.size() != m.layers[i][Proj::Up].out_features()) {
            throw FormatError("manifest/weights: retained index count differs in layer " + std::to_string(i));
        }
    }
    if (m.param_count() != manifest.params_after) {
        throw FormatError("manifest/weights: params_after does not match the weights");
    }
}

/// Writes the compressed container at `path` and its manifest as
/// "manifest.json" in the same directory. Pruned FFN layers also get an I32
/// tensor of retained intermediate indices; head-pruned layers one of heads.
inline void write_compressed(const std::filesystem::path& path, const Model& m, const CompressionManifest& manifest) {
    manifest.validate();
    check_manifest_matches(m, manifest);
    TensorWriter w = model_tensors(m, DType::F32);
    for (const auto& rec : manifest.layers) {
        if (!rec.ffn_retained.empty()) {
            std::vector<std::int32_t> idx(rec.ffn_retained.begin(), rec.ffn_retained.end());
            w.add_i32(retained_index_name(rec.index), idx);
        }
        if (!rec.retained_heads.empty()) {
            std::vector<std::int32_t> idx(rec.retained_heads.begin(), rec.retained_heads.end());
            w.add_i32(retained_heads_name(rec.index), idx);
        }
    }
    w.write(path);
    write_text_file(path.parent_path() / "manifest.json", manifest_to_string(manifest));
}

inline Model load_compressed(const std::filesystem::path& model_path, const CompressionManifest& manifest) {
    const TensorContainer c = TensorContainer::from_file(model_path);
    const ModelConfig& cfg = manifest.config;
    const std::size_t d = cfg.dim;
    Model m;
    m.config = cfg;
    m.embed = detail::read_matrix(c, kEmbedName, {cfg.vocab_size, d});
    m.lm_head = detail::read_matrix(c, kLmHeadName, {cfg.vocab_size, d});
    const auto fn = detail::read_matrix(c, kFinalNormName, {d});
    m.final_norm.assign(fn.data().begin(), fn.data().end());
    m.layers.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        auto& layer = m.layers[i];
        const auto an = detail::read_matrix(c, attn_norm_name(i), {d});
        const auto fn2 = detail::read_matrix(c, ffn_norm_name(i), {d});
        layer.attn_norm.assign(an.data().begin(), an.data().end());
        layer.ffn_norm.assign(fn2.data().begin(), fn2.data().end());
        for (Proj p : kAllProjs) {
            const MatrixRecord& rec = manifest.layers[i][p];
            const std::string base = proj_base_name(i, p);
            if (rec.factored()) {
                layer[p] = Linear::factored(detail::read_matrix(c, base + ".L", {rec.rows, rec.rank}),
                                            detail::read_matrix(c, base + ".R", {rec.rank, rec.cols}));
            } else {
                layer[p] = Linear::dense(detail::read_matrix(c, base + ".weight", {rec.rows, rec.cols}));
            }
        }
        const auto& rec = manifest.layers[i];
        if (!rec.ffn_retained.empty()) {
            const auto idx = c.read_i32(c.at(retained_index_name(i)));
            if (idx.size() != rec.ffn_retained.size() ||
                !std::equal(idx.begin(), idx.end(), rec.ffn_retained.begin(),
                            [](std::int32_t a, std::size_t b) { return static_cast<std::size_t>(a) == b; })) {
                throw FormatError("retained index tensor disagrees with manifest in layer " + std::to_string(i));
            }
        }
    }
    check_manifest_matches(m, manifest);
    return m;
}

/// A compressed output directory holds model.safetensors, manifest.json and
/// config.json.
inline Model load_compressed_dir(const std::filesystem::path& dir, CompressionManifest* manifest_out = nullptr) {
    CompressionManifest manifest = read_manifest(dir / "manifest.json");
    Model m = load_compressed(dir / "model.safetensors", manifest);
    if (manifest_out != nullptr) *manifest_out = std::move(manifest);
    return m;
}

} // namespace lorap
