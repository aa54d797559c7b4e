#pragma once

// Sidecar manifest describing how every transformer weight of a source model
// was stored after compression. Serialized as canonical JSON (sorted keys).

#include <lorap/config.hpp>
#include <lorap/error.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace lorap {

inline constexpr int kManifestFormatVersion = 1;

struct MatrixRecord {
    std::string scheme = "dense"; // "dense" | "factored"
    std::size_t rows = 0;         // stored d_out (after any pruning)
    std::size_t cols = 0;         // stored d_in
    std::size_t rank = 0;         // factored only

    [[nodiscard]] bool factored() const { return scheme == "factored"; }
    [[nodiscard]] std::size_t params() const { return factored() ? rank * (rows + cols) : rows * cols; }
};

struct LayerRecord {
    std::size_t index = 0;
    std::array<MatrixRecord, 7> matrices{}; // indexed by Proj
    std::string mha_method;
    std::string ffn_method;
    std::size_t mha_budget = 0;
    std::size_t qk_budget = 0;
    std::size_t vo_budget = 0;
    bool dense_overflow = false; // a group exceeded its dense size and was kept dense
    std::vector<std::size_t> retained_heads;
    std::size_t ffn_retained_count = 0;
    std::vector<std::size_t> ffn_retained;
    std::vector<std::string> ffn_provenance; // "top" | "bottom", parallel to ffn_retained

    MatrixRecord& operator[](Proj p) { return matrices[static_cast<std::size_t>(p)]; }
    const MatrixRecord& operator[](Proj p) const { return matrices[static_cast<std::size_t>(p)]; }

    [[nodiscard]] std::size_t params() const {
        std::size_t n = 0;
        for (const auto& m : matrices) n += m.params();
        return n;
    }
};

struct GlobalRecord {
    double ratio_s = 0.0;
    double ratio_l = 0.0;
    double layer_keep = 1.0;
    std::string alloc = "1:3";
    std::string aggregation = "l2";
    double retain_least = 0.01;
    std::uint64_t seed = 0;
    std::string calibration_hash;
    std::size_t calibration_samples = 0;
    std::size_t calibration_tokens = 0;
    bool calibration_fixed_across_layers = true;
    std::string mha_method = "awsvd";
    std::string ffn_method = "prune";
};

struct CompressionManifest {
    int format_version = kManifestFormatVersion;
    ModelConfig config;
    GlobalRecord global;
    std::vector<LayerRecord> layers;
    std::size_t untouched_params = 0; // embedding, head, norms
    std::size_t params_before = 0;
    std::size_t params_after = 0;

    [[nodiscard]] std::size_t transformer_params() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.params();
        return n;
    }

    [[nodiscard]] std::size_t recompute_params() const { return untouched_params + transformer_params(); }

    void validate() const {
        if (format_version != kManifestFormatVersion) {
            throw FormatError("manifest: unsupported format_version " + std::to_string(format_version));
        }
        if (layers.size() != config.n_layers) throw FormatError("manifest: layer count does not match config");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.index != i) throw FormatError("manifest: layer records out of order at " + std::to_string(i));
            for (const auto& m : l.matrices) {
                if (m.scheme != "dense" && m.scheme != "factored") {
                    throw FormatError("manifest: unknown scheme '" + m.scheme + "' in layer " + std::to_string(i));
                }
                if (m.rows == 0 || m.cols == 0) throw FormatError("manifest: empty matrix in layer " + std::to_string(i));
                if (m.factored() && (m.rank == 0 || m.rank > std::min(m.rows, m.cols))) {
                    throw FormatError("manifest: invalid rank in layer " + std::to_string(i));
                }
            }
            if (l.ffn_retained.size() != l.ffn_provenance.size()) {
                throw FormatError("manifest: retained index/provenance length mismatch in layer " + std::to_string(i));
            }
        }
        if (recompute_params() != params_after) {
            throw FormatError("manifest: recorded params_after (" + std::to_string(params_after) +
                              ") disagrees with per-layer records (" + std::to_string(recompute_params()) + ")");
        }
    }
};

inline void to_json(nlohmann::json& j, const MatrixRecord& m) {
    j = {{"scheme", m.scheme}, {"rows", m.rows}, {"cols", m.cols}};
    if (m.factored()) j["rank"] = m.rank;
}

inline void from_json(const nlohmann::json& j, MatrixRecord& m) {
    j.at("scheme").get_to(m.scheme);
    j.at("rows").get_to(m.rows);
    j.at("cols").get_to(m.cols);
    m.rank = j.value("rank", std::size_t{0});
}

inline void to_json(nlohmann::json& j, const LayerRecord& l) {
    nlohmann::json mats = nlohmann::json::object();
    for (Proj p : kAllProjs) mats[std::string(proj_short_name(p))] = l[p];
    j = {{"index", l.index},
         {"matrices", mats},
         {"mha", {{"method", l.mha_method},
                  {"budget", l.mha_budget},
                  {"qk_budget", l.qk_budget},
                  {"vo_budget", l.vo_budget},
                  {"dense_overflow", l.dense_overflow},
                  {"retained_heads", l.retained_heads}}},
         {"ffn", {{"method", l.ffn_method},
                  {"retained_count", l.ffn_retained_count},
                  {"retained", l.ffn_retained},
                  {"provenance", l.ffn_provenance}}}};
}

inline void from_json(const nlohmann::json& j, LayerRecord& l) {
    j.at("index").get_to(l.index);
    const auto& mats = j.at("matrices");
    for (Proj p : kAllProjs) l[p] = mats.at(std::string(proj_short_name(p))).get<MatrixRecord>();
    const auto& mha = j.at("mha");
    mha.at("method").get_to(l.mha_method);
    mha.at("budget").get_to(l.mha_budget);
    mha.at("qk_budget").get_to(l.qk_budget);
    mha.at("vo_budget").get_to(l.vo_budget);
    mha.at("dense_overflow").get_to(l.dense_overflow);
    mha.at("retained_heads").get_to(l.retained_heads);
    const auto& ffn = j.at("ffn");
    ffn.at("method").get_to(l.ffn_method);
    ffn.at("retained_count").get_to(l.ffn_retained_count);
    ffn.at("retained").get_to(l.ffn_retained);
    ffn.at("provenance").get_to(l.ffn_provenance);
}

inline void to_json(nlohmann::json& j, const GlobalRecord& g) {
    j = {{"ratio_s", g.ratio_s},
         {"ratio_l", g.ratio_l},
         {"layer_keep", g.layer_keep},
         {"alloc", g.alloc},
         {"aggregation", g.aggregation},
         {"retain_least", g.retain_least},
         {"seed", g.seed},
         {"mha_method", g.mha_method},
         {"ffn_method", g.ffn_method},
         {"calibration", {{"hash", g.calibration_hash},
                          {"samples", g.calibration_samples},
                          {"tokens", g.calibration_tokens},
                          {"fixed_across_layers", g.calibration_fixed_across_layers}}}};
}

inline void from_json(const nlohmann::json& j, GlobalRecord& g) {
    j.at("ratio_s").get_to(g.ratio_s);
    j.at("ratio_l").get_to(g.ratio_l);
    j.at("layer_keep").get_to(g.layer_keep);
    j.at("alloc").get_to(g.alloc);
    j.at("aggregation").get_to(g.aggregation);
    j.at("retain_least").get_to(g.retain_least);
    j.at("seed").get_to(g.seed);
    j.at("mha_method").get_to(g.mha_method);
    j.at("ffn_method").get_to(g.ffn_method);
    const auto& c = j.at("calibration");
    c.at("hash").get_to(g.calibration_hash);
    c.at("samples").get_to(g.calibration_samples);
    c.at("tokens").get_to(g.calibration_tokens);
    c.at("fixed_across_layers").get_to(g.calibration_fixed_across_layers);
}

inline void to_json(nlohmann::json& j, const CompressionManifest& m) {
    j = {{"format_version", m.format_version},
         {"config", m.config},
         {"global", m.global},
         {"layers", m.layers},
         {"params", {{"untouched", m.untouched_params},
                     {"before", m.params_before},
                     {"after", m.params_after},
                     {"transformer_after", m.transformer_params()}}}};
}

inline void from_json(const nlohmann::json& j, CompressionManifest& m) {
    j.at("format_version").get_to(m.format_version);
    m.config = j.at("config").get<ModelConfig>();
    m.global = j.at("global").get<GlobalRecord>();
    m.layers = j.at("layers").get<std::vector<LayerRecord>>();
    const auto& p = j.at("params");
    p.at("untouched").get_to(m.untouched_params);
    p.at("before").get_to(m.params_before);
    p.at("after").get_to(m.params_after);
}

inline std::string manifest_to_string(const CompressionManifest& m) {
    return nlohmann::json(m).dump(2) + "\n";
}

inline CompressionManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    CompressionManifest m;
    try {
        m = nlohmann::json::parse(in).get<CompressionManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest '" + path.string() + "': " + e.what());
    }
    m.config.validate();
    m.validate();
    return m;
}

} // namespace lorap
