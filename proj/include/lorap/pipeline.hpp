#pragma once

// Layer-by-layer compression: each layer's calibration statistics are taken
// from the output of the already-compressed prefix, the attention projections
// are factored and the feed-forward groups pruned, and the compressed layer's
// output becomes the next layer's calibration input.

#include <lorap/awsvd.hpp>
#include <lorap/config.hpp>
#include <lorap/ffn_prune.hpp>
#include <lorap/manifest.hpp>
#include <lorap/model.hpp>
#include <lorap/transformer.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace lorap {

enum class MhaMethod { Awsvd, Svd, HeadPrune, Dense };
enum class FfnMethod { Prune, Svd, Awsvd, Dense };

inline const char* mha_method_name(MhaMethod m) {
    switch (m) {
    case MhaMethod::Awsvd: return "awsvd";
    case MhaMethod::Svd: return "svd";
    case MhaMethod::HeadPrune: return "heads";
    case MhaMethod::Dense: return "dense";
    }
    return "?";
}

inline const char* ffn_method_name(FfnMethod m) {
    switch (m) {
    case FfnMethod::Prune: return "prune";
    case FfnMethod::Svd: return "svd";
    case FfnMethod::Awsvd: return "awsvd";
    case FfnMethod::Dense: return "dense";
    }
    return "?";
}

inline MhaMethod parse_mha_method(std::string_view s) {
    for (auto m : {MhaMethod::Awsvd, MhaMethod::Svd, MhaMethod::HeadPrune, MhaMethod::Dense}) {
        if (s == mha_method_name(m)) return m;
    }
    throw ArgumentError("attention method must be one of awsvd, svd, heads, dense");
}

inline FfnMethod parse_ffn_method(std::string_view s) {
    for (auto m : {FfnMethod::Prune, FfnMethod::Svd, FfnMethod::Awsvd, FfnMethod::Dense}) {
        if (s == ffn_method_name(m)) return m;
    }
    throw ArgumentError("feed-forward method must be one of prune, svd, awsvd, dense");
}

struct CalibrationSpec {
    std::size_t samples = 128;
    std::size_t tokens = 128;
};

struct CompressionPlan {
    double ratio_s = 0.0;
    double ratio_l = 0.0;
    double layer_keep = 1.0; // same retained fraction p_r for every layer
    AllocRatio alloc{};
    Aggregation aggregation = Aggregation::L2;
    double retain_least = 0.01;
    std::uint64_t seed = 0;
    CalibrationSpec calibration{};
    MhaMethod mha = MhaMethod::Awsvd;
    FfnMethod ffn = FfnMethod::Prune;

    /// From a whole-model compression ratio, pushing the untouched embedding
    /// and head share onto the transformer layers.
    static CompressionPlan for_model_ratio(const Model& m, double ratio_s) {
        const RatioPlan rp = plan_ratio(m.config, m.param_count(), ratio_s);
        CompressionPlan p;
        p.ratio_s = ratio_s;
        p.ratio_l = rp.ratio_l;
        p.layer_keep = rp.layer_keep();
        return p;
    }

    /// From the retained fraction of every transformer layer directly.
    static CompressionPlan for_layer_keep(const Model& m, double keep) {
        if (!(keep > 0.0 && keep <= 1.0)) throw ArgumentError("layer retained fraction must lie in (0, 1]");
        CompressionPlan p;
        p.layer_keep = keep;
        p.ratio_l = 1.0 - keep;
        p.ratio_s = p.ratio_l * static_cast<double>(m.config.n_layers * m.config.layer_params()) /
                    static_cast<double>(m.param_count());
        return p;
    }
};

struct LayerReport {
    std::size_t index = 0;
    std::array<double, 7> weighted_error{};
    std::array<std::size_t, 7> rank{}; // 0 = dense
    std::size_t mha_budget = 0;
    std::size_t mha_params = 0;
    std::size_t ffn_budget = 0;
    std::size_t ffn_params = 0;
    std::size_t ffn_retained = 0;
    std::size_t heads_retained = 0;

    [[nodiscard]] long long mha_slack() const {
        return static_cast<long long>(mha_budget) - static_cast<long long>(mha_params);
    }
    [[nodiscard]] long long ffn_slack() const {
        return static_cast<long long>(ffn_budget) - static_cast<long long>(ffn_params);
    }
};

struct RunReport {
    std::vector<LayerReport> layers;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    std::size_t transformer_before = 0;
    std::size_t transformer_after = 0;
    double transformer_target = 0.0;
    std::size_t macs_seq_len = 0;
    std::size_t macs_before = 0;
    std::size_t macs_after = 0;
    double compress_seconds = 0.0;
    std::map<std::string, double> eval_ppl;
    double eval_seconds = 0.0;

    /// (realized - target) / target over all transformer-layer weights.
    [[nodiscard]] double realized_deviation() const {
        return transformer_target > 0.0
                   ? (static_cast<double>(transformer_after) - transformer_target) / transformer_target
                   : 0.0;
    }

    void check_against(const CompressionManifest& m) const {
        if (m.params_after != params_after || m.params_before != params_before ||
            m.transformer_params() != transformer_after || m.layers.size() != layers.size()) {
            throw FormatError("run report disagrees with manifest parameter accounting");
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            for (Proj p : kAllProjs) {
                if (m.layers[i][p].rank != layers[i].rank[static_cast<std::size_t>(p)]) {
                    throw FormatError("run report disagrees with manifest ranks in layer " + std::to_string(i));
                }
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const LayerReport& l) {
    nlohmann::json err = nlohmann::json::object();
    nlohmann::json rank = nlohmann::json::object();
    for (Proj p : kAllProjs) {
        err[std::string(proj_short_name(p))] = l.weighted_error[static_cast<std::size_t>(p)];
        rank[std::string(proj_short_name(p))] = l.rank[static_cast<std::size_t>(p)];
    }
    j = {{"index", l.index},
         {"weighted_error", err},
         {"rank", rank},
         {"mha", {{"budget", l.mha_budget}, {"params", l.mha_params}, {"slack", l.mha_slack()}}},
         {"ffn", {{"budget", l.ffn_budget}, {"params", l.ffn_params}, {"slack", l.ffn_slack()}}},
         {"ffn_retained", l.ffn_retained},
         {"heads_retained", l.heads_retained}};
}

/// Report JSON. Wall-clock values sit under "timing" and are indicative only.
inline nlohmann::json report_json(const RunReport& r) {
    return {{"format_version", 1},
            {"layers", r.layers},
            {"params", {{"before", r.params_before},
                        {"after", r.params_after},
                        {"transformer_before", r.transformer_before},
                        {"transformer_after", r.transformer_after},
                        {"transformer_target", r.transformer_target},
                        {"realized_deviation", r.realized_deviation()}}},
            {"macs", {{"seq_len", r.macs_seq_len}, {"before", r.macs_before}, {"after", r.macs_after}}},
            {"eval_ppl", r.eval_ppl},
            {"timing", {{"compress_seconds", r.compress_seconds}, {"eval_seconds", r.eval_seconds}}}};
}

struct CompressionResult {
    Model model;
    CompressionManifest manifest;
    RunReport report;
};

namespace detail {

inline std::size_t ffn_rank_for(double budget, std::size_t d_out, std::size_t d_in) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(budget / static_cast<double>(d_out + d_in))));
}

struct LayerOutcome {
    Layer layer;
    LayerRecord record;
    LayerReport report;
};

inline LayerOutcome compress_layer(const Layer& dense, const ActivationStats& stats, const CompressionPlan& plan,
                                   const ModelConfig& cfg, std::size_t index) {
    LayerOutcome out;
    out.layer = dense;
    out.record.index = index;
    out.report.index = index;
    out.record.mha_method = mha_method_name(plan.mha);
    out.record.ffn_method = ffn_method_name(plan.ffn);

    // attention
    const std::size_t mha_total = dense[Proj::Q].param_count() + dense[Proj::K].param_count() +
                                  dense[Proj::V].param_count() + dense[Proj::O].param_count();
    out.report.mha_budget = static_cast<std::size_t>(std::llround(static_cast<double>(mha_total) * plan.layer_keep));
    if (plan.mha == MhaMethod::Awsvd || plan.mha == MhaMethod::Svd) {
        const MhaAllocation alloc = allocate_mha(mha_total, plan.layer_keep, plan.alloc, mha_dims(dense));
        const auto method = plan.mha == MhaMethod::Awsvd ? LowRankMethod::Awsvd : LowRankMethod::Svd;
        const auto results = compress_mha(dense, stats, alloc, method, index);
        for (std::size_t i = 0; i < 4; ++i) {
            out.layer.proj[i] = results[i].to_linear();
            if (results[i].factored()) out.report.weighted_error[i] = results[i].pair().weighted_error;
        }
        out.record.mha_budget = alloc.total_budget;
        out.record.qk_budget = alloc.qk_budget;
        out.record.vo_budget = alloc.vo_budget;
        out.record.dense_overflow = alloc.dense_overflow;
    } else if (plan.mha == MhaMethod::HeadPrune) {
        const auto scores = head_scores(dense, stats, cfg.head_dim, plan.aggregation);
        const PruneDecision heads = decide_pruning(scores, plan.layer_keep, 0.0, plan.aggregation);
        apply_head_pruning(out.layer, heads.retained, cfg.head_dim);
        out.record.retained_heads = heads.retained;
        out.record.mha_budget = out.report.mha_budget;
    } else {
        out.record.mha_budget = mha_total;
    }

    // feed-forward
    const std::size_t ffn_total =
        dense[Proj::Gate].param_count() + dense[Proj::Up].param_count() + dense[Proj::Down].param_count();
    out.report.ffn_budget = static_cast<std::size_t>(std::llround(static_cast<double>(ffn_total) * plan.layer_keep));
    if (plan.ffn == FfnMethod::Prune) {
        const Matrix up = dense[Proj::Up].materialize();
        const Matrix gate = dense[Proj::Gate].materialize();
        const Matrix down = dense[Proj::Down].materialize();
        const auto scores =
            group_scores(up, gate, down, stats.at(Site::FfnInput), stats.at(Site::FfnDownInput), plan.aggregation);
        const PruneDecision d = decide_pruning(scores, plan.layer_keep, plan.retain_least, plan.aggregation);
        PrunedFfn pruned = apply_pruning(up, gate, down, d);
        out.layer[Proj::Up] = Linear::dense(std::move(pruned.up));
        out.layer[Proj::Gate] = Linear::dense(std::move(pruned.gate));
        out.layer[Proj::Down] = Linear::dense(std::move(pruned.down));
        out.record.ffn_retained = d.retained;
        for (auto p : d.provenance) out.record.ffn_provenance.emplace_back(provenance_name(p));
    } else if (plan.ffn == FfnMethod::Svd || plan.ffn == FfnMethod::Awsvd) {
        for (Proj p : kFfnProjs) {
            const Matrix w = dense[p].materialize();
            const double budget = static_cast<double>(w.size()) * plan.layer_keep;
            const std::size_t r = ffn_rank_for(budget, w.rows(), w.cols());
            if (r * (w.rows() + w.cols()) >= w.size() || r >= std::min(w.rows(), w.cols())) continue;
            const auto& x = stats.for_matrix(p);
            const std::string name = proj_base_name(index, p);
            FactorPair fp = plan.ffn == FfnMethod::Awsvd ? awsvd_factor(w, x, r, name) : svd_factor(w, r, name, x);
            out.report.weighted_error[static_cast<std::size_t>(p)] = fp.weighted_error;
            out.layer[p] = Linear::factored(std::move(fp.l), std::move(fp.r));
        }
    }
    out.record.ffn_retained_count = out.layer[Proj::Up].out_features();

    for (Proj p : kAllProjs) {
        out.record[p] = out.layer[p].record();
        out.report.rank[static_cast<std::size_t>(p)] = out.layer[p].rank();
    }
    for (Proj p : kMhaProjs) out.report.mha_params += out.layer[p].param_count();
    for (Proj p : kFfnProjs) out.report.ffn_params += out.layer[p].param_count();
    out.report.ffn_retained = out.record.ffn_retained_count;
    out.report.heads_retained = out.layer[Proj::Q].out_features() / cfg.head_dim;
    return out;
}

} // namespace detail

/// Statistics of every layer of `model` as it stands, each layer fed by the
/// outputs of the layers before it.
inline std::vector<ActivationStats> layer_stats(const Model& model, const std::vector<TokenStream>& calib) {
    if (calib.empty()) throw ArgumentError("layer_stats: empty calibration set");
    std::vector<Matrix> hidden;
    hidden.reserve(calib.size());
    for (const auto& s : calib) hidden.push_back(embed_tokens(model, s));
    std::vector<ActivationStats> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        StatsAccumulator acc;
        const ActivationSink sink = acc.sink();
        for (auto& h : hidden) h = forward_layer(model.layers[i], h, model.config, &sink);
        out.push_back(acc.finish(i, calib.size(), calib.front().size()));
    }
    return out;
}

/// Compresses every transformer layer in order. The calibration batch is
/// sampled once from `calib_source` and reused for all layers, each layer
/// seeing the outputs of the already-compressed layers before it.
inline CompressionResult compress_model(const Model& model, const CompressionPlan& plan,
                                        const TokenStream& calib_source) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig& cfg = model.config;
    check_vocab(calib_source, cfg.vocab_size);
    const auto calib = sample_windows(calib_source, plan.calibration.samples, plan.calibration.tokens, plan.seed);

    CompressionResult res;
    res.model = model;
    std::vector<Matrix> hidden;
    hidden.reserve(calib.size());
    for (const auto& s : calib) hidden.push_back(embed_tokens(model, s));

    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const Layer& dense = model.layers[i];
        StatsAccumulator acc;
        const ActivationSink sink = acc.sink();
        for (const auto& h : hidden) forward_layer(dense, h, cfg, &sink);
        const ActivationStats stats = acc.finish(i, calib.size(), plan.calibration.tokens);

        detail::LayerOutcome outcome;
        try {
            outcome = detail::compress_layer(dense, stats, plan, cfg, i);
        } catch (const DecompositionError& e) {
            throw DecompositionError("layer " + std::to_string(i) + ": " + e.what());
        }
        for (auto& h : hidden) h = forward_layer(outcome.layer, h, cfg);
        res.model.layers[i] = std::move(outcome.layer);
        res.manifest.layers.push_back(std::move(outcome.record));
        res.report.layers.push_back(outcome.report);
    }

    auto& g = res.manifest.global;
    g.ratio_s = plan.ratio_s;
    g.ratio_l = plan.ratio_l;
    g.layer_keep = plan.layer_keep;
    g.alloc = plan.alloc.str();
    g.aggregation = aggregation_name(plan.aggregation);
    g.retain_least = plan.retain_least;
    g.seed = plan.seed;
    g.calibration_hash = token_hash(calib_source);
    g.calibration_samples = plan.calibration.samples;
    g.calibration_tokens = plan.calibration.tokens;
    g.calibration_fixed_across_layers = true;
    g.mha_method = mha_method_name(plan.mha);
    g.ffn_method = ffn_method_name(plan.ffn);
    res.manifest.config = cfg;
    res.manifest.untouched_params = model.untouched_params();
    res.manifest.params_before = model.param_count();
    res.manifest.params_after = res.model.param_count();
    res.manifest.validate();

    auto& r = res.report;
    r.params_before = model.param_count();
    r.params_after = res.model.param_count();
    r.transformer_before = model.transformer_params();
    r.transformer_after = res.model.transformer_params();
    r.transformer_target = plan.layer_keep * static_cast<double>(cfg.n_layers * cfg.layer_params());
    r.macs_seq_len = plan.calibration.tokens;
    r.macs_before = count_params_macs(model, r.macs_seq_len).macs;
    r.macs_after = count_params_macs(res.model, r.macs_seq_len).macs;
    r.compress_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.check_against(res.manifest);
    return res;
}

} // namespace lorap
