#pragma once

// Command-line surface: analyze, mask, calibrate, compress, eval, stats.
// Exit codes: 0 success, 1 usage error, 2 data or format error.

#include <lorap/awsvd.hpp>
#include <lorap/config.hpp>
#include <lorap/error.hpp>
#include <lorap/ffn_prune.hpp>
#include <lorap/manifest.hpp>
#include <lorap/model.hpp>
#include <lorap/pipeline.hpp>
#include <lorap/transformer.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lorap::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

struct LoadedModel {
    Model model;
    std::optional<CompressionManifest> manifest;
};

/// `model` is a dense container (config from `config` or a sibling
/// config.json), a compressed container with a sibling manifest.json, or a
/// directory holding either.
inline LoadedModel load_model_arg(const fs::path& model, const std::string& config) {
    fs::path file = model;
    if (fs::is_directory(model)) file = model / "model.safetensors";
    if (!fs::exists(file)) throw IoError("model file '" + file.string() + "' does not exist");
    const fs::path manifest_path = file.parent_path() / "manifest.json";
    LoadedModel out;
    if (config.empty() && fs::exists(manifest_path)) {
        CompressionManifest m = read_manifest(manifest_path);
        out.model = load_compressed(file, m);
        out.manifest = std::move(m);
        return out;
    }
    const fs::path cfg_path = config.empty() ? file.parent_path() / "config.json" : fs::path(config);
    if (!fs::exists(cfg_path)) throw ArgumentError("no --config given and '" + cfg_path.string() + "' is missing");
    out.model = load_dense_model(file, load_config(cfg_path));
    return out;
}

inline TokenFormat parse_format(const std::string& s) {
    if (s == "u32") return TokenFormat::U32;
    if (s == "text") return TokenFormat::Text;
    throw ArgumentError("--format must be u32 or text");
}

inline TokenStream load_data(const std::string& path, const std::string& format, std::size_t vocab) {
    TokenStream t = read_tokens(path, parse_format(format));
    check_vocab(t, vocab);
    return t;
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

inline std::string fmt_double(double v, int precision = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

struct Common {
    std::string model;
    std::string config;
    std::string data;
    std::string format = "u32";
    std::string out;
    std::uint64_t seed = 0;
    std::size_t samples = 128;
    std::size_t tokens = 128;
};

inline void add_model_flags(CLI::App* sub, Common& c) {
    sub->add_option("--model", c.model, "model container or output directory")->required();
    sub->add_option("--config", c.config, "model config JSON");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--out", c.out, "output directory");
}

inline void add_data_flags(CLI::App* sub, Common& c, bool required) {
    auto* opt = sub->add_option("--data", c.data, "token file");
    if (required) opt->required();
    sub->add_option("--format", c.format, "token file format: u32 or text")->check(CLI::IsMember({"u32", "text"}));
}

inline void add_calib_flags(CLI::App* sub, Common& c) {
    sub->add_option("--samples", c.samples, "calibration windows")->check(CLI::PositiveNumber);
    sub->add_option("--tokens", c.tokens, "tokens per calibration window")->check(CLI::PositiveNumber);
}

inline std::vector<ActivationStats> calibration_stats(const Model& m, const Common& c) {
    const TokenStream data = load_data(c.data, c.format, m.config.vocab_size);
    return layer_stats(m, sample_windows(data, c.samples, c.tokens, c.seed));
}

// ---- subcommands ----------------------------------------------------------------

struct AnalyzeArgs {
    double energy = 0.8;
    bool sigma = false;
};

inline int run_analyze(const Common& c, const AnalyzeArgs& a, std::ostream& out) {
    const LoadedModel lm = load_model_arg(c.model, c.config);
    const Model& m = lm.model;
    std::vector<ActivationStats> stats;
    if (!c.data.empty()) stats = calibration_stats(m, c);
    const EnergyMode mode = a.sigma ? EnergyMode::Singular : EnergyMode::SquaredSingular;

    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream text;
    text << "# energy=" << fmt_double(a.energy, 3) << " mass=" << (a.sigma ? "sigma" : "sigma^2") << "\n";
    text << "matrix\tshape\tplain%" << (stats.empty() ? "" : "\tweighted%") << "\n";
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        for (Proj p : kAllProjs) {
            const Matrix w = m.layers[i][p].materialize();
            const std::string name = proj_base_name(i, p);
            const double plain = energy_rank_ratio(w, a.energy, {}, mode);
            nlohmann::json row{{"matrix", name}, {"rows", w.rows()}, {"cols", w.cols()}, {"plain", plain}};
            text << name << "\t" << w.rows() << "x" << w.cols() << "\t" << fmt_double(plain, 2);
            if (!stats.empty()) {
                const double weighted = energy_rank_ratio(w, a.energy, stats[i].for_matrix(p), mode);
                row["weighted"] = weighted;
                text << "\t" << fmt_double(weighted, 2);
            }
            text << "\n";
            rows.push_back(std::move(row));
        }
    }
    out << text.str();
    if (!c.out.empty()) {
        ensure_dir(c.out);
        const nlohmann::json doc{{"energy", a.energy},
                                 {"mass", a.sigma ? "sigma" : "sigma^2"},
                                 {"weighted", !stats.empty()},
                                 {"seed", c.seed},
                                 {"rows", rows}};
        write_text_file(fs::path(c.out) / "analyze.json", doc.dump(2) + "\n");
        write_text_file(fs::path(c.out) / "analyze.txt", text.str());
    }
    return kExitOk;
}

struct MaskArgs {
    double sparsity = 0.5;
    std::vector<std::size_t> layers;
    std::vector<std::string> projs{"q", "k", "v", "o"};
};

inline int run_mask(const Common& c, const MaskArgs& a, std::ostream& out) {
    const LoadedModel lm = load_model_arg(c.model, c.config);
    const Model& m = lm.model;
    std::vector<Proj> projs;
    for (const auto& s : a.projs) projs.push_back(parse_proj(s));
    std::vector<std::size_t> layers = a.layers;
    if (layers.empty()) {
        for (std::size_t i = 0; i < m.layers.size(); ++i) layers.push_back(i);
    }
    for (std::size_t i : layers) {
        if (i >= m.layers.size()) throw ArgumentError("--layer " + std::to_string(i) + " out of range");
    }
    std::vector<ActivationStats> stats;
    if (!c.data.empty()) stats = calibration_stats(m, c);

    ensure_dir(c.out);
    nlohmann::json summary = nlohmann::json::array();
    for (std::size_t i : layers) {
        for (Proj p : projs) {
            const Matrix w = m.layers[i][p].materialize();
            const std::vector<double> x = stats.empty() ? std::vector<double>(w.cols(), 1.0) : stats[i].for_matrix(p);
            const WandaMask mask = wanda_mask(w, x, a.sparsity);
            const std::string name = proj_base_name(i, p);
            write_text_file(fs::path(c.out) / (name + ".pgm"), mask.pgm());
            out << name << "\tkept=" << mask.kept << "/" << mask.keep.size() << "\n";
            summary.push_back({{"matrix", name}, {"rows", mask.rows}, {"cols", mask.cols}, {"kept", mask.kept}});
        }
    }
    const nlohmann::json doc{
        {"sparsity", a.sparsity}, {"activation_weighted", !stats.empty()}, {"seed", c.seed}, {"masks", summary}};
    write_text_file(fs::path(c.out) / "mask.json", doc.dump(2) + "\n");
    return kExitOk;
}

inline int run_calibrate(const Common& c, std::ostream& out) {
    const LoadedModel lm = load_model_arg(c.model, c.config);
    const TokenStream data = load_data(c.data, c.format, lm.model.config.vocab_size);
    const auto stats = layer_stats(lm.model, sample_windows(data, c.samples, c.tokens, c.seed));
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& st : stats) {
        nlohmann::json sites = nlohmann::json::object();
        for (Site s : kAllSites) sites[site_name(s)] = st.at(s);
        layers.push_back({{"index", st.layer}, {"sites", sites}});
    }
    const nlohmann::json doc{{"format_version", 1},
                             {"calibration_hash", token_hash(data)},
                             {"samples", c.samples},
                             {"tokens", c.tokens},
                             {"seed", c.seed},
                             {"layers", layers}};
    ensure_dir(c.out);
    write_text_file(fs::path(c.out) / "stats.json", doc.dump(2) + "\n");
    out << "layers=" << stats.size() << " samples=" << c.samples << " tokens=" << c.tokens << "\n";
    return kExitOk;
}

struct CompressArgs {
    std::optional<double> ratio;
    std::optional<double> layer_keep;
    std::string alloc = "1:3";
    std::string agg = "l2";
    double retain_least = 0.01;
    std::string mha = "awsvd";
    std::string ffn = "prune";
    std::vector<std::string> eval_data;
    std::size_t seqlen = 128;
};

inline int run_compress(const Common& c, const CompressArgs& a, std::ostream& out) {
    if (a.ratio.has_value() == a.layer_keep.has_value()) {
        throw ArgumentError("exactly one of --ratio and --layer-keep is required");
    }
    const LoadedModel lm = load_model_arg(c.model, c.config);
    if (lm.manifest) throw ArgumentError("--model must be a dense model, not a compressed output");
    const Model& m = lm.model;

    CompressionPlan plan = a.ratio ? CompressionPlan::for_model_ratio(m, *a.ratio)
                                   : CompressionPlan::for_layer_keep(m, *a.layer_keep);
    plan.alloc = AllocRatio::parse(a.alloc);
    plan.aggregation = parse_aggregation(a.agg);
    if (!(a.retain_least >= 0.0 && a.retain_least < 1.0)) throw ArgumentError("--retain-least must lie in [0, 1)");
    plan.retain_least = a.retain_least;
    plan.seed = c.seed;
    plan.calibration = {c.samples, c.tokens};
    plan.mha = parse_mha_method(a.mha);
    plan.ffn = parse_ffn_method(a.ffn);

    const TokenStream calib = load_data(c.data, c.format, m.config.vocab_size);
    std::vector<TokenStream> evals;
    for (const auto& path : a.eval_data) evals.push_back(load_data(path, c.format, m.config.vocab_size));

    CompressionResult res = compress_model(m, plan, calib);
    const fs::path dir(c.out);
    ensure_dir(dir);
    write_compressed(dir / "model.safetensors", res.model, res.manifest);
    write_config(dir / "config.json", m.config);

    if (!evals.empty()) {
        // score what was written, so `eval` on the directory reproduces these numbers
        const Model written = load_compressed_dir(dir);
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < evals.size(); ++i) {
            res.report.eval_ppl[a.eval_data[i]] = perplexity(written, evals[i], a.seqlen);
        }
        res.report.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    write_text_file(dir / "report.json", report_json(res.report).dump(2) + "\n");

    out << "ratio_s=" << fmt_double(plan.ratio_s) << " ratio_l=" << fmt_double(plan.ratio_l)
        << " layer_keep=" << fmt_double(plan.layer_keep) << "\n";
    out << "params_before=" << res.report.params_before << " params_after=" << res.report.params_after << "\n";
    out << "transformer_params=" << res.report.transformer_after
        << " target=" << fmt_double(res.report.transformer_target, 1)
        << " deviation=" << fmt_double(100.0 * res.report.realized_deviation(), 3) << "%\n";
    for (const auto& [file, ppl] : res.report.eval_ppl) out << "ppl[" << file << "]=" << fmt_double(ppl) << "\n";
    return kExitOk;
}

inline int run_eval(const Common& c, std::size_t seqlen, std::ostream& out) {
    const LoadedModel lm = load_model_arg(c.model, c.config);
    const TokenStream data = load_data(c.data, c.format, lm.model.config.vocab_size);
    const double ppl = perplexity(lm.model, data, seqlen);
    out << "ppl=" << fmt_double(ppl) << "\n";
    if (!c.out.empty()) {
        ensure_dir(c.out);
        const nlohmann::json doc{{"data", c.data}, {"seq_len", seqlen}, {"ppl", ppl}, {"tokens", data.size()}};
        write_text_file(fs::path(c.out) / "eval.json", doc.dump(2) + "\n");
    }
    return kExitOk;
}

inline int run_stats(const Common& c, std::size_t seqlen, std::ostream& out) {
    const LoadedModel lm = load_model_arg(c.model, c.config);
    const ParamMacs pm = count_params_macs(lm.model, seqlen);
    out << "params=" << pm.params << "\n";
    out << "transformer_params=" << lm.model.transformer_params() << "\n";
    out << "macs=" << pm.macs << " seq_len=" << seqlen << "\n";
    if (!c.out.empty()) {
        ensure_dir(c.out);
        const nlohmann::json doc{{"params", pm.params},
                                 {"transformer_params", lm.model.transformer_params()},
                                 {"macs", pm.macs},
                                 {"seq_len", seqlen}};
        write_text_file(fs::path(c.out) / "stats.json", doc.dump(2) + "\n");
    }
    return kExitOk;
}

// ---- dispatch -------------------------------------------------------------------

/// `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Low-rank and pruning compression for LLaMA-style models", "lorap"};
    app.require_subcommand(1);

    Common common;
    AnalyzeArgs analyze_args;
    MaskArgs mask_args;
    CompressArgs compress_args;
    std::size_t eval_seqlen = 128;
    std::size_t stats_seqlen = 128;

    auto* analyze = app.add_subcommand("analyze", "energy rank ratio of every matrix");
    add_model_flags(analyze, common);
    add_data_flags(analyze, common, false);
    add_calib_flags(analyze, common);
    analyze->add_option("--energy", analyze_args.energy, "energy share to retain")->check(CLI::Range(0.0, 1.0));
    analyze->add_flag("--sigma", analyze_args.sigma, "count singular values instead of their squares");

    auto* mask = app.add_subcommand("mask", "export importance masks as graymap images");
    add_model_flags(mask, common);
    mask->get_option("--out")->required();
    add_data_flags(mask, common, false);
    add_calib_flags(mask, common);
    mask->add_option("--sparsity", mask_args.sparsity, "fraction of weights pruned")->check(CLI::Range(0.0, 1.0));
    mask->add_option("--layer", mask_args.layers, "layer indices (default all)");
    mask->add_option("--proj", mask_args.projs, "projections: q k v o gate up down");

    auto* calibrate = app.add_subcommand("calibrate", "write per-layer activation norms");
    add_model_flags(calibrate, common);
    calibrate->get_option("--out")->required();
    add_data_flags(calibrate, common, true);
    add_calib_flags(calibrate, common);

    auto* compress = app.add_subcommand("compress", "compress a dense model");
    add_model_flags(compress, common);
    compress->get_option("--out")->required();
    add_data_flags(compress, common, true);
    add_calib_flags(compress, common);
    auto* ratio = compress->add_option("--ratio", compress_args.ratio, "whole-model compression ratio");
    auto* keep = compress->add_option("--layer-keep", compress_args.layer_keep, "retained fraction of every layer");
    ratio->excludes(keep);
    compress->add_option("--alloc", compress_args.alloc, "(q,k):(v,o) parameter ratio");
    compress->add_option("--agg", compress_args.agg, "group score aggregation")->check(CLI::IsMember({"l1", "l2", "linf"}));
    compress->add_option("--retain-least", compress_args.retain_least, "share of lowest-scoring groups kept");
    compress->add_option("--mha", compress_args.mha, "attention method")
        ->check(CLI::IsMember({"awsvd", "svd", "heads", "dense"}));
    compress->add_option("--ffn", compress_args.ffn, "feed-forward method")
        ->check(CLI::IsMember({"prune", "svd", "awsvd", "dense"}));
    compress->add_option("--eval-data", compress_args.eval_data, "token files scored after compression");
    compress->add_option("--seqlen", compress_args.seqlen, "evaluation window")->check(CLI::PositiveNumber);

    auto* eval = app.add_subcommand("eval", "perplexity over non-overlapping windows");
    add_model_flags(eval, common);
    add_data_flags(eval, common, true);
    eval->add_option("--seqlen", eval_seqlen, "window length")->check(CLI::PositiveNumber);

    auto* stats = app.add_subcommand("stats", "parameter and multiply-accumulate counts");
    add_model_flags(stats, common);
    stats->add_option("--seqlen", stats_seqlen, "sequence length for MACs")->check(CLI::PositiveNumber);

    std::ranges::reverse(args);
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        out << target->help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        const CLI::App* target = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << "error: " << e.what() << "\n" << target->help();
        return kExitUsage;
    }

    try {
        if (analyze->parsed()) return run_analyze(common, analyze_args, out);
        if (mask->parsed()) return run_mask(common, mask_args, out);
        if (calibrate->parsed()) return run_calibrate(common, out);
        if (compress->parsed()) return run_compress(common, compress_args, out);
        if (eval->parsed()) return run_eval(common, eval_seqlen, out);
        if (stats->parsed()) return run_stats(common, stats_seqlen, out);
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InfeasibleError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    err << app.help();
    return kExitUsage;
}

inline int cli_dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
    return run(std::move(args), std::cout, std::cerr);
}

} // namespace lorap::cli
