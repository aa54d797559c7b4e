// Writes a toy model with calibration and evaluation token files:
//   model.safetensors, config.json, calib.bin, eval.bin
// "random" is a small-init model on uniform random tokens; "planted" has
// low-rank attention with outlier features and streams sampled from itself.

#include <lorap/fixture.hpp>
#include <lorap/model.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

int main(int argc, char** argv) {
    using namespace lorap;
    CLI::App app{"toy fixture generator", "make_fixture"};
    std::string kind = "planted";
    std::string out;
    std::uint64_t seed = 1;
    std::size_t layers = 2;
    std::size_t calib_seqs = 64;
    std::size_t eval_seqs = 16;
    std::size_t seq_len = 64;
    app.add_option("--kind", kind, "random or planted")->check(CLI::IsMember({"random", "planted"}));
    app.add_option("--out", out, "output directory")->required();
    app.add_option("--seed", seed, "weight and data seed");
    app.add_option("--layers", layers, "transformer layers")->check(CLI::PositiveNumber);
    app.add_option("--calib-seqs", calib_seqs, "calibration sequences")->check(CLI::PositiveNumber);
    app.add_option("--eval-seqs", eval_seqs, "evaluation sequences")->check(CLI::PositiveNumber);
    app.add_option("--seq-len", seq_len, "tokens per sequence")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);

    try {
        const ModelConfig cfg = fixture::toy_config(layers);
        const std::filesystem::path dir(out);
        std::filesystem::create_directories(dir);
        Model m;
        TokenStream calib;
        TokenStream eval;
        if (kind == "random") {
            m = fixture::random_model(cfg, seed);
            fixture::Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
            calib = rng.tokens(calib_seqs * seq_len, cfg.vocab_size);
            eval = rng.tokens(eval_seqs * seq_len, cfg.vocab_size);
        } else {
            m = fixture::planted_model(cfg, seed);
            calib = fixture::sample_stream(m, calib_seqs, seq_len, seed + 1);
            eval = fixture::sample_stream(m, eval_seqs, seq_len, seed + 2);
        }
        write_model(dir / "model.safetensors", m);
        write_config(dir / "config.json", cfg);
        write_tokens(dir / "calib.bin", calib);
        write_tokens(dir / "eval.bin", eval);
        std::cout << "wrote " << kind << " fixture to " << dir << " (" << m.param_count() << " params)\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
