// Command-line front end: train / eval / ablate / export-arch / gen-ood.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "splitens/harness.hpp"
#include "splitens/kernels.hpp"

using namespace splitens;

int main(int argc, char** argv) {
    CLI::App app{"splitens: OOD-aware split-ensemble training and evaluation"};
    app.require_subcommand(1);

    std::string kernel_backend = "auto";
    app.add_option("--kernels", kernel_backend,
                   "compute backend: auto|scalar|avx2|neon (default auto)");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a model per config");
    std::string train_config;
    std::vector<std::string> overrides;
    train_cmd->add_option("--config", train_config, "experiment config (JSON)")->required();
    train_cmd->add_option("--set", overrides, "override config keys, e.g. train.epochs=5");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a finished run directory");
    std::string run_dir;
    eval_cmd->add_option("--run", run_dir, "run directory written by train")->required();

    // ---- ablate ----
    auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
    std::string ablate_config, grid_path;
    std::vector<std::string> ablate_overrides;
    ablate_cmd->add_option("--config", ablate_config, "base experiment config")->required();
    ablate_cmd->add_option("--grid", grid_path, "grid spec (JSON)")->required();
    ablate_cmd->add_option("--set", ablate_overrides, "override base config keys");

    // ---- export-arch ----
    auto* export_cmd = app.add_subcommand("export-arch", "write architecture JSON + DOT");
    std::string ckpt_path, out_prefix = "arch";
    export_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    export_cmd->add_option("--out", out_prefix, "output prefix (.json/.dot appended)");

    // ---- gen-ood ----
    auto* gen_cmd = app.add_subcommand("gen-ood", "generate a synthetic noise OOD dataset");
    std::string noise_kind = "gaussian", out_path;
    int count = 1000, height = 32, width = 32, channels = 3;
    uint64_t seed = 0;
    gen_cmd->add_option("--kind", noise_kind, "gaussian|uniform");
    gen_cmd->add_option("--count", count, "sample count");
    gen_cmd->add_option("--height", height, "image height");
    gen_cmd->add_option("--width", width, "image width");
    gen_cmd->add_option("--channels", channels, "image channels");
    gen_cmd->add_option("--seed", seed, "generator seed");
    gen_cmd->add_option("--out", out_path, "output dataset path")->required();

    CLI11_PARSE(app, argc, argv);

    if (!kern::set_backend(kernel_backend)) {
        std::cerr << "kernel backend '" << kernel_backend << "' is not available here\n";
        return 2;
    }

    try {
        if (*train_cmd) {
            std::ifstream f(train_config);
            if (!f.good()) throw std::runtime_error("cannot open config " + train_config);
            json doc;
            f >> doc;
            for (const auto& o : overrides) apply_override(doc, o);
            ExperimentConfig cfg = ExperimentConfig::from_json(doc);
            TrainOutcome out = cmd_train(cfg);
            std::cout << "run dir:    " << out.run_dir << "\n"
                      << "splits:     " << out.history.splits.size() << "\n"
                      << "prunes:     " << out.history.prunes.size() << "\n"
                      << "flops:      " << out.final_flops << " (budget " << out.flops_budget
                      << ")\n"
                      << "test acc:   " << 100.0 * out.test_accuracy << "%\n";
        } else if (*eval_cmd) {
            json report = cmd_eval(run_dir);
            std::cout << report.dump(2) << "\n";
        } else if (*ablate_cmd) {
            std::ifstream f(ablate_config);
            if (!f.good()) throw std::runtime_error("cannot open config " + ablate_config);
            json doc;
            f >> doc;
            for (const auto& o : ablate_overrides) apply_override(doc, o);
            std::ifstream g(grid_path);
            if (!g.good()) throw std::runtime_error("cannot open grid " + grid_path);
            json grid;
            g >> grid;
            json result = cmd_ablate(ExperimentConfig::from_json(doc), grid);
            std::cout << result.dump(2) << "\n";
        } else if (*export_cmd) {
            cmd_export_arch(ckpt_path, out_prefix);
            std::cout << "wrote " << out_prefix << ".json and " << out_prefix << ".dot\n";
        } else if (*gen_cmd) {
            cmd_gen_ood(noise_kind, Shape{channels, height, width}, count, seed, out_path);
            std::cout << "wrote " << out_path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
