// SPDX-License-Identifier: Apache-2.0
//
// uqloc: synthetic CSI generation, MDN training with MC-dropout / deep
// ensembles, and uncertainty evaluation.

#include "uqloc/experiment.hpp"
#include "uqloc/keyvalue.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

uqloc::ExperimentConfig load_config(const std::string &path, const std::optional<std::uint64_t> &seed, int parallel)
{
    auto cfg = uqloc::load_experiment(path);
    if (seed)
        cfg.seed = *seed;
    if (parallel > 0)
        cfg.parallel = parallel;
    return cfg;
}

void print_table(const uqloc::EvalReport &report)
{
    std::printf("%-6s %-12s %-12s %-12s\n", "S", "RMSE [m]", "AUCO [m]", "switch rate");
    for (const auto &ev : report.per_s) {
        const auto *all = ev.find("all");
        std::printf("%-6d %-12.4f %-12.4f %-12.4f\n", ev.s, all->rmse, all->curve.auco, ev.switch_rate);
    }
}

} // namespace

int main(int argc, char **argv)
{
    uqloc::net::tune_allocator();
    CLI::App app{"Uncertainty-aware massive-MIMO localization toolkit"};
    app.require_subcommand(1);

    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    int parallel = 0;
    auto add_common = [&](CLI::App *cmd) {
        cmd->add_option("--config", config, "Scene or experiment file (key = value)")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", out, "Output directory");
        cmd->add_option("--seed", seed, "Override the master seed");
        cmd->add_option("--parallel", parallel, "Worker threads for ensemble training and inference")
            ->check(CLI::PositiveNumber);
    };

    auto *generate = app.add_subcommand("generate", "Generate a CSI dataset from a scene");
    auto *train = app.add_subcommand("train", "Train the MC-dropout model or the deep ensemble");
    auto *evaluate = app.add_subcommand("evaluate", "Evaluate trained models over the S sweep");
    auto *oos = app.add_subcommand("oos", "Out-of-set study: baseline vs held-out region, both methods");
    for (auto *cmd : {generate, train, evaluate, oos})
        add_common(cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) {
            const auto s = uqloc::cmd_generate(config, out);
            std::printf("samples: %zu (LOS %zu, NLOS %zu), dropped shadowed users: %zu\nwrote %s\n", s.samples, s.los,
                        s.nlos, s.dropped, s.dataset_file.c_str());
        } else if (train->parsed()) {
            const auto cfg = load_config(config, seed, parallel);
            const auto s = uqloc::cmd_train(cfg, out);
            std::printf("trained %d %s model(s)\n", s.models, uqloc::to_string(s.method).c_str());
            for (std::size_t i = 0; i < s.epochs_run.size(); ++i)
                std::printf("  model %zu: %d epochs, best epoch %d\n", i, s.epochs_run[i], s.best_epochs[i]);
        } else if (evaluate->parsed()) {
            const auto cfg = load_config(config, seed, parallel);
            print_table(uqloc::cmd_evaluate(cfg, out));
        } else if (oos->parsed()) {
            const auto cfg = load_config(config, seed, parallel);
            const auto r = uqloc::cmd_oos(cfg, out);
            std::fputs(uqloc::oos_to_csv(r.rows).c_str(), stdout);
        }
    } catch (const uqloc::ConfigError &e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
