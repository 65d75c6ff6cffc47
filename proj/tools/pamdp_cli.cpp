#include "pamdp/harness.hpp"
#include "pamdp/runtime.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Common {
    std::string config;
    std::vector<std::uint64_t> seeds;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seeds, "seed(s) to run instead of the config's list");
    cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
    cmd->add_flag("--quiet", c.quiet, "no per-epoch progress on stderr");
}

pamdp::ExperimentConfig resolve(const Common& c) {
    auto cfg = pamdp::load_config(c.config);
    if (!c.seeds.empty()) cfg.seeds = c.seeds;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

void print_summary(const pamdp::ExperimentResult& r) {
    const auto& a = r.summary.at("aggregate");
    std::cout << r.directory.string() << "\n"
              << "  final return " << a.at("final_return_mean").get<double>() << " +- "
              << a.at("final_return_std").get<double>() << ", last-10 mean "
              << a.at("final10_return_mean").get<double>() << ", best epoch " << a.at("best_epoch").get<int>() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    pamdp::tune_allocator();
    CLI::App app{"Parameterized-action RL experiments: PATRPO, PASVG(0), PADDPG"};
    app.require_subcommand(1);

    Common run_opts, kl_opts, delta_opts, eval_opts;
    auto* run = app.add_subcommand("run", "train every seed of a config");
    add_common(run, run_opts);

    auto* kl = app.add_subcommand("compare-kl", "PATRPO with each KL estimator");
    add_common(kl, kl_opts);

    std::vector<double> deltas{0.005, 0.01, 0.05};
    auto* delta = app.add_subcommand("compare-delta", "PATRPO with several trust-region sizes");
    add_common(delta, delta_opts);
    delta->add_option("--deltas", deltas, "trust-region sizes")->delimiter(',');

    std::string checkpoint;
    std::size_t episodes = 20;
    auto* eval = app.add_subcommand("eval", "greedy rollouts of a checkpoint; prints the mean return");
    add_common(eval, eval_opts);
    eval->add_option("--checkpoint", checkpoint, "parameter file written by run")->required()->check(CLI::ExistingFile);
    eval->add_option("--episodes", episodes, "number of episodes")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const auto cfg = resolve(run_opts);
            print_summary(pamdp::run_experiment(cfg, {.quiet = run_opts.quiet}));
        } else if (*kl) {
            const auto cfg = resolve(kl_opts);
            const auto c = pamdp::compare_kl_estimators(cfg, {.quiet = kl_opts.quiet});
            for (const auto& r : c.runs) print_summary(r);
            std::cout << c.directory.string() << "/combined.csv\n";
        } else if (*delta) {
            const auto cfg = resolve(delta_opts);
            const auto c = pamdp::compare_step_sizes(cfg, deltas, {.quiet = delta_opts.quiet});
            for (const auto& r : c.runs) print_summary(r);
            std::cout << c.directory.string() << "/combined.csv\n";
        } else if (*eval) {
            const auto cfg = resolve(eval_opts);
            const auto r = pamdp::evaluate_checkpoint(cfg, checkpoint, episodes,
                                                      eval_opts.seeds.empty() ? 0 : eval_opts.seeds.front());
            std::cout << "mean return " << r.mean << " over " << r.returns.size() << " episodes\n";
        }
    } catch (const pamdp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
