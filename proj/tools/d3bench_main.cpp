#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "d3/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDiverged = 4;

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("-o,--out-dir", args.output_dir, "override the config output directory");
}

d3::ExperimentConfig load(const CommonArgs& args) {
    d3::ExperimentConfig cfg = d3::load_config_file(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.output_dir) cfg.output_dir = *args.output_dir;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"backdoor attack/defense workbench: poison, train, defend, evaluate"};
    app.require_subcommand(1);

    CommonArgs gen_args, poison_args, train_args, defend_args, eval_args, traj_args;
    std::string defend_ckpt;
    std::vector<std::string> eval_ckpts;
    std::string traj_a, traj_b;

    CLI::App* gen = app.add_subcommand("gen-data", "emit the synthetic dataset as IDX files");
    add_common(gen, gen_args);

    CLI::App* poison = app.add_subcommand("poison", "write the poisoned train/eval sets and mask");
    add_common(poison, poison_args);

    CLI::App* train = app.add_subcommand("train", "train a backdoored model");
    add_common(train, train_args);

    CLI::App* defend = app.add_subcommand("defend", "run the configured defense on a checkpoint");
    add_common(defend, defend_args);
    defend->add_option("checkpoint", defend_ckpt, "input checkpoint (D3CP)")->required();

    CLI::App* eval = app.add_subcommand("eval", "ACC/ASR/DER table for one or more checkpoints");
    add_common(eval, eval_args);
    eval->add_option("checkpoints", eval_ckpts, "checkpoints; the first is the undefended reference")
        ->required();

    CLI::App* traj = app.add_subcommand("trajectory", "losses and metrics along the line between "
                                                      "two checkpoints");
    add_common(traj, traj_args);
    traj->add_option("ckpt_a", traj_a, "t=0 checkpoint")->required();
    traj->add_option("ckpt_b", traj_b, "t=1 checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            d3::cmd_gen_data(load(gen_args));
        } else if (poison->parsed()) {
            d3::cmd_poison(load(poison_args));
        } else if (train->parsed()) {
            d3::cmd_train(load(train_args));
        } else if (defend->parsed()) {
            d3::cmd_defend(load(defend_args), defend_ckpt);
        } else if (eval->parsed()) {
            std::vector<std::filesystem::path> paths(eval_ckpts.begin(), eval_ckpts.end());
            d3::cmd_eval(load(eval_args), paths);
        } else if (traj->parsed()) {
            d3::cmd_trajectory(load(traj_args), traj_a, traj_b);
        }
    } catch (const d3::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const d3::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const d3::Error& e) {
        // Validation, contract, dimension and index errors all signal a bad
        // config or bad inputs.
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitOk;
}
