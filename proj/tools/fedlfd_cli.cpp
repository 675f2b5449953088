// fedlfd: command-line front end for the federated LfD simulator.
//
//   fedlfd run --config <path> [--seed N] [--out <dir>] [--rounds N] [--workers N]
//   fedlfd validate --config <path>
//   fedlfd inspect-checkpoint <path>
//   fedlfd preset <name>            print a built-in scenario as a config file
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 numeric failure.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fedlfd/fedlfd.hpp"

namespace {

int run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out,
        std::optional<int> rounds, std::optional<int> workers) {
    auto cfg = fedlfd::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (rounds) cfg.rounds = *rounds;
    if (workers) cfg.workers = *workers;
    fedlfd::validate(cfg);
    auto world = fedlfd::build_scenario(cfg);
    const auto reports = fedlfd::run_experiment(world, out);
    const auto& last = reports.back().eval;
    std::cout << "ran " << reports.size() << " round(s) of '" << cfg.name << "' (seed " << cfg.seed << ")\n";
    for (const auto& [model, loss] : last.global_loss)
        std::cout << "  model " << model << " (" << world.spec(model).name << "): global loss " << loss << "\n";
    std::cout << "  mean per-teacher loss " << last.mean_teacher_loss() << "\n";
    std::cout << "metrics and checkpoints written to " << out << "\n";
    return 0;
}

int inspect(const std::string& path) {
    const auto ck = fedlfd::read_checkpoint(path);
    std::cout << "name:       " << ck.name << "\n"
              << "version:    " << fedlfd::kCheckpointVersion << "\n"
              << "parameters: " << ck.params.size() << "\n"
              << "l2 norm:    " << fedlfd::l2_norm(ck.params) << "\n"
              << "layers:\n";
    for (const auto& l : ck.params.shape()) std::cout << "  " << l.name << "  " << l.rows << " x " << l.cols << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated multi-agent learning-from-demonstration simulator"};
    app.require_subcommand(1);

    std::string config_path, out = "out", ckpt_path, preset_name;
    std::optional<std::uint64_t> seed;
    std::optional<int> rounds, workers;

    auto* run_cmd = app.add_subcommand("run", "Run a scenario and write metrics/checkpoints");
    run_cmd->add_option("--config", config_path, "Scenario config (JSON)")->required();
    run_cmd->add_option("--seed", seed, "Override the master seed");
    run_cmd->add_option("--out", out, "Output directory")->capture_default_str();
    run_cmd->add_option("--rounds", rounds, "Override the number of rounds");
    run_cmd->add_option("--workers", workers, "Worker threads for node jobs");

    auto* validate_cmd = app.add_subcommand("validate", "Validate a scenario config");
    validate_cmd->add_option("--config", config_path, "Scenario config (JSON)")->required();

    auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "Describe an FLFD checkpoint file");
    inspect_cmd->add_option("path", ckpt_path, "Checkpoint path")->required();

    auto* preset_cmd = app.add_subcommand("preset", "Print a built-in scenario config");
    preset_cmd->add_option("name", preset_name, "Preset name (crm)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run_cmd) return run(config_path, seed, out, rounds, workers);
        if (*validate_cmd) {
            const auto cfg = fedlfd::load_config(config_path);
            std::cout << "config '" << cfg.name << "' is valid (" << cfg.models.size() << " models, "
                      << cfg.platforms.size() << " platforms, " << cfg.teachers.size() << " teachers)\n";
            return 0;
        }
        if (*inspect_cmd) return inspect(ckpt_path);
        if (*preset_cmd) {
            std::cout << fedlfd::config_to_json(fedlfd::preset(preset_name)).dump(2) << "\n";
            return 0;
        }
    } catch (const fedlfd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fedlfd::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
