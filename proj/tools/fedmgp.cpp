// Command-line front end: run / sweep / report / partition / verify.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmgp/harness.hpp"

namespace {

fedmgp::ExperimentConfig load_config(const std::string& config_path,
                                     const std::vector<std::string>& overrides,
                                     const std::string& seed_list, const std::string& ablation,
                                     const std::string& out_dir, const std::string& data_dir) {
    fedmgp::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = fedmgp::parse_config_file(config_path);
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw fedmgp::ConfigError("--set expects key=value, got: " + kv);
        }
        fedmgp::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!seed_list.empty()) fedmgp::set_config_value(cfg, "seeds", seed_list);
    if (!ablation.empty()) fedmgp::set_config_value(cfg, "ablation", ablation);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedMGP desk-scale simulator: multi-granularity prompt federated continual learning"};
    app.require_subcommand(1);

    std::string config_path, seed_list, ablation, out_dir, data_dir, artifact_dir, axis;
    std::vector<std::string> overrides;
    std::vector<double> values;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file (key = value with [sections])");
        cmd->add_option("--seed", seed_list, "comma-separated seed list override");
        cmd->add_option("--ablation", ablation, "full | w/oGP | w/oLP | w/oSPF");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--data-dir", data_dir, "dataset directory (or DATA_DIR env)");
        cmd->add_option("--set", overrides, "extra key=value overrides")->take_all();
    };

    CLI::App* run_cmd = app.add_subcommand("run", "run an experiment and persist its artifact");
    add_common(run_cmd);

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "run a sensitivity sweep over one axis");
    add_common(sweep_cmd);
    sweep_cmd->add_option("--axis", axis, "M | L | N | prefix_length | lambda1 | lambda2")
        ->required();
    sweep_cmd->add_option("--values", values, "axis values")->required()->take_all();

    CLI::App* report_cmd = app.add_subcommand("report", "render tables from a persisted artifact");
    report_cmd->add_option("--artifact", artifact_dir, "artifact directory")->required();

    CLI::App* partition_cmd =
        app.add_subcommand("partition", "emit scenario manifests without training");
    add_common(partition_cmd);

    app.add_subcommand("verify", "run the independent-oracle verification suite");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            const fedmgp::ExperimentConfig cfg =
                load_config(config_path, overrides, seed_list, ablation, out_dir, data_dir);
            const fedmgp::RunArtifact artifact = fedmgp::run_experiment(cfg);
            std::cout << fedmgp::render_report(artifact);
            std::cout << "artifact written to " << artifact.root_dir << "\n";
            for (const fedmgp::SeedResult& res : artifact.seeds) {
                if (!res.complete) {
                    std::cerr << "seed " << res.seed << " incomplete: " << res.error << "\n";
                    return 2;
                }
            }
            return 0;
        }
        if (sweep_cmd->parsed()) {
            const fedmgp::ExperimentConfig cfg =
                load_config(config_path, overrides, seed_list, ablation, out_dir, data_dir);
            const fedmgp::SweepResult grid = fedmgp::sweep(cfg, axis, values);
            std::cout << "axis value kr_t kr_s avg_global avg_personalized\n";
            for (const fedmgp::SweepRow& row : grid.rows) {
                std::printf("%s %g %.6f %.6f %.6f %.6f\n", grid.axis.c_str(), row.value, row.kr_t,
                            row.kr_s, row.avg_global_accuracy, row.avg_personalized_accuracy);
            }
            return 0;
        }
        if (report_cmd->parsed()) {
            return fedmgp::report_from_directory(artifact_dir, std::cout) ? 0 : 2;
        }
        if (partition_cmd->parsed()) {
            const fedmgp::ExperimentConfig cfg =
                load_config(config_path, overrides, seed_list, ablation, out_dir, data_dir);
            fedmgp::write_partition_manifests(cfg);
            std::cout << "manifests written to " << cfg.out_dir << "\n";
            return 0;
        }
        // verify
        return fedmgp::run_verification(std::cout) ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
