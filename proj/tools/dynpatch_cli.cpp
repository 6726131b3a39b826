// Command-line front end for the dynamic-patch laboratory. One subcommand per
// pipeline stage plus `init-config` to emit the shipped defaults.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "dynpatch/common.hpp"
#include "dynpatch/config.hpp"
#include "dynpatch/pipeline.hpp"

namespace {

int run_stage_command(const std::string& stage, const std::string& config_path,
                      const std::string& out_dir, int64_t seed, bool seed_set, int threads) {
    using namespace dynpatch;
    Config cfg = config_path.empty() ? default_config() : Config::load(config_path);
    PipelineOptions options;
    options.out_dir = out_dir;
    options.threads = threads;
    if (seed_set) options.seed_override = static_cast<uint64_t>(seed);
    run_pipeline(cfg, options, stage_from_name(stage));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynpatch: dynamic adversarial screen-patch laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    int64_t seed = 0;
    int threads = 0;
    app.add_option("--config", config_path, "configuration file (defaults are built in)");
    app.add_option("--out", out_dir, "output directory")->capture_default_str();
    CLI::Option* seed_opt = app.add_option("--seed", seed, "master seed override");
    app.add_option("--threads", threads, "worker threads (0 = hardware)");

    const char* stages[] = {"simulate", "train-detector", "train-sitnet", "cluster",
                            "optimize", "evaluate",       "heatmap",      "all"};
    const char* descriptions[] = {
        "generate synthetic datasets and screen pairs",
        "train the grid detector on the synthetic dataset",
        "train the screen-transform network on display/capture pairs",
        "fit per-scenario k-means pose clusters",
        "optimize per-cluster patches and the static baseline",
        "measure attack success rates and decision flips",
        "emit detector attention heatmaps",
        "run every stage in order, reusing cached artifacts",
    };
    for (size_t i = 0; i < std::size(stages); ++i) app.add_subcommand(stages[i], descriptions[i]);

    CLI::App* init_cfg = app.add_subcommand("init-config", "write the default configuration file");
    std::string init_path = "dynpatch.ini";
    init_cfg->add_option("path", init_path, "destination")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (init_cfg->parsed()) {
            dynpatch::default_config().save(init_path);
            std::cout << "wrote " << init_path << "\n";
            return 0;
        }
        for (const char* s : stages) {
            if (app.get_subcommand(s)->parsed())
                return run_stage_command(s, config_path, out_dir, seed, seed_opt->count() > 0, threads);
        }
        std::cerr << "no subcommand selected\n";
        return static_cast<int>(dynpatch::ErrorCategory::Other);
    } catch (const dynpatch::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return static_cast<int>(dynpatch::ErrorCategory::Dependency);
    } catch (const dynpatch::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return static_cast<int>(dynpatch::ErrorCategory::Validation);
    } catch (const dynpatch::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return static_cast<int>(dynpatch::ErrorCategory::Io);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(dynpatch::ErrorCategory::Other);
    }
}
