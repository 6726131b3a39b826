#pragma once

#include <optional>
#include <string>

#include "dynpatch/attack.hpp"
#include "dynpatch/config.hpp"
#include "dynpatch/detector.hpp"
#include "dynpatch/harness.hpp"
#include "dynpatch/scenesim.hpp"
#include "dynpatch/sitnet.hpp"

namespace dynpatch {

enum class Stage {
    Simulate,
    TrainDetector,
    TrainSitnet,
    Cluster,
    Optimize,
    Evaluate,
    Heatmap,
    All,
};

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);  // throws ValidationError

// Shipped defaults; every module default appears explicitly.
Config default_config();

// Typed views over the config file.
SceneConfig scene_config_from(const Config& cfg);
DetectorConfig detector_config_from(const Config& cfg);
SitNetConfig sitnet_config_from(const Config& cfg);
OptimizerConfig optimizer_config_from(const Config& cfg);
EvalConfig eval_config_from(const Config& cfg);

struct PipelineOptions {
    std::string out_dir = "out";
    std::optional<uint64_t> seed_override;  // replaces [pipeline] seed
    int threads = 0;                        // 0: hardware default
};

// Executes one stage (or the whole chain for Stage::All, reusing cached
// stage outputs whose recorded input hashes still match). Artifacts land
// under out_dir; a RunManifest is written per executed stage.
void run_pipeline(const Config& cfg, const PipelineOptions& options, Stage stage);

}  // namespace dynpatch
