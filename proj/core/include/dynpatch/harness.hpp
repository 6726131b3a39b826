#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dynpatch/attack.hpp"
#include "dynpatch/detector.hpp"
#include "dynpatch/scenesim.hpp"

namespace dynpatch {

struct EvalConfig {
    double decode_conf = 0.25;
    double decode_nms = 0.5;
    double success_conf = 0.5;  // strict >
    double success_iou = 0.05;  // strict >
};

enum class AttackMethod { None, Static, Dynamic };
const char* method_name(AttackMethod m);

struct DecisionOutcome {
    bool stop = false;  // STOP when a qualifying stop detection exists
    std::optional<Detection> trigger;
};

// STOP iff a stop-class detection with confidence > success_conf overlaps
// the expected sign region (IoU > success_iou). Mirrors the position
// cross-check an attacked planner would run against its proximity data.
DecisionOutcome decision_rule(const std::vector<Detection>& detections,
                              const BBox& expected_sign_region, const EvalConfig& cfg);

struct FrameOutcome {
    bool evaluated = false;
    std::string skip_reason;
    bool success = false;
    bool decision_stop = false;
    double stop_confidence = 0.0;  // best qualifying stop confidence, 0 if none
};

// Applies the method's patch (ground-truth photometric compositing), runs the
// detector at the eval decode thresholds and applies the success criterion.
FrameOutcome attack_success(const FrameRecord& frame, AttackMethod method, const PatchSet* patchset,
                            const DetectorParams& detector, const SceneConfig& scene,
                            const EvalConfig& cfg);

struct FrameEvalRecord {
    std::string scenario;
    std::string split;
    int frame_index = 0;
    int sign_class = -1;
    int cluster_id = -1;
    std::string method;
    bool evaluated = false;
    std::string skip_reason;
    bool success = false;
    bool decision_stop = false;
    double stop_confidence = 0.0;
};

struct ReportCell {
    int evaluated = 0;
    int skipped = 0;
    int successes = 0;
    int decision_stops = 0;
    double stop_confidence_sum = 0.0;

    bool present() const { return evaluated > 0; }
    double rate() const { return evaluated > 0 ? static_cast<double>(successes) / evaluated : 0.0; }
    double flip_rate() const { return evaluated > 0 ? static_cast<double>(decision_stops) / evaluated : 0.0; }
    double mean_stop_confidence() const { return evaluated > 0 ? stop_confidence_sum / evaluated : 0.0; }
};

struct AttackReport {
    std::vector<std::string> scenarios;
    std::vector<std::string> splits;
    std::vector<std::string> methods;
    // cells[scenario][split][method]
    std::map<std::string, std::map<std::string, std::map<std::string, ReportCell>>> cells;
    std::vector<FrameEvalRecord> frames;
};

struct ScenarioEvalInput {
    std::string name;  // sign class name of the attacked scenario
    const DatasetManifest* similar = nullptr;
    const DatasetManifest* unseen = nullptr;  // optional
    const PatchSet* patchset = nullptr;
    const SceneConfig* scene = nullptr;
};

AttackReport evaluate_success_rates(const std::vector<ScenarioEvalInput>& scenarios,
                                    const DetectorParams& detector, const EvalConfig& cfg,
                                    const std::vector<AttackMethod>& methods);

struct ComparisonDelta {
    std::string scenario, split;
    double dynamic_rate = 0.0, static_rate = 0.0, delta = 0.0;
    int frames = 0;
};

struct ComparisonSummary {
    std::vector<ComparisonDelta> deltas;
    double aggregate_dynamic = 0.0;
    double aggregate_static = 0.0;
    double aggregate_margin = 0.0;  // frame-weighted mean of deltas
};

ComparisonSummary compare_dynamic_static(const AttackReport& report);

void save_report_json(const AttackReport& report, const std::string& path);
void save_frame_log(const AttackReport& report, const std::string& path);
// Table 1-shaped text rendering: sign rows, {split x method} columns,
// total-frames row.
std::string render_report_table(const AttackReport& report);

}  // namespace dynpatch
