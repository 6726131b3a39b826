#include "dynpatch/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dynpatch/common.hpp"

namespace dynpatch {

using nlohmann::ordered_json;

const char* method_name(AttackMethod m) {
    switch (m) {
        case AttackMethod::None: return "none";
        case AttackMethod::Static: return "static";
        case AttackMethod::Dynamic: return "dynamic";
    }
    return "?";
}

namespace {

// The shared success predicate: stop-class detection, strictly above the
// confidence bar, spatially coinciding with the expected region.
std::optional<Detection> qualifying_stop(const std::vector<Detection>& detections,
                                         const BBox& region, const EvalConfig& cfg) {
    std::optional<Detection> best;
    double best_conf = cfg.success_conf;  // strict >
    for (const auto& d : detections) {
        if (d.predicted_class != kClassStop) continue;
        double conf = d.class_confidence(kClassStop);
        if (!(conf > best_conf)) continue;
        if (!(iou(d.box, region) > cfg.success_iou)) continue;
        best = d;
        best_conf = conf;
    }
    return best;
}

}  // namespace

DecisionOutcome decision_rule(const std::vector<Detection>& detections,
                              const BBox& expected_sign_region, const EvalConfig& cfg) {
    expected_sign_region.validate("decision region");
    DecisionOutcome out;
    out.trigger = qualifying_stop(detections, expected_sign_region, cfg);
    out.stop = out.trigger.has_value();
    return out;
}

FrameOutcome attack_success(const FrameRecord& frame, AttackMethod method, const PatchSet* patchset,
                            const DetectorParams& detector, const SceneConfig& scene,
                            const EvalConfig& cfg) {
    FrameOutcome out;
    if (!frame.screen_visible) {
        out.skip_reason = "screen-not-visible";
        return out;
    }
    if (!frame.sign_visible) {
        out.skip_reason = "sign-not-visible";
        return out;
    }
    Image image;
    switch (method) {
        case AttackMethod::None:
            image = frame.image.to_image();
            break;
        case AttackMethod::Static: {
            if (!patchset) throw ValidationError("attack_success: static method needs a patch set");
            SceneConfig sc = scene;
            sc.screen_mount_angle = frame.mount_angle;
            image = apply_patch_to_frame(frame, patchset->static_patch, sc);
            break;
        }
        case AttackMethod::Dynamic: {
            if (!patchset) throw ValidationError("attack_success: dynamic method needs a patch set");
            const Image& p = select_patch(*patchset, frame.recorded_camera, frame.recorded_patch_car,
                                          frame.recorded_sign);
            SceneConfig sc = scene;
            sc.screen_mount_angle = frame.mount_angle;
            image = apply_patch_to_frame(frame, p, sc);
            break;
        }
    }
    RawPrediction raw = detector_forward(detector, image);
    std::vector<Detection> dets = decode_detections(detector.config, raw, cfg.decode_conf, cfg.decode_nms);
    DecisionOutcome decision = decision_rule(dets, frame.sign_box, cfg);
    out.evaluated = true;
    out.decision_stop = decision.stop;
    out.success = decision.stop;  // definitionally aligned
    out.stop_confidence = decision.trigger ? decision.trigger->class_confidence(kClassStop) : 0.0;
    return out;
}

AttackReport evaluate_success_rates(const std::vector<ScenarioEvalInput>& scenarios,
                                    const DetectorParams& detector, const EvalConfig& cfg,
                                    const std::vector<AttackMethod>& methods) {
    AttackReport report;
    report.methods.reserve(methods.size());
    for (AttackMethod m : methods) report.methods.push_back(method_name(m));

    for (const auto& sc : scenarios) {
        if (!sc.scene || !sc.similar) throw ValidationError("evaluate: scenario missing inputs");
        report.scenarios.push_back(sc.name);
        struct SplitRef {
            const char* name;
            const DatasetManifest* manifest;
        };
        std::vector<SplitRef> splits{{"similar", sc.similar}};
        if (sc.unseen) splits.push_back({"unseen", sc.unseen});
        for (const auto& split : splits) {
            if (std::find(report.splits.begin(), report.splits.end(), split.name) == report.splits.end())
                report.splits.push_back(split.name);
            for (AttackMethod method : methods) {
                if (method != AttackMethod::None && !sc.patchset)
                    throw ValidationError("evaluate: method needs a patch set for scenario " + sc.name);
                ReportCell cell;
                const auto& frames = split.manifest->frames;
                std::vector<FrameOutcome> outcomes(frames.size());
                parallel_for(static_cast<int64_t>(frames.size()), [&](int64_t i) {
                    outcomes[static_cast<size_t>(i)] = attack_success(frames[static_cast<size_t>(i)], method,
                                                                      sc.patchset, detector, *sc.scene, cfg);
                });
                for (size_t i = 0; i < frames.size(); ++i) {
                    const FrameOutcome& o = outcomes[i];
                    FrameEvalRecord rec;
                    rec.scenario = sc.name;
                    rec.split = split.name;
                    rec.frame_index = static_cast<int>(i);
                    rec.sign_class = frames[i].sign_class;
                    rec.cluster_id = sc.patchset
                                         ? assign_cluster(sc.patchset->clusters,
                                                          cluster_feature_vector(frames[i], sc.patchset->use_4d_features))
                                         : -1;
                    rec.method = method_name(method);
                    rec.evaluated = o.evaluated;
                    rec.skip_reason = o.skip_reason;
                    rec.success = o.success;
                    rec.decision_stop = o.decision_stop;
                    rec.stop_confidence = o.stop_confidence;
                    report.frames.push_back(std::move(rec));
                    if (o.evaluated) {
                        ++cell.evaluated;
                        if (o.success) ++cell.successes;
                        if (o.decision_stop) ++cell.decision_stops;
                        cell.stop_confidence_sum += o.stop_confidence;
                    } else {
                        ++cell.skipped;
                    }
                }
                report.cells[sc.name][split.name][method_name(method)] = cell;
            }
        }
    }
    return report;
}

ComparisonSummary compare_dynamic_static(const AttackReport& report) {
    ComparisonSummary sum;
    double wd = 0.0, ws = 0.0, wm = 0.0;
    int total = 0;
    bool saw_dynamic = false, saw_static = false;
    for (const auto& [scenario, by_split] : report.cells) {
        for (const auto& [split, by_method] : by_split) {
            auto dy = by_method.find("dynamic");
            auto st = by_method.find("static");
            if (dy != by_method.end()) saw_dynamic = true;
            if (st != by_method.end()) saw_static = true;
            if (dy == by_method.end() || st == by_method.end()) continue;
            if (!dy->second.present() || !st->second.present()) continue;
            ComparisonDelta d;
            d.scenario = scenario;
            d.split = split;
            d.dynamic_rate = dy->second.rate();
            d.static_rate = st->second.rate();
            d.delta = d.dynamic_rate - d.static_rate;
            d.frames = dy->second.evaluated;
            sum.deltas.push_back(d);
            wd += d.dynamic_rate * d.frames;
            ws += d.static_rate * d.frames;
            wm += d.delta * d.frames;
            total += d.frames;
        }
    }
    if (!saw_dynamic || !saw_static)
        throw ValidationError("compare_dynamic_static: report lacks a method");
    if (total > 0) {
        sum.aggregate_dynamic = wd / total;
        sum.aggregate_static = ws / total;
        sum.aggregate_margin = wm / total;
    }
    return sum;
}

// ---------------------------------------------------------------------------
// serialization

void save_report_json(const AttackReport& report, const std::string& path) {
    ordered_json j;
    j["format"] = "dynpatch-attack-report";
    j["version"] = 1;
    j["scenarios"] = report.scenarios;
    j["splits"] = report.splits;
    j["methods"] = report.methods;
    ordered_json cells = ordered_json::object();
    for (const auto& [scenario, by_split] : report.cells) {
        for (const auto& [split, by_method] : by_split) {
            for (const auto& [method, cell] : by_method) {
                ordered_json c;
                c["evaluated"] = cell.evaluated;
                c["skipped"] = cell.skipped;
                c["successes"] = cell.successes;
                c["decision_stops"] = cell.decision_stops;
                if (cell.present()) {
                    c["success_rate"] = cell.rate();
                    c["decision_flip_rate"] = cell.flip_rate();
                    c["mean_stop_confidence"] = cell.mean_stop_confidence();
                } else {
                    c["success_rate"] = nullptr;  // absent, not zero
                    c["decision_flip_rate"] = nullptr;
                    c["mean_stop_confidence"] = nullptr;
                }
                cells[scenario][split][method] = c;
            }
        }
    }
    j["cells"] = cells;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_report_json: cannot write " + path);
    out << j.dump(2) << "\n";
}

void save_frame_log(const AttackReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_frame_log: cannot write " + path);
    out << ordered_json{{"format", "dynpatch-frame-log"}, {"version", 1}}.dump() << "\n";
    for (const auto& f : report.frames) {
        ordered_json j;
        j["scenario"] = f.scenario;
        j["split"] = f.split;
        j["frame"] = f.frame_index;
        j["sign_class"] = class_name(f.sign_class);
        j["cluster"] = f.cluster_id;
        j["method"] = f.method;
        j["evaluated"] = f.evaluated;
        if (!f.evaluated) j["skip_reason"] = f.skip_reason;
        j["success"] = f.success;
        j["decision_stop"] = f.decision_stop;
        j["stop_confidence"] = f.stop_confidence;
        out << j.dump() << "\n";
    }
}

std::string render_report_table(const AttackReport& report) {
    std::ostringstream out;
    char buf[64];
    out << "Attack success rate (stop confidence > 0.5, position checked)\n";
    out << "--------------------------------------------------------------------------\n";
    out << "Sign            |  Similar Env.        |  Unseen Env.\n";
    out << "                |  Dynamic    Static   |  Dynamic    Static\n";
    out << "--------------------------------------------------------------------------\n";
    auto cell_str = [&](const std::string& scenario, const std::string& split, const std::string& method) {
        auto s = report.cells.find(scenario);
        if (s == report.cells.end()) return std::string("   --  ");
        auto sp = s->second.find(split);
        if (sp == s->second.end()) return std::string("   --  ");
        auto m = sp->second.find(method);
        if (m == sp->second.end() || !m->second.present()) return std::string("   --  ");
        std::snprintf(buf, sizeof(buf), "%6.1f%%", 100.0 * m->second.rate());
        return std::string(buf);
    };
    for (const auto& scenario : report.scenarios) {
        std::snprintf(buf, sizeof(buf), "%-15s", scenario.c_str());
        out << buf << " |  " << cell_str(scenario, "similar", "dynamic") << "   "
            << cell_str(scenario, "similar", "static") << " |  " << cell_str(scenario, "unseen", "dynamic")
            << "   " << cell_str(scenario, "unseen", "static") << "\n";
    }
    out << "--------------------------------------------------------------------------\n";
    auto totals = [&](const std::string& split) {
        int n = 0;
        for (const auto& scenario : report.scenarios) {
            auto s = report.cells.find(scenario);
            if (s == report.cells.end()) continue;
            auto sp = s->second.find(split);
            if (sp == s->second.end()) continue;
            auto m = sp->second.find("dynamic");
            if (m == sp->second.end()) m = sp->second.begin();
            if (m != sp->second.end()) n += m->second.evaluated;
        }
        return n;
    };
    std::snprintf(buf, sizeof(buf), "%-15s |  %6d             |  %6d\n", "Total frames",
                  totals("similar"), totals("unseen"));
    out << buf;
    return out.str();
}

}  // namespace dynpatch
