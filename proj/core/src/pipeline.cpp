#include "dynpatch/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dynpatch/common.hpp"
#include "dynpatch/plot.hpp"
#include "dynpatch/png_io.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Simulate: return "simulate";
        case Stage::TrainDetector: return "train-detector";
        case Stage::TrainSitnet: return "train-sitnet";
        case Stage::Cluster: return "cluster";
        case Stage::Optimize: return "optimize";
        case Stage::Evaluate: return "evaluate";
        case Stage::Heatmap: return "heatmap";
        case Stage::All: return "all";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    for (Stage s : {Stage::Simulate, Stage::TrainDetector, Stage::TrainSitnet, Stage::Cluster,
                    Stage::Optimize, Stage::Evaluate, Stage::Heatmap, Stage::All})
        if (name == stage_name(s)) return s;
    throw ValidationError("unknown stage: " + name);
}

// ---------------------------------------------------------------------------
// config

Config default_config() {
    Config c;
    c.set("pipeline", "seed", int64_t{1});
    c.set("pipeline", "threads", int64_t{0});

    SceneConfig sc = default_scene_config();
    c.set("scenesim", "image_side", static_cast<int64_t>(sc.image_side));
    c.set("scenesim", "sign_classes", std::string("stop,go_straight,turn,pedestrian"));
    c.set("scenesim", "focal_px", sc.focal_px);
    c.set("scenesim", "camera_height", sc.camera_height);
    c.set("scenesim", "near_plane", sc.near_plane);
    c.set("scenesim", "car_length", sc.car_length);
    c.set("scenesim", "car_width", sc.car_width);
    c.set("scenesim", "car_height", sc.car_height);
    c.set("scenesim", "screen_width", sc.screen_width);
    c.set("scenesim", "screen_height", sc.screen_height);
    c.set("scenesim", "screen_bottom", sc.screen_bottom);
    c.set("scenesim", "screen_standoff", sc.screen_standoff);
    c.set("scenesim", "screen_resolution", static_cast<int64_t>(sc.screen_resolution));
    c.set("scenesim", "sign_size", sc.sign_size);
    c.set("scenesim", "sign_bottom", sc.sign_bottom);
    c.set("scenesim", "calibration_blue", std::string("0,0.2,1"));
    c.set("scenesim", "background_seed", int64_t{1});
    c.set("scenesim", "pose_noise_sigma", sc.pose_noise_sigma);
    c.set("scenesim", "heading_noise_sigma", sc.heading_noise_sigma);
    c.set("scenesim", "photometric_gain", std::string("0.86,0.95,0.8"));
    c.set("scenesim", "photometric_bias", std::string("0.05,0.02,0.08"));
    c.set("scenesim", "photometric_gamma", sc.photometric.gamma);
    c.set("scenesim", "photometric_blur", sc.photometric.blur_radius);
    c.set("scenesim", "photometric_noise", sc.photometric.noise_amplitude);

    c.set("dataset", "detector_frames", int64_t{480});
    c.set("dataset", "screen_pairs", int64_t{240});
    c.set("dataset", "scenario_train_frames", int64_t{150});
    c.set("dataset", "scenario_eval_frames", int64_t{60});
    c.set("dataset", "distance_min", 1.8);
    c.set("dataset", "distance_max", 6.5);

    DetectorConfig dc;
    c.set("detector", "grid", static_cast<int64_t>(dc.grid));
    c.set("detector", "channels", std::string("8,16,24,32,40,40"));
    c.set("detector", "strides", std::string("2,2,2,2,1,1"));
    c.set("detector", "dilations", std::string("1,1,1,1,2,1"));
    c.set("detector", "kernel", static_cast<int64_t>(dc.kernel));
    c.set("detector", "anchor_px", dc.anchor_px);
    c.set("detector", "leaky_slope", dc.leaky_slope);
    c.set("detector", "size_logit_clamp", dc.size_logit_clamp);
    c.set("detector", "learning_rate", dc.learning_rate);
    c.set("detector", "epochs", static_cast<int64_t>(dc.epochs));
    c.set("detector", "batch_size", static_cast<int64_t>(dc.batch_size));
    c.set("detector", "lambda_box", dc.lambda_box);
    c.set("detector", "lambda_obj_pos", dc.lambda_obj_pos);
    c.set("detector", "lambda_cls", dc.lambda_cls);
    c.set("detector", "val_fraction", dc.val_fraction);
    c.set("detector", "seed", static_cast<int64_t>(dc.seed));

    SitNetConfig nc;
    c.set("sitnet", "hidden_channels", static_cast<int64_t>(nc.hidden_channels));
    c.set("sitnet", "kernel", static_cast<int64_t>(nc.kernel));
    c.set("sitnet", "leaky_slope", nc.leaky_slope);
    c.set("sitnet", "softclip_k", nc.softclip_k);
    c.set("sitnet", "epochs", static_cast<int64_t>(nc.epochs));
    c.set("sitnet", "learning_rate", nc.learning_rate);
    c.set("sitnet", "alpha", nc.alpha);
    c.set("sitnet", "beta", nc.beta);
    c.set("sitnet", "batch_size", static_cast<int64_t>(nc.batch_size));
    c.set("sitnet", "val_fraction", nc.val_fraction);
    c.set("sitnet", "init_noise", nc.init_noise);
    c.set("sitnet", "extractor_cut", static_cast<int64_t>(nc.extractor_cut));
    c.set("sitnet", "seed", static_cast<int64_t>(nc.seed));

    OptimizerConfig oc;
    c.set("attack", "k_clusters", int64_t{3});
    c.set("attack", "iterations", static_cast<int64_t>(oc.iterations));
    c.set("attack", "eta", oc.eta);
    c.set("attack", "top_k", static_cast<int64_t>(oc.top_k));
    c.set("attack", "tau", oc.tau);
    c.set("attack", "target_class", std::string("stop"));
    c.set("attack", "batch_size", static_cast<int64_t>(oc.batch_size));
    c.set("attack", "patch_resolution", static_cast<int64_t>(oc.patch_resolution));
    c.set("attack", "optimizer", oc.optimizer);
    c.set("attack", "static_step_mode", std::string("matched_total"));
    c.set("attack", "use_4d_features", false);
    c.set("attack", "kmeans_restarts", int64_t{16});
    c.set("attack", "seed", static_cast<int64_t>(oc.seed));

    EvalConfig ec;
    c.set("harness", "decode_conf", ec.decode_conf);
    c.set("harness", "decode_nms", ec.decode_nms);
    c.set("harness", "success_conf", ec.success_conf);
    c.set("harness", "success_iou", ec.success_iou);
    c.set("harness", "scenarios", std::string("go_straight,turn,pedestrian"));
    c.set("harness", "heatmap_frames", int64_t{6});
    c.set("harness", "heatmap_layer", int64_t{3});
    return c;
}

namespace {

std::array<double, 3> parse_triplet(const Config& cfg, const std::string& sec, const std::string& key,
                                    std::array<double, 3> fallback) {
    if (!cfg.has(sec, key)) return fallback;
    auto parts = cfg.get_list(sec, key);
    if (parts.size() != 3) throw ValidationError("config: " + key + " needs three values");
    return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
}

std::vector<int> parse_int_list(const Config& cfg, const std::string& sec, const std::string& key,
                                std::vector<int> fallback) {
    if (!cfg.has(sec, key)) return fallback;
    std::vector<int> out;
    for (const auto& s : cfg.get_list(sec, key)) out.push_back(std::stoi(s));
    return out;
}

}  // namespace

SceneConfig scene_config_from(const Config& cfg) {
    SceneConfig sc = default_scene_config();
    sc.image_side = static_cast<int>(cfg.get_int("scenesim", "image_side", sc.image_side));
    if (cfg.has("scenesim", "sign_classes")) {
        sc.sign_classes.clear();
        for (const auto& name : cfg.get_list("scenesim", "sign_classes"))
            sc.sign_classes.push_back(class_id(name));
    }
    sc.focal_px = cfg.get_double("scenesim", "focal_px", sc.focal_px);
    sc.camera_height = cfg.get_double("scenesim", "camera_height", sc.camera_height);
    sc.near_plane = cfg.get_double("scenesim", "near_plane", sc.near_plane);
    sc.car_length = cfg.get_double("scenesim", "car_length", sc.car_length);
    sc.car_width = cfg.get_double("scenesim", "car_width", sc.car_width);
    sc.car_height = cfg.get_double("scenesim", "car_height", sc.car_height);
    sc.screen_width = cfg.get_double("scenesim", "screen_width", sc.screen_width);
    sc.screen_height = cfg.get_double("scenesim", "screen_height", sc.screen_height);
    sc.screen_bottom = cfg.get_double("scenesim", "screen_bottom", sc.screen_bottom);
    sc.screen_standoff = cfg.get_double("scenesim", "screen_standoff", sc.screen_standoff);
    sc.screen_resolution = static_cast<int>(cfg.get_int("scenesim", "screen_resolution", sc.screen_resolution));
    sc.sign_size = cfg.get_double("scenesim", "sign_size", sc.sign_size);
    sc.sign_bottom = cfg.get_double("scenesim", "sign_bottom", sc.sign_bottom);
    sc.calibration_blue = parse_triplet(cfg, "scenesim", "calibration_blue", sc.calibration_blue);
    sc.background_seed = static_cast<uint64_t>(cfg.get_int("scenesim", "background_seed", 1));
    sc.pose_noise_sigma = cfg.get_double("scenesim", "pose_noise_sigma", sc.pose_noise_sigma);
    sc.heading_noise_sigma = cfg.get_double("scenesim", "heading_noise_sigma", sc.heading_noise_sigma);
    sc.photometric.gain = parse_triplet(cfg, "scenesim", "photometric_gain", sc.photometric.gain);
    sc.photometric.bias = parse_triplet(cfg, "scenesim", "photometric_bias", sc.photometric.bias);
    sc.photometric.gamma = cfg.get_double("scenesim", "photometric_gamma", sc.photometric.gamma);
    sc.photometric.blur_radius = cfg.get_double("scenesim", "photometric_blur", sc.photometric.blur_radius);
    sc.photometric.noise_amplitude = cfg.get_double("scenesim", "photometric_noise", sc.photometric.noise_amplitude);
    sc.validate();
    return sc;
}

DetectorConfig detector_config_from(const Config& cfg) {
    DetectorConfig dc;
    dc.image_side = static_cast<int>(cfg.get_int("scenesim", "image_side", dc.image_side));
    dc.grid = static_cast<int>(cfg.get_int("detector", "grid", dc.grid));
    dc.channels = parse_int_list(cfg, "detector", "channels", dc.channels);
    dc.strides = parse_int_list(cfg, "detector", "strides", dc.strides);
    dc.dilations = parse_int_list(cfg, "detector", "dilations", dc.dilations);
    dc.kernel = static_cast<int>(cfg.get_int("detector", "kernel", dc.kernel));
    dc.anchor_px = cfg.get_double("detector", "anchor_px", dc.anchor_px);
    dc.leaky_slope = cfg.get_double("detector", "leaky_slope", dc.leaky_slope);
    dc.size_logit_clamp = cfg.get_double("detector", "size_logit_clamp", dc.size_logit_clamp);
    dc.learning_rate = cfg.get_double("detector", "learning_rate", dc.learning_rate);
    dc.epochs = static_cast<int>(cfg.get_int("detector", "epochs", dc.epochs));
    dc.batch_size = static_cast<int>(cfg.get_int("detector", "batch_size", dc.batch_size));
    dc.lambda_box = cfg.get_double("detector", "lambda_box", dc.lambda_box);
    dc.lambda_obj_pos = cfg.get_double("detector", "lambda_obj_pos", dc.lambda_obj_pos);
    dc.lambda_cls = cfg.get_double("detector", "lambda_cls", dc.lambda_cls);
    dc.val_fraction = cfg.get_double("detector", "val_fraction", dc.val_fraction);
    dc.seed = static_cast<uint64_t>(cfg.get_int("detector", "seed", static_cast<int64_t>(dc.seed)));
    dc.validate();
    return dc;
}

SitNetConfig sitnet_config_from(const Config& cfg) {
    SitNetConfig nc;
    nc.hidden_channels = static_cast<int>(cfg.get_int("sitnet", "hidden_channels", nc.hidden_channels));
    nc.kernel = static_cast<int>(cfg.get_int("sitnet", "kernel", nc.kernel));
    nc.leaky_slope = cfg.get_double("sitnet", "leaky_slope", nc.leaky_slope);
    nc.softclip_k = cfg.get_double("sitnet", "softclip_k", nc.softclip_k);
    nc.epochs = static_cast<int>(cfg.get_int("sitnet", "epochs", nc.epochs));
    nc.learning_rate = cfg.get_double("sitnet", "learning_rate", nc.learning_rate);
    nc.alpha = cfg.get_double("sitnet", "alpha", nc.alpha);
    nc.beta = cfg.get_double("sitnet", "beta", nc.beta);
    nc.batch_size = static_cast<int>(cfg.get_int("sitnet", "batch_size", nc.batch_size));
    nc.val_fraction = cfg.get_double("sitnet", "val_fraction", nc.val_fraction);
    nc.init_noise = cfg.get_double("sitnet", "init_noise", nc.init_noise);
    nc.extractor_cut = static_cast<int>(cfg.get_int("sitnet", "extractor_cut", nc.extractor_cut));
    nc.seed = static_cast<uint64_t>(cfg.get_int("sitnet", "seed", static_cast<int64_t>(nc.seed)));
    nc.validate();
    return nc;
}

OptimizerConfig optimizer_config_from(const Config& cfg) {
    OptimizerConfig oc;
    oc.iterations = static_cast<int>(cfg.get_int("attack", "iterations", oc.iterations));
    oc.eta = cfg.get_double("attack", "eta", oc.eta);
    oc.top_k = static_cast<int>(cfg.get_int("attack", "top_k", oc.top_k));
    oc.tau = cfg.get_double("attack", "tau", oc.tau);
    oc.target_class = class_id(cfg.get_str("attack", "target_class", "stop"));
    oc.batch_size = static_cast<int>(cfg.get_int("attack", "batch_size", oc.batch_size));
    oc.patch_resolution = static_cast<int>(cfg.get_int("attack", "patch_resolution", oc.patch_resolution));
    oc.optimizer = cfg.get_str("attack", "optimizer", oc.optimizer);
    oc.seed = static_cast<uint64_t>(cfg.get_int("attack", "seed", static_cast<int64_t>(oc.seed)));
    oc.validate();
    return oc;
}

EvalConfig eval_config_from(const Config& cfg) {
    EvalConfig ec;
    ec.decode_conf = cfg.get_double("harness", "decode_conf", ec.decode_conf);
    ec.decode_nms = cfg.get_double("harness", "decode_nms", ec.decode_nms);
    ec.success_conf = cfg.get_double("harness", "success_conf", ec.success_conf);
    ec.success_iou = cfg.get_double("harness", "success_iou", ec.success_iou);
    return ec;
}

// ---------------------------------------------------------------------------
// stage plumbing

namespace {

struct PipelineContext {
    Config cfg;
    fs::path out;
    uint64_t master_seed = 1;
    std::vector<std::string> scenarios;
};

std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

ordered_json hash_inputs_for(const PipelineContext& ctx, Stage stage) {
    ordered_json inputs;
    inputs["config"] = hash_to_hex(ctx.cfg.content_hash());
    inputs["seed"] = ctx.master_seed;
    auto add_file = [&](const std::string& rel) {
        fs::path p = ctx.out / rel;
        inputs[rel] = fs::exists(p) ? hash_to_hex(hash_file(p.string())) : "missing";
    };
    switch (stage) {
        case Stage::Simulate:
            break;
        case Stage::TrainDetector:
            add_file("data/detector/manifest.jsonl");
            break;
        case Stage::TrainSitnet:
            add_file("data/screen_pairs/pairs.jsonl");
            add_file("models/detector.dpt");
            break;
        case Stage::Cluster:
            for (const auto& s : ctx.scenarios) add_file("data/scenario_" + s + "/train/manifest.jsonl");
            break;
        case Stage::Optimize:
            for (const auto& s : ctx.scenarios) add_file("clusters/" + s + "/manifest.jsonl");
            add_file("models/detector.dpt");
            add_file("models/sitnet.dpt");
            break;
        case Stage::Evaluate:
            for (const auto& s : ctx.scenarios) {
                add_file("patches/" + s + "/patchset.json");
                add_file("data/scenario_" + s + "/eval_similar/manifest.jsonl");
                add_file("data/scenario_" + s + "/eval_unseen/manifest.jsonl");
            }
            add_file("models/detector.dpt");
            break;
        case Stage::Heatmap:
            add_file("models/detector.dpt");
            add_file("data/detector/manifest.jsonl");
            break;
        case Stage::All:
            break;
    }
    return inputs;
}

void require_artifact(const PipelineContext& ctx, const std::string& rel, const char* producer) {
    if (!fs::exists(ctx.out / rel))
        throw DependencyError("missing artifact '" + rel + "'; run stage '" + producer + "' first",
                              producer);
}

void write_stage_manifest(const PipelineContext& ctx, Stage stage, const ordered_json& inputs,
                          const std::vector<std::string>& outputs) {
    fs::create_directories(ctx.out / "manifests");
    ordered_json j;
    j["stage"] = stage_name(stage);
    j["timestamp"] = iso_now();
    j["inputs"] = inputs;
    ordered_json outs = ordered_json::object();
    for (const auto& rel : outputs) {
        fs::path p = ctx.out / rel;
        outs[rel] = fs::exists(p) ? hash_to_hex(hash_file(p.string())) : "missing";
    }
    j["outputs"] = outs;
    std::ofstream out(ctx.out / "manifests" / (std::string(stage_name(stage)) + ".json"), std::ios::trunc);
    out << j.dump(2) << "\n";
}

bool stage_cached(const PipelineContext& ctx, Stage stage) {
    fs::path p = ctx.out / "manifests" / (std::string(stage_name(stage)) + ".json");
    if (!fs::exists(p)) return false;
    std::ifstream in(p);
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) return false;
    return j.value("inputs", ordered_json::object()) == hash_inputs_for(ctx, stage);
}

// --- stages ---------------------------------------------------------------

void run_simulate(const PipelineContext& ctx) {
    SceneConfig scene = scene_config_from(ctx.cfg);
    const int detector_frames = static_cast<int>(ctx.cfg.get_int("dataset", "detector_frames", 480));
    const int n_pairs = static_cast<int>(ctx.cfg.get_int("dataset", "screen_pairs", 240));
    const int scen_train = static_cast<int>(ctx.cfg.get_int("dataset", "scenario_train_frames", 150));
    const int scen_eval = static_cast<int>(ctx.cfg.get_int("dataset", "scenario_eval_frames", 60));
    TrajectorySpec base_spec;
    base_spec.distance_min = ctx.cfg.get_double("dataset", "distance_min", base_spec.distance_min);
    base_spec.distance_max = ctx.cfg.get_double("dataset", "distance_max", base_spec.distance_max);

    {
        TrajectorySpec spec = base_spec;
        spec.wide_variation = true;
        DatasetManifest m = generate_driving_dataset(scene, spec, detector_frames,
                                                     derive_seed(ctx.master_seed, "data-detector"));
        save_dataset(m, (ctx.out / "data/detector").string());
    }
    {
        auto pairs = generate_screen_pairs(scene, n_pairs, derive_seed(ctx.master_seed, "data-pairs"));
        save_screen_pairs(pairs, (ctx.out / "data/screen_pairs").string());
    }
    for (const auto& s : ctx.scenarios) {
        TrajectorySpec spec = base_spec;
        spec.fixed_sign_class = class_id(s);
        DatasetManifest train = generate_driving_dataset(scene, spec, scen_train,
                                                         derive_seed(ctx.master_seed, "data-" + s + "-train"));
        save_dataset(train, (ctx.out / ("data/scenario_" + s) / "train").string());
        DatasetManifest similar = generate_driving_dataset(scene, spec, scen_eval,
                                                           derive_seed(ctx.master_seed, "data-" + s + "-eval-similar"));
        save_dataset(similar, (ctx.out / ("data/scenario_" + s) / "eval_similar").string());
        SceneConfig unseen_scene = scene;
        unseen_scene.background_seed = derive_seed(scene.background_seed, "unseen-env");
        DatasetManifest unseen = generate_driving_dataset(unseen_scene, spec, scen_eval,
                                                          derive_seed(ctx.master_seed, "data-" + s + "-eval-unseen"));
        save_dataset(unseen, (ctx.out / ("data/scenario_" + s) / "eval_unseen").string());
    }
}

void run_train_detector(const PipelineContext& ctx) {
    require_artifact(ctx, "data/detector/manifest.jsonl", "simulate");
    DatasetManifest data = load_dataset((ctx.out / "data/detector").string());
    DetectorConfig dc = detector_config_from(ctx.cfg);
    TrainReport report;
    DetectorParams params = train_detector(data, dc, &report);
    fs::create_directories(ctx.out / "models");
    uint64_t data_hash = hash_file((ctx.out / "data/detector/manifest.jsonl").string());
    save_detector(params, (ctx.out / "models/detector").string(), data_hash, report.holdout_map);

    ordered_json j;
    j["epoch_loss"] = report.epoch_loss;
    j["holdout_map"] = report.holdout_map;
    j["per_class_ap"] = report.per_class_ap;
    j["train_frames"] = report.train_frames;
    j["holdout_frames"] = report.holdout_frames;
    std::ofstream out(ctx.out / "models/detector_report.json", std::ios::trunc);
    out << j.dump(2) << "\n";

    PlotSeries loss{report.epoch_loss, {0.85, 0.3, 0.2}};
    write_png((ctx.out / "models/detector_loss.png").string(), line_chart({loss}));
}

void run_train_sitnet(const PipelineContext& ctx) {
    require_artifact(ctx, "data/screen_pairs/pairs.jsonl", "simulate");
    require_artifact(ctx, "models/detector.json", "train-detector");
    auto pairs = load_screen_pairs((ctx.out / "data/screen_pairs").string());
    DetectorParams detector = load_detector((ctx.out / "models/detector").string());
    SitNetConfig nc = sitnet_config_from(ctx.cfg);
    FeatureExtractor extractor = make_extractor(detector, nc.extractor_cut);
    SitTrainReport report;
    SitNetParams params = train_sitnet(pairs, extractor, nc, &report);
    uint64_t pairs_hash = hash_file((ctx.out / "data/screen_pairs/pairs.jsonl").string());
    save_sitnet(params, (ctx.out / "models/sitnet").string(), pairs_hash);

    ordered_json j;
    j["train_loss"] = report.train_loss;
    j["val_loss"] = report.val_loss;
    j["final_val_mse"] = report.final_val_mse;
    j["baseline_val_mse"] = report.baseline_val_mse;
    j["train_pairs"] = report.train_pairs;
    j["val_pairs"] = report.val_pairs;
    std::ofstream out(ctx.out / "models/sitnet_report.json", std::ios::trunc);
    out << j.dump(2) << "\n";

    write_png((ctx.out / "models/sitnet_loss.png").string(),
              line_chart({{report.train_loss, {0.2, 0.4, 0.85}}, {report.val_loss, {0.85, 0.5, 0.15}}}));
}

void run_cluster(const PipelineContext& ctx) {
    const int k = static_cast<int>(ctx.cfg.get_int("attack", "k_clusters", 3));
    const int restarts = static_cast<int>(ctx.cfg.get_int("attack", "kmeans_restarts", 16));
    const bool use_4d = ctx.cfg.get_bool("attack", "use_4d_features", false);
    const uint64_t seed = static_cast<uint64_t>(ctx.cfg.get_int("attack", "seed", 13));
    for (const auto& s : ctx.scenarios) {
        require_artifact(ctx, "data/scenario_" + s + "/train/manifest.jsonl", "simulate");
        DatasetManifest train = load_dataset((ctx.out / ("data/scenario_" + s) / "train").string());
        std::vector<std::vector<double>> points;
        points.reserve(train.frames.size());
        for (const auto& f : train.frames) points.push_back(cluster_feature_vector(f, use_4d));
        ClusterModel model = kmeans_fit(points, k, derive_seed(seed, "kmeans-" + s), restarts);
        assign_manifest_clusters(train, model, use_4d);

        fs::path dir = ctx.out / "clusters" / s;
        fs::create_directories(dir);
        save_cluster_model(model, use_4d, (dir / "cluster_model.json").string());
        // clustered manifest referencing the original images
        for (auto& f : train.frames) f.image_path = "../../data/scenario_" + s + "/train/" + f.image_path;
        save_dataset(train, dir.string(), /*write_images=*/false);

        // scatter of the feature space, colored per cluster (2d features only)
        if (!use_4d) {
            Image scatter(420, 420, 1.0);
            double dmax = 1e-9;
            for (const auto& p : points) dmax = std::max({dmax, p[0], p[1]});
            const std::array<std::array<double, 3>, 6> palette{{{0.86, 0.25, 0.2},
                                                                 {0.2, 0.45, 0.85},
                                                                 {0.2, 0.65, 0.3},
                                                                 {0.75, 0.55, 0.1},
                                                                 {0.55, 0.3, 0.7},
                                                                 {0.3, 0.3, 0.3}}};
            for (size_t i = 0; i < points.size(); ++i) {
                int x = static_cast<int>(points[i][0] / dmax * 400) + 10;
                int y = 410 - static_cast<int>(points[i][1] / dmax * 400);
                auto col = palette[static_cast<size_t>(train.frames[i].cluster_id) % palette.size()];
                for (int dy = -2; dy <= 2; ++dy)
                    for (int dx = -2; dx <= 2; ++dx)
                        if (scatter.in_bounds(y + dy, x + dx)) scatter.set(y + dy, x + dx, col[0], col[1], col[2]);
            }
            write_png((dir / "clusters.png").string(), scatter);
        }
    }
}

void run_optimize(const PipelineContext& ctx) {
    require_artifact(ctx, "models/detector.json", "train-detector");
    require_artifact(ctx, "models/sitnet.json", "train-sitnet");
    DetectorParams detector = load_detector((ctx.out / "models/detector").string());
    SitNetParams sitnet = load_sitnet((ctx.out / "models/sitnet").string());
    OptimizerConfig oc = optimizer_config_from(ctx.cfg);
    StaticStepMode mode = ctx.cfg.get_str("attack", "static_step_mode", "matched_total") == "per_cluster"
                              ? StaticStepMode::PerCluster
                              : StaticStepMode::MatchedTotal;
    const bool use_4d = ctx.cfg.get_bool("attack", "use_4d_features", false);

    for (const auto& s : ctx.scenarios) {
        require_artifact(ctx, "clusters/" + s + "/manifest.jsonl", "cluster");
        DatasetManifest train = load_dataset((ctx.out / "clusters" / s).string());
        bool model_4d = false;
        ClusterModel model = load_cluster_model((ctx.out / "clusters" / s / "cluster_model.json").string(), &model_4d);
        OptimizerConfig run_cfg = oc;
        run_cfg.seed = derive_seed(oc.seed, "scenario-" + s);
        BuildArtifacts art = build_patchset(train, model, detector, sitnet, run_cfg, model_4d, mode);
        fs::path dir = ctx.out / "patches" / s;
        save_patchset(art.set, dir.string());

        ordered_json curves;
        ordered_json cluster_curves = ordered_json::array();
        std::vector<PlotSeries> series;
        const std::array<std::array<double, 3>, 4> palette{{{0.86, 0.25, 0.2},
                                                            {0.2, 0.45, 0.85},
                                                            {0.2, 0.65, 0.3},
                                                            {0.2, 0.2, 0.2}}};
        for (size_t c = 0; c < art.cluster_runs.size(); ++c) {
            cluster_curves.push_back(art.cluster_runs[c].curve);
            series.push_back({art.cluster_runs[c].curve, palette[c % 3]});
        }
        curves["clusters"] = cluster_curves;
        curves["static"] = art.static_run.curve;
        series.push_back({art.static_run.curve, palette[3]});
        std::ofstream out(dir / "curves.json", std::ios::trunc);
        out << curves.dump() << "\n";
        write_png((dir / "objective_curves.png").string(), line_chart(series));
    }
}

void run_evaluate(const PipelineContext& ctx) {
    require_artifact(ctx, "models/detector.json", "train-detector");
    DetectorParams detector = load_detector((ctx.out / "models/detector").string());
    SceneConfig scene = scene_config_from(ctx.cfg);
    EvalConfig ec = eval_config_from(ctx.cfg);

    std::vector<DatasetManifest> similar_sets(ctx.scenarios.size()), unseen_sets(ctx.scenarios.size());
    std::vector<PatchSet> patchsets(ctx.scenarios.size());
    std::vector<SceneConfig> scenes(ctx.scenarios.size(), scene);
    std::vector<ScenarioEvalInput> inputs;
    for (size_t i = 0; i < ctx.scenarios.size(); ++i) {
        const std::string& s = ctx.scenarios[i];
        require_artifact(ctx, "patches/" + s + "/patchset.json", "optimize");
        require_artifact(ctx, "data/scenario_" + s + "/eval_similar/manifest.jsonl", "simulate");
        similar_sets[i] = load_dataset((ctx.out / ("data/scenario_" + s) / "eval_similar").string());
        unseen_sets[i] = load_dataset((ctx.out / ("data/scenario_" + s) / "eval_unseen").string());
        patchsets[i] = load_patchset((ctx.out / "patches" / s).string());
        inputs.push_back({s, &similar_sets[i], &unseen_sets[i], &patchsets[i], &scenes[i]});
    }
    AttackReport report = evaluate_success_rates(
        inputs, detector, ec, {AttackMethod::None, AttackMethod::Static, AttackMethod::Dynamic});

    fs::create_directories(ctx.out / "reports");
    save_report_json(report, (ctx.out / "reports/attack_report.json").string());
    save_frame_log(report, (ctx.out / "reports/frame_log.jsonl").string());
    {
        std::ofstream out(ctx.out / "reports/attack_report.txt", std::ios::trunc);
        out << render_report_table(report);
    }
    ComparisonSummary cmp = compare_dynamic_static(report);
    {
        ordered_json j;
        j["aggregate_dynamic"] = cmp.aggregate_dynamic;
        j["aggregate_static"] = cmp.aggregate_static;
        j["aggregate_margin"] = cmp.aggregate_margin;
        ordered_json deltas = ordered_json::array();
        for (const auto& d : cmp.deltas)
            deltas.push_back({{"scenario", d.scenario},
                              {"split", d.split},
                              {"dynamic", d.dynamic_rate},
                              {"static", d.static_rate},
                              {"delta", d.delta},
                              {"frames", d.frames}});
        j["deltas"] = deltas;
        std::ofstream out(ctx.out / "reports/comparison.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    // success-rate bars: per scenario, dynamic vs static vs none on similar env
    std::vector<BarGroup> groups;
    for (const auto& s : ctx.scenarios) {
        BarGroup g;
        for (const char* m : {"dynamic", "static", "none"}) {
            const auto& cell = report.cells[s]["similar"][m];
            g.values.push_back(cell.present() ? cell.rate() : 0.0);
        }
        groups.push_back(g);
    }
    write_png((ctx.out / "reports/success_rates.png").string(),
              bar_chart(groups, {{{0.86, 0.25, 0.2}, {0.25, 0.25, 0.3}, {0.6, 0.6, 0.6}}}));
}

void run_heatmap(const PipelineContext& ctx) {
    require_artifact(ctx, "models/detector.json", "train-detector");
    require_artifact(ctx, "data/detector/manifest.jsonl", "simulate");
    DetectorParams detector = load_detector((ctx.out / "models/detector").string());
    DatasetManifest data = load_dataset((ctx.out / "data/detector").string());
    const int n = std::min<int>(static_cast<int>(ctx.cfg.get_int("harness", "heatmap_frames", 6)),
                                static_cast<int>(data.frames.size()));
    const int layer = static_cast<int>(ctx.cfg.get_int("harness", "heatmap_layer", 3));
    fs::create_directories(ctx.out / "heatmaps");
    for (int i = 0; i < n; ++i) {
        Image img = data.frames[static_cast<size_t>(i)].image.to_image();
        Tensor heat = eigencam_heatmap(detector, img, layer);
        char name[48];
        std::snprintf(name, sizeof(name), "heatmaps/frame_%03d.png", i);
        write_png((ctx.out / name).string(), heatmap_overlay(img, heat));
    }
}

std::vector<std::string> stage_outputs(const PipelineContext& ctx, Stage stage) {
    std::vector<std::string> outs;
    switch (stage) {
        case Stage::Simulate:
            outs.push_back("data/detector/manifest.jsonl");
            outs.push_back("data/screen_pairs/pairs.jsonl");
            for (const auto& s : ctx.scenarios) {
                outs.push_back("data/scenario_" + s + "/train/manifest.jsonl");
                outs.push_back("data/scenario_" + s + "/eval_similar/manifest.jsonl");
                outs.push_back("data/scenario_" + s + "/eval_unseen/manifest.jsonl");
            }
            break;
        case Stage::TrainDetector:
            outs = {"models/detector.dpt", "models/detector.json", "models/detector_report.json"};
            break;
        case Stage::TrainSitnet:
            outs = {"models/sitnet.dpt", "models/sitnet.json", "models/sitnet_report.json"};
            break;
        case Stage::Cluster:
            for (const auto& s : ctx.scenarios) {
                outs.push_back("clusters/" + s + "/cluster_model.json");
                outs.push_back("clusters/" + s + "/manifest.jsonl");
            }
            break;
        case Stage::Optimize:
            for (const auto& s : ctx.scenarios) {
                outs.push_back("patches/" + s + "/patchset.json");
                outs.push_back("patches/" + s + "/curves.json");
            }
            break;
        case Stage::Evaluate:
            outs = {"reports/attack_report.json", "reports/frame_log.jsonl", "reports/comparison.json"};
            break;
        case Stage::Heatmap:
            outs = {};
            break;
        case Stage::All:
            break;
    }
    return outs;
}

void run_stage(PipelineContext& ctx, Stage stage) {
    ordered_json inputs = hash_inputs_for(ctx, stage);
    switch (stage) {
        case Stage::Simulate: run_simulate(ctx); break;
        case Stage::TrainDetector: run_train_detector(ctx); break;
        case Stage::TrainSitnet: run_train_sitnet(ctx); break;
        case Stage::Cluster: run_cluster(ctx); break;
        case Stage::Optimize: run_optimize(ctx); break;
        case Stage::Evaluate: run_evaluate(ctx); break;
        case Stage::Heatmap: run_heatmap(ctx); break;
        case Stage::All: throw ValidationError("run_stage: 'all' is expanded by the caller");
    }
    write_stage_manifest(ctx, stage, inputs, stage_outputs(ctx, stage));
}

}  // namespace

void run_pipeline(const Config& cfg, const PipelineOptions& options, Stage stage) {
    PipelineContext ctx;
    ctx.cfg = cfg;
    ctx.out = options.out_dir;
    if (options.threads > 0) set_default_threads(options.threads);
    ctx.master_seed = options.seed_override
                          ? *options.seed_override
                          : static_cast<uint64_t>(cfg.get_int("pipeline", "seed", 1));
    if (options.seed_override) ctx.cfg.set("pipeline", "seed", static_cast<int64_t>(*options.seed_override));
    for (const auto& s : ctx.cfg.get_list("harness", "scenarios"))
        ctx.scenarios.push_back(s);
    if (ctx.scenarios.empty()) throw ValidationError("pipeline: no scenarios configured");

    fs::create_directories(ctx.out);
    ctx.cfg.save((ctx.out / "config_snapshot.ini").string());

    if (stage == Stage::All) {
        for (Stage s : {Stage::Simulate, Stage::TrainDetector, Stage::TrainSitnet, Stage::Cluster,
                        Stage::Optimize, Stage::Evaluate, Stage::Heatmap}) {
            if (stage_cached(ctx, s)) continue;
            run_stage(ctx, s);
        }
    } else {
        run_stage(ctx, stage);
    }
}

}  // namespace dynpatch
