#pragma once

#include <map>
#include <string>
#include <vector>

#include "dynpatch/detector.hpp"
#include "dynpatch/scenesim.hpp"
#include "dynpatch/sitnet.hpp"

namespace dynpatch {

// Relative distances (meters) from the camera car.
struct ClusterFeatures {
    double d_patch = 0.0;
    double d_target = 0.0;
};

// Features come from the recorded (SLAM-analog) poses.
ClusterFeatures cluster_features(const FrameRecord& frame);

// Feature vector for clustering; 4d mode uses both raw 2D positions instead
// of the two distances.
std::vector<double> cluster_feature_vector(const FrameRecord& frame, bool use_4d);

struct ClusterModel {
    std::vector<std::vector<double>> centroids;  // ordered nearest-first
    std::vector<int> counts;
    uint64_t seed = 0;
    double wcss = 0.0;

    int k() const { return static_cast<int>(centroids.size()); }
    int dim() const { return centroids.empty() ? 0 : static_cast<int>(centroids[0].size()); }
};

// Lloyd iterations from k-means++ style seeding, several restarts, keeping
// the lowest within-cluster sum of squares. Deterministic given the seed.
ClusterModel kmeans_fit(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                        int restarts = 16, int max_iters = 100);

// Nearest centroid; ties resolve to the lowest cluster id.
int assign_cluster(const ClusterModel& model, const std::vector<double>& features);
int assign_cluster(const ClusterModel& model, const ClusterFeatures& features);

// Assigns every frame's cluster_id in place and returns per-cluster counts.
std::vector<int> assign_manifest_clusters(DatasetManifest& manifest, const ClusterModel& model,
                                          bool use_4d);

struct OptimizerConfig {
    double eta = 0.01;      // ascent step
    int iterations = 1000;  // N per patch
    int top_k = 3;
    double tau = 0.05;      // overlap filter threshold on IoU with b_orig
    int target_class = kClassStop;
    int batch_size = 4;
    int patch_resolution = 64;
    std::string optimizer = "sgd";  // or "adam"
    std::vector<int> snapshot_iters;
    uint64_t seed = 13;

    void validate() const;
    uint64_t content_hash() const;
};

// Decoded candidate retained by the overlap filter.
struct CandidateBox {
    int gy = 0, gx = 0;
    BBox box;
    double objectness = 0.0;
    std::vector<double> class_probs;
    double iou_with_orig = 0.0;

    double target_confidence(int target_class) const {
        return objectness * class_probs[static_cast<size_t>(target_class)];
    }
};

// All decoded cells whose box overlaps b_orig with IoU > tau.
std::vector<CandidateBox> filter_overlapping(const DetectorConfig& config, const RawPrediction& raw,
                                             const BBox& b_orig, double tau);

// Mean over the top-k candidates (by target confidence) of conf * IoU.
// Empty set yields 0; fewer than k candidates average over what exists.
double attack_objective(const std::vector<CandidateBox>& m, const BBox& b_orig, int target_class,
                        int k);

// Differentiable composite used inside the optimization loop: SIT-Net output
// warped onto the frame's screen quad over the stored image.
Image apply_patch(const FrameRecord& frame, const Image& patch, const SitNetParams& sitnet);

struct OptimizeResult {
    Image patch;                       // 8-bit quantized
    Image initial_patch;
    std::vector<double> curve;         // batch objective before each update
    std::map<int, double> snapshot_objectives;  // full-set objective after iteration i
    std::map<int, Image> snapshot_patches;
    double final_objective = 0.0;      // full-set objective of the returned patch
    uint64_t seed = 0;
};

// Algorithm: seeded random patch, N iterations of z <- z + eta * grad of the
// batch-mean objective, clamp to [0,1]. Candidate iterates (initial, best
// batch iterate, final) are re-scored on the full frame set and the best is
// returned.
OptimizeResult optimize_patch(const std::vector<const FrameRecord*>& frames,
                              const DetectorParams& detector, const SitNetParams& sitnet,
                              const OptimizerConfig& config);

// Full-set mean objective of a fixed patch (reported value, empty-M = 0).
double evaluate_objective(const std::vector<const FrameRecord*>& frames,
                          const DetectorParams& detector, const SitNetParams& sitnet, const Image& patch,
                          const OptimizerConfig& config);

enum class StaticStepMode { MatchedTotal, PerCluster };

struct PatchSet {
    std::vector<Image> cluster_patches;  // index = cluster id
    Image static_patch;
    ClusterModel clusters;
    bool use_4d_features = false;
    uint64_t config_hash = 0;
    std::vector<double> cluster_objectives;
    double static_objective = 0.0;
    std::vector<uint64_t> patch_seeds;
    uint64_t static_seed = 0;
};

struct BuildArtifacts {
    PatchSet set;
    std::vector<OptimizeResult> cluster_runs;
    OptimizeResult static_run;
};

// One optimized patch per cluster plus the all-data static baseline. The
// static patch trains for k*N steps in MatchedTotal mode, N otherwise.
BuildArtifacts build_patchset(const DatasetManifest& manifest, const ClusterModel& clusters,
                              const DetectorParams& detector, const SitNetParams& sitnet,
                              const OptimizerConfig& config, bool use_4d,
                              StaticStepMode static_mode = StaticStepMode::MatchedTotal);

const Image& select_patch(const PatchSet& set, const Pose2D& camera, const Pose2D& patch_car,
                          const Pose2D& target);

void save_cluster_model(const ClusterModel& model, bool use_4d, const std::string& path);
ClusterModel load_cluster_model(const std::string& path, bool* use_4d = nullptr);

void save_patchset(const PatchSet& set, const std::string& dir);
PatchSet load_patchset(const std::string& dir);

}  // namespace dynpatch
