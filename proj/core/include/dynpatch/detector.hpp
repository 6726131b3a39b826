#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dynpatch/autodiff.hpp"
#include "dynpatch/scenesim.hpp"
#include "dynpatch/tensor_io.hpp"

namespace dynpatch {

// Single-stage grid detector: a stack of strided conv blocks down to an SxS
// grid, one anchor per cell, 5+C channels per cell
// (objectness logit, tx, ty, tw, th, class logits).
struct DetectorConfig {
    int image_side = 256;
    int grid = 16;
    int num_classes = kNumClasses;
    std::vector<int> channels{8, 16, 24, 32, 40, 40};
    std::vector<int> strides{2, 2, 2, 2, 1, 1};
    std::vector<int> dilations{1, 1, 1, 1, 2, 1};
    int kernel = 3;
    double anchor_px = 36.0;
    double leaky_slope = 0.1;
    double size_logit_clamp = 6.0;  // |tw|,|th| clamp inside exp

    // training
    double learning_rate = 1e-3;
    int epochs = 60;
    int batch_size = 8;
    double lambda_box = 2.0;
    double lambda_obj_pos = 8.0;
    double lambda_cls = 1.0;
    double val_fraction = 0.15;
    uint64_t seed = 7;

    int cell_pixels() const { return image_side / grid; }
    int raw_channels() const { return 5 + num_classes; }
    void validate() const;
    uint64_t arch_hash() const;
};

struct DetectorParams {
    DetectorConfig config;
    std::vector<NamedTensor> weights;
};

struct RawPrediction {
    int grid = 0;
    int channels = 0;  // 5 + C
    Tensor data;       // {5+C, S, S}
};

struct Detection {
    BBox box;
    double objectness = 0.0;
    std::vector<double> class_probs;
    int predicted_class = -1;

    double confidence() const { return objectness * class_probs[static_cast<size_t>(predicted_class)]; }
    double class_confidence(int cls) const { return objectness * class_probs[static_cast<size_t>(cls)]; }
};

DetectorParams detector_init(const DetectorConfig& config);

// Forward pass helpers shared by training, attack and diagnostics. Weight
// vars are created with requires_grad = train_params; the image var is
// supplied by the caller.
struct DetectorTapeNet {
    std::vector<Tape::Var> weight_vars;      // interleaved w,b per layer
    std::vector<Tape::Var> activations;      // post-activation per block
    Tape::Var raw = -1;                      // {5+C,S,S}
};
DetectorTapeNet detector_forward_tape(Tape& tape, const DetectorParams& params, Tape::Var image,
                                      bool train_params);

RawPrediction detector_forward(const DetectorParams& params, const Image& image);
RawPrediction detector_forward(const DetectorParams& params, const Tensor& chw);

// Decoded box of one cell from raw channel values (value-level).
BBox decode_cell_box(const DetectorConfig& config, const Tensor& raw, int gy, int gx);
// Inverse of decode for the cell containing the box center.
void encode_box(const DetectorConfig& config, const BBox& box, int& gy, int& gx, double& tx,
                double& ty, double& tw, double& th);

std::vector<Detection> decode_detections(const DetectorConfig& config, const RawPrediction& raw,
                                         double conf_threshold, double nms_iou);

struct TrainReport {
    std::vector<double> epoch_loss;
    double holdout_map = 0.0;
    std::vector<double> per_class_ap;  // indexed by class id, -1 when absent
    int train_frames = 0;
    int holdout_frames = 0;
};

DetectorParams train_detector(const DatasetManifest& dataset, const DetectorConfig& config,
                              TrainReport* report = nullptr);

// d(objective)/d(image); objective builds a scalar from the raw prediction.
using RawObjective = std::function<Tape::Var(Tape&, Tape::Var raw)>;
Tensor image_gradient(const DetectorParams& params, const Image& image, const RawObjective& objective);

// First principal component of a conv activation, projected to a spatial
// map, min-max normalized and upsampled to image resolution. {H,W} in [0,1].
Tensor eigencam_heatmap(const DetectorParams& params, const Image& image, int layer_index);

struct GroundTruth {
    int cls;
    BBox box;
};
std::vector<GroundTruth> frame_ground_truth(const FrameRecord& frame);

struct MapResult {
    double map = 0.0;
    std::vector<double> per_class_ap;  // -1 when class absent from ground truth
};
MapResult evaluate_map(const DetectorParams& params, const std::vector<const FrameRecord*>& frames,
                       double iou_threshold = 0.5, double conf_threshold = 0.1, double nms_iou = 0.5);

void save_detector(const DetectorParams& params, const std::string& base_path,
                   uint64_t dataset_hash, double holdout_map);
DetectorParams load_detector(const std::string& base_path);

}  // namespace dynpatch
