#pragma once

#include <string>
#include <vector>

#include "dynpatch/autodiff.hpp"
#include "dynpatch/detector.hpp"
#include "dynpatch/scenesim.hpp"
#include "dynpatch/tensor_io.hpp"

namespace dynpatch {

// Screen image transformation network: two convolutions (3 -> hidden -> 3),
// shape-preserving padding, smooth [0,1] squashing at the head.
struct SitNetConfig {
    int hidden_channels = 16;
    int kernel = 3;
    double leaky_slope = 0.1;
    double softclip_k = 40.0;
    bool linear_head = false;  // diagnostic mode: skip the squashing

    int epochs = 50;
    double learning_rate = 0.001;
    double alpha = 0.02;  // perceptual weight
    double beta = 0.01;   // total-variation weight
    int batch_size = 16;
    double val_fraction = 0.1;
    double init_noise = 0.02;
    uint64_t seed = 11;
    int extractor_cut = 2;  // detector blocks used as the perceptual feature map

    void validate() const;
    uint64_t arch_hash() const;
};

struct SitNetParams {
    SitNetConfig config;
    std::vector<NamedTensor> weights;  // conv1.weight/bias, conv2.weight/bias
};

struct LossWeights {
    double alpha = 0.02;
    double beta = 0.01;
};

// Frozen feature map taken from the first `cut` blocks of a trained detector.
struct FeatureExtractor {
    DetectorConfig source;
    int cut = 0;
    std::vector<NamedTensor> weights;

    Tensor extract(const Tensor& chw) const;
    Tape::Var build(Tape& tape, Tape::Var input) const;
};

FeatureExtractor make_extractor(const DetectorParams& detector, int cut);

// Exact identity parameters (center-tap kernels, linear head).
SitNetParams sitnet_identity(const SitNetConfig& config);
// Training initialization: identity plus seeded noise.
SitNetParams sitnet_init(const SitNetConfig& config);

Tensor sit_forward(const SitNetParams& params, const Tensor& chw);
Image sit_forward(const SitNetParams& params, const Image& image);
Tape::Var sit_forward_tape(Tape& tape, const SitNetParams& params, Tape::Var input,
                           bool train_params, std::vector<Tape::Var>* weight_vars = nullptr);

// Value-level loss terms. Tensors are {C,H,W}; Image overloads convert.
double mse_loss(const Tensor& pred, const Tensor& target);
double mse_loss(const Image& pred, const Image& target);
double tv_loss(const Tensor& pred);
double tv_loss(const Image& pred);
double perceptual_loss(const FeatureExtractor& extractor, const Tensor& pred, const Tensor& target);
double perceptual_loss(const FeatureExtractor& extractor, const Image& pred, const Image& target);
// L_MSE + alpha * L_P + beta * L_TV, exactly compositional.
double combined_loss(const LossWeights& weights, const FeatureExtractor& extractor,
                     const Tensor& pred, const Tensor& target);
double combined_loss(const LossWeights& weights, const FeatureExtractor& extractor,
                     const Image& pred, const Image& target);

// Tape version of the combined loss for gradient work. When normalized_tv is
// set the TV term is divided by its difference count; the training loop uses
// that scaling so the smoothness prior does not swamp the data terms.
Tape::Var combined_loss_tape(Tape& tape, const LossWeights& weights, const FeatureExtractor& extractor,
                             Tape::Var pred, const Tensor& target, bool normalized_tv);

struct SitTrainReport {
    std::vector<double> train_loss;  // optimized objective per epoch
    std::vector<double> val_loss;
    double final_val_mse = 0.0;
    double baseline_val_mse = 0.0;  // predict-input-unchanged on the same split
    int train_pairs = 0;
    int val_pairs = 0;
};

SitNetParams train_sitnet(const std::vector<ScreenPair>& pairs, const FeatureExtractor& extractor,
                          const SitNetConfig& config, SitTrainReport* report = nullptr);

void save_sitnet(const SitNetParams& params, const std::string& base_path, uint64_t pairs_hash);
SitNetParams load_sitnet(const std::string& base_path);

}  // namespace dynpatch
