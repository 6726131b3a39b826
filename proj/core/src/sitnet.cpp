#include "dynpatch/sitnet.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dynpatch/common.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

using nlohmann::ordered_json;

void SitNetConfig::validate() const {
    if (hidden_channels < 3) throw ValidationError("sitnet: hidden channels must be >= 3");
    if (kernel % 2 == 0 || kernel < 1) throw ValidationError("sitnet: kernel must be odd");
    if (alpha < 0.0 || beta < 0.0) throw ValidationError("sitnet: loss weights must be >= 0");
    if (softclip_k <= 0.0) throw ValidationError("sitnet: softclip_k must be positive");
    if (epochs < 0 || batch_size < 1) throw ValidationError("sitnet: bad training setup");
    if (extractor_cut < 1) throw ValidationError("sitnet: extractor cut must be >= 1");
}

uint64_t SitNetConfig::arch_hash() const {
    std::string desc = "sit/" + std::to_string(hidden_channels) + "/k" + std::to_string(kernel) +
                       "/lin" + std::to_string(linear_head ? 1 : 0);
    return fnv1a64(desc);
}

// ---------------------------------------------------------------------------
// extractor

FeatureExtractor make_extractor(const DetectorParams& detector, int cut) {
    if (cut < 1 || static_cast<size_t>(cut) > detector.config.channels.size())
        throw ValidationError("extractor: cut out of range");
    FeatureExtractor ex;
    ex.source = detector.config;
    ex.cut = cut;
    for (int i = 0; i < cut; ++i) {
        ex.weights.push_back(detector.weights[static_cast<size_t>(2 * i)]);
        ex.weights.push_back(detector.weights[static_cast<size_t>(2 * i + 1)]);
    }
    return ex;
}

Tape::Var FeatureExtractor::build(Tape& tape, Tape::Var input) const {
    Tape::Var x = input;
    for (int i = 0; i < cut; ++i) {
        Tape::Var w = tape.constant(weights[static_cast<size_t>(2 * i)].tensor);
        Tape::Var b = tape.constant(weights[static_cast<size_t>(2 * i + 1)].tensor);
        int pad = source.dilations[static_cast<size_t>(i)] * (source.kernel - 1) / 2;
        x = tape.conv2d(x, w, b, source.strides[static_cast<size_t>(i)], pad, source.dilations[static_cast<size_t>(i)]);
        x = tape.leaky_relu(x, source.leaky_slope);
    }
    return x;
}

Tensor FeatureExtractor::extract(const Tensor& chw) const {
    Tape tape;
    Tape::Var in = tape.constant(chw);
    return tape.value(build(tape, in));
}

// ---------------------------------------------------------------------------
// parameters

SitNetParams sitnet_identity(const SitNetConfig& config) {
    config.validate();
    SitNetParams p;
    p.config = config;
    p.config.linear_head = true;
    const int h = config.hidden_channels, k = config.kernel, c = k / 2;
    Tensor w1({h, 3, k, k});
    for (int oc = 0; oc < 3; ++oc)
        w1.data[((static_cast<size_t>(oc) * 3 + oc) * k + c) * k + c] = 1.0;
    Tensor b1({h});
    Tensor w2({3, h, k, k});
    for (int oc = 0; oc < 3; ++oc)
        w2.data[((static_cast<size_t>(oc) * h + oc) * k + c) * k + c] = 1.0;
    Tensor b2({3});
    p.weights = {{"conv1.weight", std::move(w1)},
                 {"conv1.bias", std::move(b1)},
                 {"conv2.weight", std::move(w2)},
                 {"conv2.bias", std::move(b2)}};
    return p;
}

SitNetParams sitnet_init(const SitNetConfig& config) {
    SitNetParams p = sitnet_identity(config);
    p.config = config;
    Rng rng(derive_seed(config.seed, "sitnet-init"));
    for (auto& nt : p.weights)
        if (nt.name.ends_with("weight"))
            for (auto& v : nt.tensor.data) v += rng.normal(0.0, config.init_noise);
    return p;
}

Tape::Var sit_forward_tape(Tape& tape, const SitNetParams& params, Tape::Var input,
                           bool train_params, std::vector<Tape::Var>* weight_vars) {
    const Tensor& in = tape.value(input);
    if (in.shape.size() != 3 || in.shape[0] != 3)
        throw ValidationError("sitnet: input must be {3,H,W}");
    std::vector<Tape::Var> wv;
    for (const auto& nt : params.weights) wv.push_back(tape.input(nt.tensor, train_params));
    if (weight_vars) *weight_vars = wv;
    const int pad = params.config.kernel / 2;
    Tape::Var x = tape.conv2d(input, wv[0], wv[1], 1, pad, 1);
    x = tape.leaky_relu(x, params.config.leaky_slope);
    x = tape.conv2d(x, wv[2], wv[3], 1, pad, 1);
    if (!params.config.linear_head) x = tape.softclip01(x, params.config.softclip_k);
    return x;
}

Tensor sit_forward(const SitNetParams& params, const Tensor& chw) {
    Tape tape;
    Tape::Var in = tape.constant(chw);
    return tape.value(sit_forward_tape(tape, params, in, false));
}

Image sit_forward(const SitNetParams& params, const Image& image) {
    return chw_to_image(sit_forward(params, image_to_chw(image)));
}

// ---------------------------------------------------------------------------
// losses

double mse_loss(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) throw ValidationError("mse_loss: shape mismatch");
    if (pred.numel() == 0) throw ValidationError("mse_loss: empty input");
    double acc = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        double d = pred.data[i] - target.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

double mse_loss(const Image& pred, const Image& target) {
    return mse_loss(image_to_chw(pred), image_to_chw(target));
}

double tv_loss(const Tensor& pred) {
    if (pred.shape.size() != 3) throw ValidationError("tv_loss: expected {C,H,W}");
    const int C = pred.shape[0], H = pred.shape[1], W = pred.shape[2];
    double acc = 0.0;
    for (int c = 0; c < C; ++c) {
        const double* p = pred.data.data() + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x + 1 < W; ++x) acc += std::abs(p[y * W + x + 1] - p[y * W + x]);
        for (int y = 0; y + 1 < H; ++y)
            for (int x = 0; x < W; ++x) acc += std::abs(p[(y + 1) * W + x] - p[y * W + x]);
    }
    return acc;
}

double tv_loss(const Image& pred) { return tv_loss(image_to_chw(pred)); }

size_t tv_term_count(int c, int h, int w) {
    return static_cast<size_t>(c) * (static_cast<size_t>(h) * (w - 1) + static_cast<size_t>(h - 1) * w);
}

double perceptual_loss(const FeatureExtractor& extractor, const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target)) throw ValidationError("perceptual_loss: shape mismatch");
    return mse_loss(extractor.extract(pred), extractor.extract(target));
}

double perceptual_loss(const FeatureExtractor& extractor, const Image& pred, const Image& target) {
    return perceptual_loss(extractor, image_to_chw(pred), image_to_chw(target));
}

double combined_loss(const LossWeights& weights, const FeatureExtractor& extractor,
                     const Tensor& pred, const Tensor& target) {
    if (weights.alpha < 0.0 || weights.beta < 0.0)
        throw ValidationError("combined_loss: weights must be >= 0");
    return mse_loss(pred, target) + weights.alpha * perceptual_loss(extractor, pred, target) +
           weights.beta * tv_loss(pred);
}

double combined_loss(const LossWeights& weights, const FeatureExtractor& extractor,
                     const Image& pred, const Image& target) {
    return combined_loss(weights, extractor, image_to_chw(pred), image_to_chw(target));
}

Tape::Var combined_loss_tape(Tape& tape, const LossWeights& weights, const FeatureExtractor& extractor,
                             Tape::Var pred, const Tensor& target, bool normalized_tv) {
    const Tensor& pv = tape.value(pred);
    if (!pv.same_shape(target)) throw ValidationError("combined_loss: shape mismatch");
    Tape::Var l_mse = tape.mse_to(pred, target);
    Tape::Var feats = extractor.build(tape, pred);
    Tape::Var l_p = tape.mse_to(feats, extractor.extract(target));
    Tape::Var l_tv = tape.tv_l1(pred);
    double tv_scale = weights.beta;
    if (normalized_tv)
        tv_scale /= static_cast<double>(tv_term_count(pv.shape[0], pv.shape[1], pv.shape[2]));
    return tape.weighted_sum({l_mse, l_p, l_tv}, {1.0, weights.alpha, tv_scale});
}

// ---------------------------------------------------------------------------
// training

namespace {

struct SitAdam {
    std::vector<Tensor> m, v;
    int64_t step = 0;

    void init(const std::vector<NamedTensor>& weights) {
        for (const auto& nt : weights) {
            m.emplace_back(nt.tensor.shape);
            v.emplace_back(nt.tensor.shape);
        }
    }
    void update(std::vector<NamedTensor>& weights, const std::vector<Tensor>& grads, double lr) {
        static constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++step;
        double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        for (size_t i = 0; i < weights.size(); ++i) {
            auto& w = weights[i].tensor.data;
            const auto& g = grads[i].data;
            for (size_t j = 0; j < w.size(); ++j) {
                m[i].data[j] = b1 * m[i].data[j] + (1.0 - b1) * g[j];
                v[i].data[j] = b2 * v[i].data[j] + (1.0 - b2) * g[j] * g[j];
                w[j] -= lr * (m[i].data[j] / c1) / (std::sqrt(v[i].data[j] / c2) + eps);
            }
        }
    }
};

double pair_loss_and_grads(const SitNetParams& params, const FeatureExtractor& extractor,
                           const Tensor& displayed, const Tensor& captured,
                           std::vector<Tensor>* grads) {
    Tape tape;
    Tape::Var in = tape.constant(displayed);
    std::vector<Tape::Var> wv;
    Tape::Var out = sit_forward_tape(tape, params, in, grads != nullptr, &wv);
    LossWeights lw{params.config.alpha, params.config.beta};
    Tape::Var loss = combined_loss_tape(tape, lw, extractor, out, captured, /*normalized_tv=*/true);
    double value = tape.value(loss).data[0];
    if (grads) {
        tape.backward(loss);
        grads->clear();
        for (Tape::Var w : wv) grads->push_back(tape.grad(w));
    }
    return value;
}

}  // namespace

SitNetParams train_sitnet(const std::vector<ScreenPair>& pairs, const FeatureExtractor& extractor,
                          const SitNetConfig& config, SitTrainReport* report) {
    config.validate();
    if (pairs.empty()) throw ValidationError("train_sitnet: empty pair set");

    std::vector<Tensor> displayed, captured;
    displayed.reserve(pairs.size());
    captured.reserve(pairs.size());
    for (const auto& p : pairs) {
        displayed.push_back(image_to_chw(p.displayed.to_image()));
        captured.push_back(image_to_chw(p.captured.to_image()));
    }

    Rng rng(derive_seed(config.seed, "sitnet-train"));
    std::vector<size_t> perm(pairs.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    size_t n_val = std::min(pairs.size() - 1,
                            static_cast<size_t>(std::llround(config.val_fraction * static_cast<double>(pairs.size()))));
    std::vector<size_t> val_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> train_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());

    SitNetParams params = sitnet_init(config);
    SitAdam adam;
    adam.init(params.weights);

    if (report) {
        report->train_pairs = static_cast<int>(train_idx.size());
        report->val_pairs = static_cast<int>(val_idx.size());
        report->train_loss.clear();
        report->val_loss.clear();
    }

    const int B = config.batch_size;
    std::vector<std::vector<Tensor>> batch_grads(static_cast<size_t>(B));
    std::vector<double> batch_losses(static_cast<size_t>(B));
    LossWeights lw{config.alpha, config.beta};
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(B)) {
            size_t n = std::min(static_cast<size_t>(B), train_idx.size() - start);
            parallel_for(static_cast<int64_t>(n), [&](int64_t k) {
                size_t idx = train_idx[start + static_cast<size_t>(k)];
                batch_losses[static_cast<size_t>(k)] = pair_loss_and_grads(
                    params, extractor, displayed[idx], captured[idx], &batch_grads[static_cast<size_t>(k)]);
            });
            std::vector<Tensor> total;
            for (size_t i = 0; i < params.weights.size(); ++i) {
                Tensor g(params.weights[i].tensor.shape);
                for (size_t k = 0; k < n; ++k)
                    for (size_t j = 0; j < g.data.size(); ++j) g.data[j] += batch_grads[k][i].data[j];
                for (auto& v : g.data) v /= static_cast<double>(n);
                total.push_back(std::move(g));
            }
            adam.update(params.weights, total, config.learning_rate);
            for (size_t k = 0; k < n; ++k) epoch_loss += batch_losses[k];
            batches += static_cast<int>(n);
        }
        if (report) {
            report->train_loss.push_back(epoch_loss / std::max(1, batches));
            double vl = 0.0;
            for (size_t idx : val_idx)
                vl += pair_loss_and_grads(params, extractor, displayed[idx], captured[idx], nullptr);
            report->val_loss.push_back(val_idx.empty() ? 0.0 : vl / static_cast<double>(val_idx.size()));
        }
    }

    if (report) {
        double mse_sum = 0.0, base_sum = 0.0;
        for (size_t idx : val_idx) {
            Tensor pred = sit_forward(params, displayed[idx]);
            mse_sum += mse_loss(pred, captured[idx]);
            base_sum += mse_loss(displayed[idx], captured[idx]);
        }
        (void)lw;
        report->final_val_mse = val_idx.empty() ? 0.0 : mse_sum / static_cast<double>(val_idx.size());
        report->baseline_val_mse = val_idx.empty() ? 0.0 : base_sum / static_cast<double>(val_idx.size());
    }
    return params;
}

// ---------------------------------------------------------------------------
// persistence

void save_sitnet(const SitNetParams& params, const std::string& base_path, uint64_t pairs_hash) {
    save_tensors(base_path + ".dpt", params.weights);
    ordered_json j;
    j["format"] = "dynpatch-sitnet";
    j["version"] = 1;
    j["config"] = {{"hidden_channels", params.config.hidden_channels},
                   {"kernel", params.config.kernel},
                   {"leaky_slope", params.config.leaky_slope},
                   {"softclip_k", params.config.softclip_k},
                   {"linear_head", params.config.linear_head},
                   {"epochs", params.config.epochs},
                   {"learning_rate", params.config.learning_rate},
                   {"alpha", params.config.alpha},
                   {"beta", params.config.beta},
                   {"batch_size", params.config.batch_size},
                   {"val_fraction", params.config.val_fraction},
                   {"init_noise", params.config.init_noise},
                   {"seed", params.config.seed},
                   {"extractor_cut", params.config.extractor_cut}};
    j["training_seed"] = params.config.seed;
    j["pairs_hash"] = hash_to_hex(pairs_hash);
    std::ofstream out(base_path + ".json", std::ios::trunc);
    if (!out) throw IoError("save_sitnet: cannot write sidecar");
    out << j.dump(2) << "\n";
}

SitNetParams load_sitnet(const std::string& base_path) {
    std::ifstream in(base_path + ".json");
    if (!in) throw IoError("load_sitnet: cannot open sidecar " + base_path + ".json");
    ordered_json j = ordered_json::parse(in);
    if (j.value("format", "") != "dynpatch-sitnet") throw IoError("load_sitnet: unexpected sidecar format");
    SitNetParams params;
    const auto& c = j.at("config");
    params.config.hidden_channels = c.at("hidden_channels");
    params.config.kernel = c.at("kernel");
    params.config.leaky_slope = c.at("leaky_slope");
    params.config.softclip_k = c.at("softclip_k");
    params.config.linear_head = c.at("linear_head");
    params.config.epochs = c.at("epochs");
    params.config.learning_rate = c.at("learning_rate");
    params.config.alpha = c.at("alpha");
    params.config.beta = c.at("beta");
    params.config.batch_size = c.at("batch_size");
    params.config.val_fraction = c.at("val_fraction");
    params.config.init_noise = c.at("init_noise");
    params.config.seed = c.at("seed");
    params.config.extractor_cut = c.at("extractor_cut");
    params.config.validate();
    params.weights = load_tensors(base_path + ".dpt");
    return params;
}

}  // namespace dynpatch
