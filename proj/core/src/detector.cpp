#include "dynpatch/detector.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dynpatch/common.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

using nlohmann::ordered_json;

namespace {

inline double logit(double p) {
    p = std::clamp(p, 1e-9, 1.0 - 1e-9);
    return std::log(p / (1.0 - p));
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

void DetectorConfig::validate() const {
    if (image_side < 32 || grid < 2) throw ValidationError("detector: bad image/grid size");
    if (channels.empty() || channels.size() != strides.size() || channels.size() != dilations.size())
        throw ValidationError("detector: channels/strides/dilations must align");
    if (kernel % 2 == 0) throw ValidationError("detector: kernel must be odd");
    int downsample = 1;
    for (int s : strides) downsample *= s;
    if (grid * downsample != image_side)
        throw ValidationError("detector: strides do not reduce image to the grid");
    if (num_classes < 1) throw ValidationError("detector: need at least one class");
    if (anchor_px <= 0) throw ValidationError("detector: anchor must be positive");
    if (batch_size < 1 || epochs < 0) throw ValidationError("detector: bad training setup");
}

uint64_t DetectorConfig::arch_hash() const {
    std::string desc = std::to_string(image_side) + "/" + std::to_string(grid) + "/" +
                       std::to_string(num_classes) + "/k" + std::to_string(kernel);
    for (size_t i = 0; i < channels.size(); ++i)
        desc += "|" + std::to_string(channels[i]) + "s" + std::to_string(strides[i]) + "d" +
                std::to_string(dilations[i]);
    desc += "|a" + std::to_string(anchor_px);
    return fnv1a64(desc);
}

DetectorParams detector_init(const DetectorConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, "detector-init"));
    DetectorParams params;
    params.config = config;
    int in_ch = 3;
    for (size_t i = 0; i < config.channels.size(); ++i) {
        int oc = config.channels[i];
        Tensor w({oc, in_ch, config.kernel, config.kernel});
        double std_dev = std::sqrt(2.0 / (in_ch * config.kernel * config.kernel));
        for (auto& v : w.data) v = rng.normal(0.0, std_dev);
        Tensor b({oc});
        params.weights.push_back({"conv" + std::to_string(i) + ".weight", std::move(w)});
        params.weights.push_back({"conv" + std::to_string(i) + ".bias", std::move(b)});
        in_ch = oc;
    }
    Tensor hw({config.raw_channels(), in_ch, 1, 1});
    double std_dev = std::sqrt(2.0 / in_ch);
    for (auto& v : hw.data) v = rng.normal(0.0, std_dev);
    Tensor hb({config.raw_channels()});
    hb.data[0] = -2.0;  // start objectness low
    params.weights.push_back({"head.weight", std::move(hw)});
    params.weights.push_back({"head.bias", std::move(hb)});
    return params;
}

DetectorTapeNet detector_forward_tape(Tape& tape, const DetectorParams& params, Tape::Var image,
                                      bool train_params) {
    const DetectorConfig& cfg = params.config;
    const Tensor& img = tape.value(image);
    if (img.shape.size() != 3 || img.shape[0] != 3 || img.shape[1] != cfg.image_side ||
        img.shape[2] != cfg.image_side)
        throw ValidationError("detector: image shape mismatch");

    DetectorTapeNet net;
    for (const auto& nt : params.weights)
        net.weight_vars.push_back(tape.input(nt.tensor, train_params));

    Tape::Var x = image;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        int pad = cfg.dilations[i] * (cfg.kernel - 1) / 2;
        x = tape.conv2d(x, net.weight_vars[2 * i], net.weight_vars[2 * i + 1], cfg.strides[i], pad,
                        cfg.dilations[i]);
        x = tape.leaky_relu(x, cfg.leaky_slope);
        net.activations.push_back(x);
    }
    size_t hi = cfg.channels.size();
    net.raw = tape.conv2d(x, net.weight_vars[2 * hi], net.weight_vars[2 * hi + 1], 1, 0, 1);
    return net;
}

RawPrediction detector_forward(const DetectorParams& params, const Tensor& chw) {
    Tape tape;
    Tape::Var image = tape.constant(chw);
    DetectorTapeNet net = detector_forward_tape(tape, params, image, false);
    RawPrediction out;
    out.grid = params.config.grid;
    out.channels = params.config.raw_channels();
    out.data = tape.value(net.raw);
    return out;
}

RawPrediction detector_forward(const DetectorParams& params, const Image& image) {
    return detector_forward(params, image_to_chw(image));
}

BBox decode_cell_box(const DetectorConfig& config, const Tensor& raw, int gy, int gx) {
    const int S = config.grid;
    auto at = [&](int ch) { return raw.data[(static_cast<size_t>(ch) * S + gy) * S + gx]; };
    const double cell = config.cell_pixels();
    double cx = (gx + sigmoid(at(1))) * cell;
    double cy = (gy + sigmoid(at(2))) * cell;
    double c = config.size_logit_clamp;
    double w = config.anchor_px * std::exp(std::clamp(at(3), -c, c));
    double h = config.anchor_px * std::exp(std::clamp(at(4), -c, c));
    return BBox{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

void encode_box(const DetectorConfig& config, const BBox& box, int& gy, int& gx, double& tx,
                double& ty, double& tw, double& th) {
    box.validate("encode box");
    const double cell = config.cell_pixels();
    Point2 c = box.center();
    gx = std::clamp(static_cast<int>(std::floor(c.x / cell)), 0, config.grid - 1);
    gy = std::clamp(static_cast<int>(std::floor(c.y / cell)), 0, config.grid - 1);
    tx = logit(c.x / cell - gx);
    ty = logit(c.y / cell - gy);
    tw = std::log(box.width() / config.anchor_px);
    th = std::log(box.height() / config.anchor_px);
}

std::vector<Detection> decode_detections(const DetectorConfig& config, const RawPrediction& raw,
                                         double conf_threshold, double nms_iou) {
    if (conf_threshold < 0.0 || conf_threshold > 1.0 || nms_iou < 0.0 || nms_iou > 1.0)
        throw ValidationError("decode: thresholds must be in [0,1]");
    const int S = config.grid;
    const int C = config.num_classes;
    std::vector<Detection> cand;
    for (int gy = 0; gy < S; ++gy) {
        for (int gx = 0; gx < S; ++gx) {
            auto at = [&](int ch) { return raw.data.data[(static_cast<size_t>(ch) * S + gy) * S + gx]; };
            Detection d;
            d.objectness = sigmoid(at(0));
            d.class_probs.resize(static_cast<size_t>(C));
            int best = 0;
            for (int c = 0; c < C; ++c) {
                d.class_probs[static_cast<size_t>(c)] = sigmoid(at(5 + c));
                if (d.class_probs[static_cast<size_t>(c)] > d.class_probs[static_cast<size_t>(best)]) best = c;
            }
            d.predicted_class = best;
            if (d.confidence() < conf_threshold) continue;
            d.box = decode_cell_box(config, raw.data, gy, gx);
            cand.push_back(std::move(d));
        }
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence() > b.confidence(); });
    std::vector<Detection> kept;
    std::vector<bool> removed(cand.size(), false);
    for (size_t i = 0; i < cand.size(); ++i) {
        if (removed[i]) continue;
        kept.push_back(cand[i]);
        for (size_t j = i + 1; j < cand.size(); ++j) {
            if (removed[j] || cand[j].predicted_class != cand[i].predicted_class) continue;
            if (iou(cand[i].box, cand[j].box) > nms_iou) removed[j] = true;
        }
    }
    return kept;
}

// ---------------------------------------------------------------------------
// training

std::vector<GroundTruth> frame_ground_truth(const FrameRecord& frame) {
    std::vector<GroundTruth> gt;
    if (frame.sign_visible) gt.push_back({frame.sign_class, frame.sign_box});
    if (frame.car_visible) gt.push_back({kClassCar, frame.car_box});
    return gt;
}

namespace {

struct FrameTargets {
    Tensor bce_t, bce_w, xy_t, xy_w, wh_t, wh_w;
};

FrameTargets make_targets(const DetectorConfig& cfg, const FrameRecord& frame) {
    const int S = cfg.grid;
    const int K = cfg.raw_channels();
    std::vector<int> shape{K, S, S};
    FrameTargets t{Tensor(shape), Tensor(shape), Tensor(shape), Tensor(shape), Tensor(shape), Tensor(shape)};

    auto idx = [&](int ch, int gy, int gx) { return (static_cast<size_t>(ch) * S + gy) * S + gx; };
    const double neg_w = 1.0 / (S * S);
    for (int gy = 0; gy < S; ++gy)
        for (int gx = 0; gx < S; ++gx) t.bce_w.data[idx(0, gy, gx)] = neg_w;

    auto gts = frame_ground_truth(frame);
    struct Match {
        int gy, gx, cls;
        double tx, ty, tw, th;
    };
    std::vector<Match> matches;
    std::vector<bool> used(static_cast<size_t>(S) * S, false);
    for (const auto& g : gts) {
        int gy, gx;
        double tx, ty, tw, th;
        encode_box(cfg, g.box, gy, gx, tx, ty, tw, th);
        if (used[static_cast<size_t>(gy) * S + gx]) continue;
        used[static_cast<size_t>(gy) * S + gx] = true;
        matches.push_back({gy, gx, g.cls, tx, ty, tw, th});
    }
    if (matches.empty()) return t;

    const double inv_pos = 1.0 / static_cast<double>(matches.size());
    for (const auto& m : matches) {
        t.bce_t.data[idx(0, m.gy, m.gx)] = 1.0;
        t.bce_w.data[idx(0, m.gy, m.gx)] = cfg.lambda_obj_pos / (S * S);
        for (int c = 0; c < cfg.num_classes; ++c) {
            t.bce_t.data[idx(5 + c, m.gy, m.gx)] = c == m.cls ? 1.0 : 0.0;
            t.bce_w.data[idx(5 + c, m.gy, m.gx)] = cfg.lambda_cls * inv_pos / cfg.num_classes;
        }
        t.xy_t.data[idx(1, m.gy, m.gx)] = sigmoid(m.tx);
        t.xy_t.data[idx(2, m.gy, m.gx)] = sigmoid(m.ty);
        t.xy_w.data[idx(1, m.gy, m.gx)] = cfg.lambda_box * inv_pos;
        t.xy_w.data[idx(2, m.gy, m.gx)] = cfg.lambda_box * inv_pos;
        double c = cfg.size_logit_clamp;
        t.wh_t.data[idx(3, m.gy, m.gx)] = std::clamp(m.tw, -c, c);
        t.wh_t.data[idx(4, m.gy, m.gx)] = std::clamp(m.th, -c, c);
        t.wh_w.data[idx(3, m.gy, m.gx)] = cfg.lambda_box * inv_pos;
        t.wh_w.data[idx(4, m.gy, m.gx)] = cfg.lambda_box * inv_pos;
    }
    return t;
}

double frame_loss_and_grads(const DetectorParams& params, const FrameRecord& frame,
                            std::vector<Tensor>* grads) {
    Tape tape;
    Tape::Var image = tape.constant(image_to_chw(frame.image.to_image()));
    DetectorTapeNet net = detector_forward_tape(tape, params, image, grads != nullptr);
    FrameTargets t = make_targets(params.config, frame);
    Tape::Var bce = tape.bce_logits(net.raw, std::move(t.bce_t), std::move(t.bce_w));
    Tape::Var sig = tape.sigmoid(net.raw);
    Tape::Var xy = tape.weighted_sse(sig, std::move(t.xy_t), std::move(t.xy_w));
    Tape::Var wh = tape.weighted_sse(net.raw, std::move(t.wh_t), std::move(t.wh_w));
    Tape::Var loss = tape.weighted_sum({bce, xy, wh}, {1.0, 1.0, 1.0});
    double value = tape.value(loss).data[0];
    if (grads) {
        tape.backward(loss);
        grads->clear();
        for (Tape::Var wv : net.weight_vars) grads->push_back(tape.grad(wv));
    }
    return value;
}

struct AdamState {
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
            auto& mi = m[i].data;
            auto& vi = v[i].data;
            const auto& g = grads[i].data;
            for (size_t j = 0; j < w.size(); ++j) {
                mi[j] = b1 * mi[j] + (1.0 - b1) * g[j];
                vi[j] = b2 * vi[j] + (1.0 - b2) * g[j] * g[j];
                w[j] -= lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
            }
        }
    }
};

}  // namespace

DetectorParams train_detector(const DatasetManifest& dataset, const DetectorConfig& config,
                              TrainReport* report) {
    config.validate();
    if (dataset.frames.empty()) throw ValidationError("train_detector: empty dataset");
    std::vector<bool> seen(static_cast<size_t>(config.num_classes), false);
    for (const auto& f : dataset.frames)
        for (const auto& g : frame_ground_truth(f)) seen[static_cast<size_t>(g.cls)] = true;
    for (int c = 0; c < config.num_classes; ++c)
        if (!seen[static_cast<size_t>(c)])
            throw ValidationError(std::string("train_detector: class missing from dataset: ") + class_name(c));

    Rng rng(derive_seed(config.seed, "detector-train"));
    std::vector<size_t> perm(dataset.frames.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    size_t n_val = std::min(dataset.frames.size() - 1,
                            static_cast<size_t>(std::llround(config.val_fraction * static_cast<double>(dataset.frames.size()))));
    std::vector<size_t> val_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> train_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    if (train_idx.empty()) throw ValidationError("train_detector: no training frames after split");

    DetectorParams params = detector_init(config);
    AdamState adam;
    adam.init(params.weights);

    if (report) {
        report->train_frames = static_cast<int>(train_idx.size());
        report->holdout_frames = static_cast<int>(val_idx.size());
        report->epoch_loss.clear();
    }

    const int B = config.batch_size;
    std::vector<std::vector<Tensor>> batch_grads(static_cast<size_t>(B));
    std::vector<double> batch_losses(static_cast<size_t>(B));
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(B)) {
            size_t n = std::min(static_cast<size_t>(B), train_idx.size() - start);
            parallel_for(static_cast<int64_t>(n), [&](int64_t k) {
                const FrameRecord& f = dataset.frames[train_idx[start + static_cast<size_t>(k)]];
                batch_losses[static_cast<size_t>(k)] =
                    frame_loss_and_grads(params, f, &batch_grads[static_cast<size_t>(k)]);
            });
            std::vector<Tensor> total;
            for (size_t i = 0; i < params.weights.size(); ++i) {
                Tensor g(params.weights[i].tensor.shape);
                for (size_t k = 0; k < n; ++k) {
                    const auto& gk = batch_grads[k][i].data;
                    for (size_t j = 0; j < g.data.size(); ++j) g.data[j] += gk[j];
                }
                for (auto& v : g.data) v /= static_cast<double>(n);
                total.push_back(std::move(g));
            }
            adam.update(params.weights, total, config.learning_rate);
            double bl = 0.0;
            for (size_t k = 0; k < n; ++k) bl += batch_losses[k];
            epoch_loss += bl / static_cast<double>(n);
            ++n_batches;
        }
        if (report) report->epoch_loss.push_back(epoch_loss / std::max(1, n_batches));
    }

    if (report) {
        std::vector<const FrameRecord*> val_frames;
        for (size_t i : val_idx) val_frames.push_back(&dataset.frames[i]);
        if (!val_frames.empty()) {
            MapResult mr = evaluate_map(params, val_frames);
            report->holdout_map = mr.map;
            report->per_class_ap = mr.per_class_ap;
        }
    }
    return params;
}

Tensor image_gradient(const DetectorParams& params, const Image& image, const RawObjective& objective) {
    Tape tape;
    Tape::Var img = tape.input(image_to_chw(image), true);
    DetectorTapeNet net = detector_forward_tape(tape, params, img, false);
    Tape::Var obj = objective(tape, net.raw);
    if (obj < 0 || static_cast<size_t>(obj) >= tape.size())
        throw ValidationError("image_gradient: objective returned an invalid node");
    if (tape.value(obj).numel() != 1)
        throw ValidationError("image_gradient: objective must produce a scalar");
    if (!tape.requires_grad(obj)) {
        // objective ignores the prediction entirely: gradient is identically zero
        return Tensor(tape.value(img).shape);
    }
    tape.backward(obj);
    return tape.grad(img);
}

Tensor eigencam_heatmap(const DetectorParams& params, const Image& image, int layer_index) {
    if (layer_index < 0 || static_cast<size_t>(layer_index) >= params.config.channels.size())
        throw ValidationError("eigencam: layer index out of range");
    Tape tape;
    Tape::Var img = tape.constant(image_to_chw(image));
    DetectorTapeNet net = detector_forward_tape(tape, params, img, false);
    const Tensor& act = tape.value(net.activations[static_cast<size_t>(layer_index)]);
    const int C = act.shape[0], H = act.shape[1], W = act.shape[2];
    const size_t plane = static_cast<size_t>(H) * W;

    // dominant left singular vector via power iteration on A A^T (C x C)
    std::vector<double> gram(static_cast<size_t>(C) * C, 0.0);
    for (int a = 0; a < C; ++a)
        for (int b = a; b < C; ++b) {
            double acc = 0.0;
            const double* pa = act.data.data() + static_cast<size_t>(a) * plane;
            const double* pb = act.data.data() + static_cast<size_t>(b) * plane;
            for (size_t i = 0; i < plane; ++i) acc += pa[i] * pb[i];
            gram[static_cast<size_t>(a) * C + b] = acc;
            gram[static_cast<size_t>(b) * C + a] = acc;
        }
    std::vector<double> u(static_cast<size_t>(C), 1.0 / std::sqrt(static_cast<double>(C)));
    std::vector<double> next(static_cast<size_t>(C));
    for (int it = 0; it < 200; ++it) {
        for (int a = 0; a < C; ++a) {
            double acc = 0.0;
            for (int b = 0; b < C; ++b) acc += gram[static_cast<size_t>(a) * C + b] * u[static_cast<size_t>(b)];
            next[static_cast<size_t>(a)] = acc;
        }
        double norm = 0.0;
        for (double v : next) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-30) break;
        for (int a = 0; a < C; ++a) u[static_cast<size_t>(a)] = next[static_cast<size_t>(a)] / norm;
    }
    int max_at = 0;
    for (int a = 1; a < C; ++a)
        if (std::abs(u[static_cast<size_t>(a)]) > std::abs(u[static_cast<size_t>(max_at)])) max_at = a;
    if (u[static_cast<size_t>(max_at)] < 0.0)
        for (auto& v : u) v = -v;

    Tensor heat({H, W});
    for (int c = 0; c < C; ++c) {
        const double* pc = act.data.data() + static_cast<size_t>(c) * plane;
        for (size_t i = 0; i < plane; ++i) heat.data[i] += u[static_cast<size_t>(c)] * pc[i];
    }
    double mn = heat.data[0], mx = heat.data[0];
    for (double v : heat.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx - mn > 1e-12)
        for (auto& v : heat.data) v = (v - mn) / (mx - mn);
    else
        for (auto& v : heat.data) v = 0.0;

    // bilinear upsample to image resolution
    const int side = params.config.image_side;
    Tensor out({side, side});
    const double sx = static_cast<double>(W) / side, sy = static_cast<double>(H) / side;
    for (int y = 0; y < side; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, H - 1), y1c = std::clamp(y0 + 1, 0, H - 1);
        for (int x = 0; x < side; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, W - 1), x1c = std::clamp(x0 + 1, 0, W - 1);
            double v = heat.data[static_cast<size_t>(y0c) * W + x0c] * (1 - wx) * (1 - wy) +
                       heat.data[static_cast<size_t>(y0c) * W + x1c] * wx * (1 - wy) +
                       heat.data[static_cast<size_t>(y1c) * W + x0c] * (1 - wx) * wy +
                       heat.data[static_cast<size_t>(y1c) * W + x1c] * wx * wy;
            out.data[static_cast<size_t>(y) * side + x] = v;
        }
    }
    return out;
}

MapResult evaluate_map(const DetectorParams& params, const std::vector<const FrameRecord*>& frames,
                       double iou_threshold, double conf_threshold, double nms_iou) {
    const int C = params.config.num_classes;
    struct Det {
        double conf;
        size_t frame;
        BBox box;
    };
    std::vector<std::vector<Det>> dets(static_cast<size_t>(C));
    std::vector<std::vector<std::vector<BBox>>> gts(static_cast<size_t>(C));  // [cls][frame] -> boxes
    for (auto& g : gts) g.resize(frames.size());
    std::vector<int> gt_count(static_cast<size_t>(C), 0);

    std::vector<std::vector<Detection>> frame_dets(frames.size());
    parallel_for(static_cast<int64_t>(frames.size()), [&](int64_t i) {
        RawPrediction raw = detector_forward(params, frames[static_cast<size_t>(i)]->image.to_image());
        frame_dets[static_cast<size_t>(i)] = decode_detections(params.config, raw, conf_threshold, nms_iou);
    });
    for (size_t i = 0; i < frames.size(); ++i) {
        for (const auto& d : frame_dets[i])
            dets[static_cast<size_t>(d.predicted_class)].push_back({d.confidence(), i, d.box});
        for (const auto& g : frame_ground_truth(*frames[i])) {
            gts[static_cast<size_t>(g.cls)][i].push_back(g.box);
            ++gt_count[static_cast<size_t>(g.cls)];
        }
    }

    MapResult res;
    res.per_class_ap.assign(static_cast<size_t>(C), -1.0);
    double ap_sum = 0.0;
    int ap_n = 0;
    for (int c = 0; c < C; ++c) {
        if (gt_count[static_cast<size_t>(c)] == 0) continue;
        auto& dc = dets[static_cast<size_t>(c)];
        std::stable_sort(dc.begin(), dc.end(), [](const Det& a, const Det& b) { return a.conf > b.conf; });
        std::vector<std::vector<bool>> taken(frames.size());
        for (size_t i = 0; i < frames.size(); ++i)
            taken[i].assign(gts[static_cast<size_t>(c)][i].size(), false);
        std::vector<int> tp(dc.size(), 0);
        for (size_t i = 0; i < dc.size(); ++i) {
            const auto& boxes = gts[static_cast<size_t>(c)][dc[i].frame];
            double best = iou_threshold;
            int best_j = -1;
            for (size_t j = 0; j < boxes.size(); ++j) {
                if (taken[dc[i].frame][j]) continue;
                double v = iou(dc[i].box, boxes[j]);
                if (v >= best) {
                    best = v;
                    best_j = static_cast<int>(j);
                }
            }
            if (best_j >= 0) {
                tp[i] = 1;
                taken[dc[i].frame][static_cast<size_t>(best_j)] = true;
            }
        }
        // all-point interpolated average precision
        std::vector<double> prec(dc.size()), rec(dc.size());
        int cum_tp = 0;
        for (size_t i = 0; i < dc.size(); ++i) {
            cum_tp += tp[i];
            prec[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
            rec[i] = static_cast<double>(cum_tp) / gt_count[static_cast<size_t>(c)];
        }
        for (size_t i = dc.size(); i > 1; --i) prec[i - 2] = std::max(prec[i - 2], prec[i - 1]);
        double ap = 0.0;
        double prev_r = 0.0;
        for (size_t i = 0; i < dc.size(); ++i) {
            ap += (rec[i] - prev_r) * prec[i];
            prev_r = rec[i];
        }
        res.per_class_ap[static_cast<size_t>(c)] = ap;
        ap_sum += ap;
        ++ap_n;
    }
    res.map = ap_n > 0 ? ap_sum / ap_n : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

ordered_json config_to_json(const DetectorConfig& c) {
    ordered_json j;
    j["image_side"] = c.image_side;
    j["grid"] = c.grid;
    j["num_classes"] = c.num_classes;
    j["channels"] = c.channels;
    j["strides"] = c.strides;
    j["dilations"] = c.dilations;
    j["kernel"] = c.kernel;
    j["anchor_px"] = c.anchor_px;
    j["leaky_slope"] = c.leaky_slope;
    j["size_logit_clamp"] = c.size_logit_clamp;
    j["learning_rate"] = c.learning_rate;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lambda_box"] = c.lambda_box;
    j["lambda_obj_pos"] = c.lambda_obj_pos;
    j["lambda_cls"] = c.lambda_cls;
    j["val_fraction"] = c.val_fraction;
    j["seed"] = c.seed;
    return j;
}

DetectorConfig config_from_json(const ordered_json& j) {
    DetectorConfig c;
    c.image_side = j.at("image_side");
    c.grid = j.at("grid");
    c.num_classes = j.at("num_classes");
    c.channels = j.at("channels").get<std::vector<int>>();
    c.strides = j.at("strides").get<std::vector<int>>();
    c.dilations = j.at("dilations").get<std::vector<int>>();
    c.kernel = j.at("kernel");
    c.anchor_px = j.at("anchor_px");
    c.leaky_slope = j.at("leaky_slope");
    c.size_logit_clamp = j.at("size_logit_clamp");
    c.learning_rate = j.at("learning_rate");
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.lambda_box = j.at("lambda_box");
    c.lambda_obj_pos = j.at("lambda_obj_pos");
    c.lambda_cls = j.at("lambda_cls");
    c.val_fraction = j.at("val_fraction");
    c.seed = j.at("seed");
    return c;
}

}  // namespace

void save_detector(const DetectorParams& params, const std::string& base_path,
                   uint64_t dataset_hash, double holdout_map) {
    save_tensors(base_path + ".dpt", params.weights);
    ordered_json j;
    j["format"] = "dynpatch-detector";
    j["version"] = 1;
    j["config"] = config_to_json(params.config);
    ordered_json classes = ordered_json::array();
    for (int c = 0; c < params.config.num_classes; ++c) classes.push_back(class_name(c));
    j["classes"] = classes;
    j["training_seed"] = params.config.seed;
    j["dataset_hash"] = hash_to_hex(dataset_hash);
    j["arch_hash"] = hash_to_hex(params.config.arch_hash());
    j["holdout_map"] = holdout_map;
    std::ofstream out(base_path + ".json", std::ios::trunc);
    if (!out) throw IoError("save_detector: cannot write sidecar");
    out << j.dump(2) << "\n";
}

DetectorParams load_detector(const std::string& base_path) {
    std::ifstream in(base_path + ".json");
    if (!in) throw IoError("load_detector: cannot open sidecar " + base_path + ".json");
    ordered_json j = ordered_json::parse(in);
    if (j.value("format", "") != "dynpatch-detector")
        throw IoError("load_detector: unexpected sidecar format");
    DetectorParams params;
    params.config = config_from_json(j.at("config"));
    params.config.validate();
    params.weights = load_tensors(base_path + ".dpt");
    return params;
}

}  // namespace dynpatch
