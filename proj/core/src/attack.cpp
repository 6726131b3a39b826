#include "dynpatch/attack.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dynpatch/common.hpp"
#include "dynpatch/png_io.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// clustering

ClusterFeatures cluster_features(const FrameRecord& frame) {
    frame.recorded_camera.validate("recorded camera");
    frame.recorded_patch_car.validate("recorded patch car");
    frame.recorded_sign.validate("recorded sign");
    return {frame.recorded_camera.distance_to(frame.recorded_patch_car),
            frame.recorded_camera.distance_to(frame.recorded_sign)};
}

std::vector<double> cluster_feature_vector(const FrameRecord& frame, bool use_4d) {
    if (!use_4d) {
        ClusterFeatures f = cluster_features(frame);
        return {f.d_patch, f.d_target};
    }
    Pose2D pc = to_camera_frame(frame.recorded_patch_car, frame.recorded_camera);
    Pose2D sc = to_camera_frame(frame.recorded_sign, frame.recorded_camera);
    return {pc.x, pc.y, sc.x, sc.y};
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

struct LloydResult {
    std::vector<std::vector<double>> centroids;
    std::vector<int> assign;
    double wcss = 0.0;
};

LloydResult lloyd(const std::vector<std::vector<double>>& points, int k, Rng& rng, int max_iters) {
    const size_t n = points.size();
    const size_t dim = points[0].size();

    // k-means++ seeding
    std::vector<std::vector<double>> centroids;
    centroids.push_back(points[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1))]);
    std::vector<double> d2(n);
    while (static_cast<int>(centroids.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = sq_dist(points[i], centroids[0]);
            for (size_t c = 1; c < centroids.size(); ++c) best = std::min(best, sq_dist(points[i], centroids[c]));
            d2[i] = best;
            total += best;
        }
        size_t pick = 0;
        if (total <= 1e-18) {
            pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
        } else {
            double r = rng.uniform() * total;
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.push_back(points[pick]);
    }

    std::vector<int> assign(n, -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq_dist(points[i], centroids[0]);
            for (int c = 1; c < k; ++c) {
                double d = sq_dist(points[i], centroids[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;
        std::vector<std::vector<double>> sums(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < n; ++i) {
            for (size_t d = 0; d < dim; ++d) sums[static_cast<size_t>(assign[i])][d] += points[i][d];
            ++counts[static_cast<size_t>(assign[i])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                // revive with the point farthest from its centroid
                size_t far_i = 0;
                double far_d = -1.0;
                for (size_t i = 0; i < n; ++i) {
                    double d = sq_dist(points[i], centroids[static_cast<size_t>(assign[i])]);
                    if (d > far_d) {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[static_cast<size_t>(c)] = points[far_i];
            } else {
                for (size_t d = 0; d < dim; ++d)
                    centroids[static_cast<size_t>(c)][d] =
                        sums[static_cast<size_t>(c)][d] / counts[static_cast<size_t>(c)];
            }
        }
    }
    LloydResult res;
    res.centroids = std::move(centroids);
    res.assign = std::move(assign);
    for (size_t i = 0; i < n; ++i) res.wcss += sq_dist(points[i], res.centroids[static_cast<size_t>(res.assign[i])]);
    return res;
}

}  // namespace

ClusterModel kmeans_fit(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                        int restarts, int max_iters) {
    if (k < 1) throw ValidationError("kmeans: k must be >= 1");
    if (static_cast<int>(points.size()) < k)
        throw ValidationError("kmeans: fewer points than clusters");
    const size_t dim = points[0].size();
    for (const auto& p : points)
        if (p.size() != dim) throw ValidationError("kmeans: inconsistent feature dimensions");

    LloydResult best;
    bool have = false;
    for (int r = 0; r < std::max(1, restarts); ++r) {
        Rng rng(derive_seed(seed, "kmeans", static_cast<uint64_t>(r)));
        LloydResult cand = lloyd(points, k, rng, max_iters);
        if (!have || cand.wcss < best.wcss - 1e-15) {
            best = std::move(cand);
            have = true;
        }
    }

    // order clusters nearest-first for stable naming
    std::vector<size_t> order(static_cast<size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return best.centroids[a] < best.centroids[b];
    });

    ClusterModel model;
    model.seed = seed;
    model.wcss = best.wcss;
    model.centroids.resize(static_cast<size_t>(k));
    model.counts.assign(static_cast<size_t>(k), 0);
    std::vector<int> relabel(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
        model.centroids[static_cast<size_t>(c)] = best.centroids[order[static_cast<size_t>(c)]];
        relabel[order[static_cast<size_t>(c)]] = c;
    }
    for (size_t i = 0; i < points.size(); ++i)
        ++model.counts[static_cast<size_t>(relabel[static_cast<size_t>(best.assign[i])])];
    return model;
}

int assign_cluster(const ClusterModel& model, const std::vector<double>& features) {
    if (model.centroids.empty()) throw ValidationError("assign_cluster: model not fitted");
    if (static_cast<int>(features.size()) != model.dim())
        throw ValidationError("assign_cluster: feature dimension mismatch");
    int best = 0;
    double bd = sq_dist(features, model.centroids[0]);
    for (int c = 1; c < model.k(); ++c) {
        double d = sq_dist(features, model.centroids[static_cast<size_t>(c)]);
        if (d < bd) {  // strict: ties keep the lowest id
            bd = d;
            best = c;
        }
    }
    return best;
}

int assign_cluster(const ClusterModel& model, const ClusterFeatures& features) {
    return assign_cluster(model, std::vector<double>{features.d_patch, features.d_target});
}

std::vector<int> assign_manifest_clusters(DatasetManifest& manifest, const ClusterModel& model,
                                          bool use_4d) {
    std::vector<int> counts(static_cast<size_t>(model.k()), 0);
    for (auto& f : manifest.frames) {
        f.cluster_id = assign_cluster(model, cluster_feature_vector(f, use_4d));
        ++counts[static_cast<size_t>(f.cluster_id)];
    }
    return counts;
}

// ---------------------------------------------------------------------------
// objective

void OptimizerConfig::validate() const {
    if (!(eta > 0.0) && eta != 0.0) throw ValidationError("optimizer: eta must be >= 0");
    if (eta < 0.0) throw ValidationError("optimizer: eta must be >= 0");
    if (iterations < 1) throw ValidationError("optimizer: iterations must be >= 1");
    if (top_k < 1) throw ValidationError("optimizer: top_k must be >= 1");
    if (tau < 0.0 || tau >= 1.0) throw ValidationError("optimizer: tau must be in [0,1)");
    if (batch_size < 1) throw ValidationError("optimizer: batch size must be >= 1");
    if (patch_resolution < 8) throw ValidationError("optimizer: patch resolution too small");
    if (optimizer != "sgd" && optimizer != "adam")
        throw ValidationError("optimizer: unknown optimizer " + optimizer);
    if (target_class < 0 || target_class >= kNumClasses)
        throw ValidationError("optimizer: bad target class");
}

uint64_t OptimizerConfig::content_hash() const {
    std::string desc = std::to_string(eta) + "/" + std::to_string(iterations) + "/" +
                       std::to_string(top_k) + "/" + std::to_string(tau) + "/" +
                       std::to_string(target_class) + "/" + std::to_string(batch_size) + "/" +
                       std::to_string(patch_resolution) + "/" + optimizer + "/" + std::to_string(seed);
    return fnv1a64(desc);
}

std::vector<CandidateBox> filter_overlapping(const DetectorConfig& config, const RawPrediction& raw,
                                             const BBox& b_orig, double tau) {
    b_orig.validate("filter b_orig");
    const int S = config.grid;
    std::vector<CandidateBox> out;
    for (int gy = 0; gy < S; ++gy) {
        for (int gx = 0; gx < S; ++gx) {
            BBox box = decode_cell_box(config, raw.data, gy, gx);
            double v = iou(box, b_orig);
            if (v <= tau) continue;
            CandidateBox c;
            c.gy = gy;
            c.gx = gx;
            c.box = box;
            auto at = [&](int ch) { return raw.data.data[(static_cast<size_t>(ch) * S + gy) * S + gx]; };
            auto sig = [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
            c.objectness = sig(at(0));
            c.class_probs.resize(static_cast<size_t>(config.num_classes));
            for (int cc = 0; cc < config.num_classes; ++cc) c.class_probs[static_cast<size_t>(cc)] = sig(at(5 + cc));
            c.iou_with_orig = v;
            out.push_back(std::move(c));
        }
    }
    return out;
}

double attack_objective(const std::vector<CandidateBox>& m, const BBox& b_orig, int target_class,
                        int k) {
    if (k < 1) throw ValidationError("attack_objective: k must be >= 1");
    if (m.empty()) return 0.0;
    std::vector<size_t> order(m.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        double ca = m[a].target_confidence(target_class);
        double cb = m[b].target_confidence(target_class);
        if (ca != cb) return ca > cb;
        if (m[a].gy != m[b].gy) return m[a].gy < m[b].gy;
        return m[a].gx < m[b].gx;
    });
    size_t kk = std::min<size_t>(static_cast<size_t>(k), m.size());
    double acc = 0.0;
    for (size_t i = 0; i < kk; ++i) {
        const CandidateBox& c = m[order[i]];
        acc += c.target_confidence(target_class) * iou(c.box, b_orig);
    }
    return acc / static_cast<double>(kk);
}

namespace {

struct TapeObjective {
    Tape::Var grad_var = -1;  // surrogate objective when the filter is empty
    double reported = 0.0;
};

// Eq.-style objective on the tape over all grid cells. Selection (filter,
// top-k) happens on values; gradients flow through the selected cells.
TapeObjective build_objective_tape(Tape& tape, const DetectorConfig& cfg, Tape::Var raw,
                                   const BBox& b_orig, int target_class, int k, double tau) {
    const int S = cfg.grid;
    const int n = S * S;
    const double cell = cfg.cell_pixels();

    auto channel_indices = [&](int ch) {
        std::vector<int64_t> idx(static_cast<size_t>(n));
        for (int gy = 0; gy < S; ++gy)
            for (int gx = 0; gx < S; ++gx)
                idx[static_cast<size_t>(gy) * S + gx] = (static_cast<int64_t>(ch) * S + gy) * S + gx;
        return idx;
    };

    Tape::Var obj_l = tape.gather(raw, channel_indices(0));
    Tape::Var tx = tape.gather(raw, channel_indices(1));
    Tape::Var ty = tape.gather(raw, channel_indices(2));
    Tape::Var tw = tape.gather(raw, channel_indices(3));
    Tape::Var th = tape.gather(raw, channel_indices(4));
    Tape::Var cls_l = tape.gather(raw, channel_indices(5 + target_class));

    Tensor gxs({n}), gys({n});
    for (int gy = 0; gy < S; ++gy)
        for (int gx = 0; gx < S; ++gx) {
            gxs.data[static_cast<size_t>(gy) * S + gx] = gx;
            gys.data[static_cast<size_t>(gy) * S + gx] = gy;
        }

    Tape::Var p_obj = tape.sigmoid(obj_l);
    Tape::Var p_t = tape.sigmoid(cls_l);
    Tape::Var conf = tape.mul(p_obj, p_t);

    Tape::Var cx = tape.scale(tape.add(tape.sigmoid(tx), tape.constant(gxs)), cell);
    Tape::Var cy = tape.scale(tape.add(tape.sigmoid(ty), tape.constant(gys)), cell);
    double cl = cfg.size_logit_clamp;
    Tape::Var w = tape.scale(tape.exp_clamped(tw, -cl, cl), cfg.anchor_px);
    Tape::Var h = tape.scale(tape.exp_clamped(th, -cl, cl), cfg.anchor_px);
    Tape::Var x1 = tape.sub(cx, tape.scale(w, 0.5));
    Tape::Var x2 = tape.add(cx, tape.scale(w, 0.5));
    Tape::Var y1 = tape.sub(cy, tape.scale(h, 0.5));
    Tape::Var y2 = tape.add(cy, tape.scale(h, 0.5));

    auto const_full = [&](double v) { return tape.constant(Tensor({n}, v)); };
    Tape::Var iw = tape.relu(tape.sub(tape.vmin(x2, const_full(b_orig.x_max)), tape.vmax(x1, const_full(b_orig.x_min))));
    Tape::Var ih = tape.relu(tape.sub(tape.vmin(y2, const_full(b_orig.y_max)), tape.vmax(y1, const_full(b_orig.y_min))));
    Tape::Var inter = tape.mul(iw, ih);
    Tape::Var uni = tape.sub(tape.add(tape.mul(w, h), const_full(b_orig.area())), inter);
    Tape::Var iou_v = tape.div(inter, uni);
    Tape::Var conf_iou = tape.mul(conf, iou_v);

    const Tensor& iou_vals = tape.value(iou_v);
    const Tensor& conf_vals = tape.value(conf);

    std::vector<int64_t> m;
    for (int i = 0; i < n; ++i)
        if (iou_vals.data[static_cast<size_t>(i)] > tau) m.push_back(i);

    bool filtered_empty = m.empty();
    if (filtered_empty) {
        // straight-through fallback: cells whose own grid rect touches b_orig
        for (int gy = 0; gy < S; ++gy)
            for (int gx = 0; gx < S; ++gx) {
                double rx0 = gx * cell, ry0 = gy * cell;
                if (rx0 < b_orig.x_max && rx0 + cell > b_orig.x_min && ry0 < b_orig.y_max &&
                    ry0 + cell > b_orig.y_min)
                    m.push_back(static_cast<int64_t>(gy) * S + gx);
            }
    }

    TapeObjective out;
    if (m.empty()) return out;

    std::stable_sort(m.begin(), m.end(), [&](int64_t a, int64_t b) {
        double ca = conf_vals.data[static_cast<size_t>(a)];
        double cb = conf_vals.data[static_cast<size_t>(b)];
        if (ca != cb) return ca > cb;
        return a < b;
    });
    size_t kk = std::min<size_t>(static_cast<size_t>(k), m.size());
    m.resize(kk);
    Tape::Var selected = tape.gather(conf_iou, m);
    out.grad_var = tape.mean(selected);
    out.reported = filtered_empty ? 0.0 : tape.value(out.grad_var).data[0];
    return out;
}

struct FrameContext {
    Tensor background;
    WarpPlan plan;
    BBox b_orig;
};

FrameContext make_context(const FrameRecord& frame, int patch_resolution, int image_side) {
    if (!frame.screen_visible) throw ValidationError("optimize: frame without visible screen quad");
    if (!frame.sign_visible) throw ValidationError("optimize: frame without a ground-truth sign box");
    FrameContext ctx;
    ctx.background = image_to_chw(frame.image.to_image());
    ctx.plan = make_warp_plan(frame.screen_quad, image_side, image_side, patch_resolution, patch_resolution);
    ctx.b_orig = frame.sign_box;
    return ctx;
}

struct FrameEvalOut {
    double reported = 0.0;
    Tensor grad;  // empty when not requested
};

FrameEvalOut frame_objective(const FrameContext& ctx, const Tensor& patch,
                             const DetectorParams& detector, const SitNetParams& sitnet,
                             const OptimizerConfig& cfg, bool want_grad) {
    Tape tape;
    Tape::Var p = tape.input(patch, want_grad);
    Tape::Var sit = sit_forward_tape(tape, sitnet, p, false);
    Tape::Var bg = tape.constant(ctx.background);
    Tape::Var composited = tape.warp(bg, sit, ctx.plan);
    DetectorTapeNet net = detector_forward_tape(tape, detector, composited, false);
    TapeObjective obj = build_objective_tape(tape, detector.config, net.raw, ctx.b_orig,
                                             cfg.target_class, cfg.top_k, cfg.tau);
    FrameEvalOut out;
    out.reported = obj.reported;
    if (want_grad) {
        if (obj.grad_var >= 0 && tape.requires_grad(obj.grad_var)) {
            tape.backward(obj.grad_var);
            out.grad = tape.grad(p);
        } else {
            out.grad = Tensor(patch.shape);
        }
    }
    return out;
}

double full_objective(const std::vector<FrameContext>& ctxs, const Tensor& patch,
                      const DetectorParams& detector, const SitNetParams& sitnet,
                      const OptimizerConfig& cfg) {
    if (ctxs.empty()) return 0.0;
    std::vector<double> vals(ctxs.size());
    parallel_for(static_cast<int64_t>(ctxs.size()), [&](int64_t i) {
        vals[static_cast<size_t>(i)] =
            frame_objective(ctxs[static_cast<size_t>(i)], patch, detector, sitnet, cfg, false).reported;
    });
    double acc = 0.0;
    for (double v : vals) acc += v;
    return acc / static_cast<double>(ctxs.size());
}

Tensor quantized_patch_tensor(const Tensor& t) {
    Tensor q = t;
    for (auto& v : q.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return q;
}

}  // namespace

Image apply_patch(const FrameRecord& frame, const Image& patch, const SitNetParams& sitnet) {
    if (!frame.screen_visible) throw ValidationError("apply_patch: screen quad not visible");
    Tape tape;
    Tape::Var p = tape.constant(image_to_chw(patch));
    Tape::Var sit = sit_forward_tape(tape, sitnet, p, false);
    WarpPlan plan = make_warp_plan(frame.screen_quad, frame.image.width, frame.image.height,
                                   patch.width, patch.height);
    Tape::Var bg = tape.constant(image_to_chw(frame.image.to_image()));
    Tape::Var composited = tape.warp(bg, sit, plan);
    return chw_to_image(tape.value(composited));
}

double evaluate_objective(const std::vector<const FrameRecord*>& frames,
                          const DetectorParams& detector, const SitNetParams& sitnet, const Image& patch,
                          const OptimizerConfig& config) {
    config.validate();
    if (frames.empty()) throw ValidationError("evaluate_objective: empty frame set");
    std::vector<FrameContext> ctxs;
    ctxs.reserve(frames.size());
    for (const auto* f : frames)
        ctxs.push_back(make_context(*f, config.patch_resolution, detector.config.image_side));
    return full_objective(ctxs, image_to_chw(patch), detector, sitnet, config);
}

OptimizeResult optimize_patch(const std::vector<const FrameRecord*>& frames,
                              const DetectorParams& detector, const SitNetParams& sitnet,
                              const OptimizerConfig& config) {
    config.validate();
    if (frames.empty()) throw ValidationError("optimize_patch: empty frame set");

    std::vector<FrameContext> ctxs;
    ctxs.reserve(frames.size());
    for (const auto* f : frames)
        ctxs.push_back(make_context(*f, config.patch_resolution, detector.config.image_side));

    const int r = config.patch_resolution;
    Rng rng(derive_seed(config.seed, "patch-init"));
    Tensor patch({3, r, r});
    for (auto& v : patch.data) v = rng.uniform();
    patch = quantized_patch_tensor(patch);
    const Tensor initial = patch;

    OptimizeResult result;
    result.seed = config.seed;
    result.initial_patch = chw_to_image(initial);

    Rng batch_rng(derive_seed(config.seed, "batch"));
    std::vector<size_t> deck(frames.size());
    std::iota(deck.begin(), deck.end(), 0);
    size_t deck_pos = deck.size();  // force shuffle on first draw
    auto draw = [&]() {
        if (deck_pos >= deck.size()) {
            for (size_t i = deck.size(); i > 1; --i)
                std::swap(deck[i - 1], deck[static_cast<size_t>(batch_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
            deck_pos = 0;
        }
        return deck[deck_pos++];
    };

    const size_t B = std::min<size_t>(static_cast<size_t>(config.batch_size), frames.size());
    std::vector<FrameEvalOut> outs(B);
    std::vector<size_t> batch(B);

    Tensor best_patch = patch;
    double best_batch_obj = -1.0;

    // adam state (used only when configured)
    Tensor m_state({3, r, r}), v_state({3, r, r});
    int64_t adam_step = 0;

    for (int iter = 1; iter <= config.iterations; ++iter) {
        for (size_t b = 0; b < B; ++b) batch[b] = draw();
        parallel_for(static_cast<int64_t>(B), [&](int64_t b) {
            outs[static_cast<size_t>(b)] =
                frame_objective(ctxs[batch[static_cast<size_t>(b)]], patch, detector, sitnet, config, true);
        });
        double batch_obj = 0.0;
        Tensor grad({3, r, r});
        for (size_t b = 0; b < B; ++b) {
            batch_obj += outs[b].reported;
            for (size_t j = 0; j < grad.data.size(); ++j) grad.data[j] += outs[b].grad.data[j];
        }
        batch_obj /= static_cast<double>(B);
        for (auto& v : grad.data) v /= static_cast<double>(B);

        result.curve.push_back(batch_obj);
        if (batch_obj > best_batch_obj) {
            best_batch_obj = batch_obj;
            best_patch = patch;
        }

        if (config.optimizer == "adam") {
            static constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            ++adam_step;
            double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_step));
            double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_step));
            for (size_t j = 0; j < patch.data.size(); ++j) {
                m_state.data[j] = b1 * m_state.data[j] + (1.0 - b1) * grad.data[j];
                v_state.data[j] = b2 * v_state.data[j] + (1.0 - b2) * grad.data[j] * grad.data[j];
                patch.data[j] += config.eta * (m_state.data[j] / c1) / (std::sqrt(v_state.data[j] / c2) + eps);
            }
        } else {
            for (size_t j = 0; j < patch.data.size(); ++j) patch.data[j] += config.eta * grad.data[j];
        }
        for (auto& v : patch.data) v = std::clamp(v, 0.0, 1.0);

        if (std::find(config.snapshot_iters.begin(), config.snapshot_iters.end(), iter) !=
            config.snapshot_iters.end()) {
            result.snapshot_objectives[iter] = full_objective(ctxs, patch, detector, sitnet, config);
            result.snapshot_patches[iter] = chw_to_image(patch);
        }
    }

    // re-score candidate iterates on the full frame set
    struct Candidate {
        const Tensor* t;
        double obj;
    };
    std::vector<Candidate> cands{{&initial, 0.0}, {&best_patch, 0.0}, {&patch, 0.0}};
    for (auto& c : cands) c.obj = full_objective(ctxs, *c.t, detector, sitnet, config);
    size_t winner = 0;
    for (size_t i = 1; i < cands.size(); ++i)
        if (cands[i].obj > cands[winner].obj) winner = i;

    Tensor final_patch = quantized_patch_tensor(*cands[winner].t);
    result.final_objective = full_objective(ctxs, final_patch, detector, sitnet, config);
    result.patch = chw_to_image(final_patch);
    return result;
}

// ---------------------------------------------------------------------------
// patch set

BuildArtifacts build_patchset(const DatasetManifest& manifest, const ClusterModel& clusters,
                              const DetectorParams& detector, const SitNetParams& sitnet,
                              const OptimizerConfig& config, bool use_4d, StaticStepMode static_mode) {
    config.validate();
    const int k = clusters.k();
    std::vector<std::vector<const FrameRecord*>> by_cluster(static_cast<size_t>(k));
    std::vector<const FrameRecord*> all;
    for (const auto& f : manifest.frames) {
        if (f.cluster_id < 0)
            throw ValidationError("build_patchset: manifest not clustered (run the cluster stage)");
        if (f.cluster_id >= k) throw ValidationError("build_patchset: cluster id out of range");
        if (!f.screen_visible || !f.sign_visible) continue;
        by_cluster[static_cast<size_t>(f.cluster_id)].push_back(&f);
        all.push_back(&f);
    }
    for (int c = 0; c < k; ++c)
        if (by_cluster[static_cast<size_t>(c)].empty())
            throw ValidationError("build_patchset: cluster " + std::to_string(c) + " has zero usable frames");

    BuildArtifacts art;
    art.set.clusters = clusters;
    art.set.use_4d_features = use_4d;
    art.set.config_hash = config.content_hash();

    for (int c = 0; c < k; ++c) {
        OptimizerConfig run_cfg = config;
        run_cfg.seed = derive_seed(config.seed, "cluster-patch", static_cast<uint64_t>(c));
        OptimizeResult res = optimize_patch(by_cluster[static_cast<size_t>(c)], detector, sitnet, run_cfg);
        art.set.cluster_patches.push_back(res.patch);
        art.set.cluster_objectives.push_back(res.final_objective);
        art.set.patch_seeds.push_back(run_cfg.seed);
        art.cluster_runs.push_back(std::move(res));
    }

    OptimizerConfig static_cfg = config;
    static_cfg.seed = derive_seed(config.seed, "static-patch");
    if (static_mode == StaticStepMode::MatchedTotal) static_cfg.iterations = config.iterations * k;
    OptimizeResult sres = optimize_patch(all, detector, sitnet, static_cfg);
    art.set.static_patch = sres.patch;
    art.set.static_objective = sres.final_objective;
    art.set.static_seed = static_cfg.seed;
    art.static_run = std::move(sres);
    return art;
}

const Image& select_patch(const PatchSet& set, const Pose2D& camera, const Pose2D& patch_car,
                          const Pose2D& target) {
    if (set.cluster_patches.empty()) throw ValidationError("select_patch: empty patch set");
    std::vector<double> features;
    if (set.use_4d_features) {
        Pose2D pc = to_camera_frame(patch_car, camera);
        Pose2D tc = to_camera_frame(target, camera);
        features = {pc.x, pc.y, tc.x, tc.y};
    } else {
        features = {camera.distance_to(patch_car), camera.distance_to(target)};
    }
    int id = assign_cluster(set.clusters, features);
    return set.cluster_patches[static_cast<size_t>(id)];
}

// ---------------------------------------------------------------------------
// persistence

void save_cluster_model(const ClusterModel& model, bool use_4d, const std::string& path) {
    ordered_json j;
    j["format"] = "dynpatch-clusters";
    j["version"] = 1;
    j["k"] = model.k();
    j["use_4d_features"] = use_4d;
    j["seed"] = model.seed;
    j["wcss"] = model.wcss;
    j["centroids"] = model.centroids;
    j["counts"] = model.counts;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_cluster_model: cannot write " + path);
    out << j.dump(2) << "\n";
}

ClusterModel load_cluster_model(const std::string& path, bool* use_4d) {
    std::ifstream in(path);
    if (!in) throw IoError("load_cluster_model: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    if (j.value("format", "") != "dynpatch-clusters")
        throw IoError("load_cluster_model: unexpected format");
    ClusterModel model;
    model.seed = j.at("seed");
    model.wcss = j.at("wcss");
    model.centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
    model.counts = j.at("counts").get<std::vector<int>>();
    if (use_4d) *use_4d = j.at("use_4d_features");
    return model;
}

void save_patchset(const PatchSet& set, const std::string& dir) {
    fs::create_directories(dir);
    save_cluster_model(set.clusters, set.use_4d_features, (fs::path(dir) / "cluster_model.json").string());
    ordered_json index;
    index["format"] = "dynpatch-patchset";
    index["version"] = 1;
    index["k"] = set.cluster_patches.size();
    index["config_hash"] = hash_to_hex(set.config_hash);
    ordered_json patches = ordered_json::array();
    for (size_t c = 0; c < set.cluster_patches.size(); ++c) {
        std::string name = "cluster_" + std::to_string(c) + ".png";
        write_png((fs::path(dir) / name).string(), set.cluster_patches[c]);
        ordered_json sidecar;
        sidecar["file"] = name;
        sidecar["cluster"] = c;
        sidecar["centroid"] = set.clusters.centroids[c];
        sidecar["config_hash"] = hash_to_hex(set.config_hash);
        sidecar["training_seed"] = set.patch_seeds.size() > c ? set.patch_seeds[c] : 0;
        sidecar["final_objective"] = set.cluster_objectives.size() > c ? set.cluster_objectives[c] : 0.0;
        std::ofstream sc(fs::path(dir) / ("cluster_" + std::to_string(c) + ".json"), std::ios::trunc);
        sc << sidecar.dump(2) << "\n";
        patches.push_back(name);
    }
    write_png((fs::path(dir) / "static.png").string(), set.static_patch);
    {
        ordered_json sidecar;
        sidecar["file"] = "static.png";
        sidecar["cluster"] = nullptr;
        sidecar["config_hash"] = hash_to_hex(set.config_hash);
        sidecar["training_seed"] = set.static_seed;
        sidecar["final_objective"] = set.static_objective;
        std::ofstream sc(fs::path(dir) / "static.json", std::ios::trunc);
        sc << sidecar.dump(2) << "\n";
    }
    index["patches"] = patches;
    index["static"] = "static.png";
    std::ofstream out(fs::path(dir) / "patchset.json", std::ios::trunc);
    if (!out) throw IoError("save_patchset: cannot write index");
    out << index.dump(2) << "\n";
}

PatchSet load_patchset(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "patchset.json");
    if (!in) throw IoError("load_patchset: cannot open index in " + dir);
    ordered_json index = ordered_json::parse(in);
    if (index.value("format", "") != "dynpatch-patchset")
        throw IoError("load_patchset: unexpected format");
    PatchSet set;
    bool use_4d = false;
    set.clusters = load_cluster_model((fs::path(dir) / "cluster_model.json").string(), &use_4d);
    set.use_4d_features = use_4d;
    size_t k = index.at("patches").size();
    for (size_t c = 0; c < k; ++c) {
        set.cluster_patches.push_back(read_png((fs::path(dir) / index.at("patches").at(c).get<std::string>()).string()));
        std::ifstream sc(fs::path(dir) / ("cluster_" + std::to_string(c) + ".json"));
        if (sc) {
            ordered_json sidecar = ordered_json::parse(sc);
            set.cluster_objectives.push_back(sidecar.value("final_objective", 0.0));
            set.patch_seeds.push_back(sidecar.value("training_seed", uint64_t{0}));
        }
    }
    set.static_patch = read_png((fs::path(dir) / index.at("static").get<std::string>()).string());
    std::ifstream sc(fs::path(dir) / "static.json");
    if (sc) {
        ordered_json sidecar = ordered_json::parse(sc);
        set.static_objective = sidecar.value("final_objective", 0.0);
        set.static_seed = sidecar.value("training_seed", uint64_t{0});
    }
    uint64_t hash = 0;
    std::sscanf(index.at("config_hash").get<std::string>().c_str(), "%016llx",
                reinterpret_cast<unsigned long long*>(&hash));
    set.config_hash = hash;
    return set;
}

}  // namespace dynpatch
