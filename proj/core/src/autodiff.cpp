#include "dynpatch/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {

inline double stable_softplus(double t) {
    if (t > 30.0) return t;
    if (t < -30.0) return std::exp(t);
    return std::log1p(std::exp(t));
}

inline double stable_sigmoid(double t) {
    if (t >= 0.0) {
        double e = std::exp(-t);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(t);
    return e / (1.0 + e);
}

// Output-index range [o_min, o_max] such that i = o*stride - pad + k*dilation
// stays inside [0, limit).
inline void conv_range(int limit, int out_size, int stride, int pad, int kd, int& o_min, int& o_max) {
    int need = pad - kd;
    o_min = need <= 0 ? 0 : (need + stride - 1) / stride;
    int hi_num = limit - 1 + pad - kd;
    o_max = hi_num < 0 ? -1 : hi_num / stride;
    o_max = std::min(o_max, out_size - 1);
}

}  // namespace

Tensor image_to_chw(const Image& img) {
    Tensor t({3, img.height, img.width});
    const size_t plane = img.pixel_count();
    for (size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) t.data[static_cast<size_t>(c) * plane + p] = img.px[p * 3 + static_cast<size_t>(c)];
    return t;
}

Image chw_to_image(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 3) throw ValidationError("chw_to_image: expected {3,H,W}");
    Image img(t.shape[2], t.shape[1]);
    const size_t plane = img.pixel_count();
    for (size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) img.px[p * 3 + static_cast<size_t>(c)] = t.data[static_cast<size_t>(c) * plane + p];
    return img;
}

Tape::Var Tape::input(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Tape::Var Tape::emit(Tensor value, std::vector<Var> parents, std::function<void(Tape&, Var)> backprop) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (Var p : n.parents)
        if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.grad_ready) {
        n.grad = Tensor(n.value.shape);
        n.grad_ready = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.grad_ready) throw ValidationError("tape: gradient not computed for this node");
    return n.grad;
}

void Tape::backward(Var root) {
    Node& r = nodes_[static_cast<size_t>(root)];
    if (r.value.numel() != 1) throw ValidationError("tape: backward root must be scalar");
    if (!r.requires_grad) throw ValidationError("tape: root does not depend on any differentiable input");
    grad_buf(root).data[0] = 1.0;
    for (Var v = root; v >= 0; --v) {
        Node& n = nodes_[static_cast<size_t>(v)];
        if (!n.requires_grad || !n.grad_ready || !n.backprop) continue;
        n.backprop(*this, v);
    }
}

// ---------------------------------------------------------------------------
// structural

Tape::Var Tape::gather(Var x, std::vector<int64_t> indices) {
    const Tensor& xv = value(x);
    Tensor out({static_cast<int>(indices.size())});
    for (size_t i = 0; i < indices.size(); ++i) {
        int64_t idx = indices[i];
        if (idx < 0 || static_cast<size_t>(idx) >= xv.numel())
            throw ValidationError("gather: index out of range");
        out.data[i] = xv.data[static_cast<size_t>(idx)];
    }
    auto idxs = std::move(indices);
    return emit(std::move(out), {x}, [idxs, x](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < idxs.size(); ++i) gx.data[static_cast<size_t>(idxs[i])] += g.data[i];
    });
}

Tape::Var Tape::reshape(Var x, std::vector<int> shape) {
    const Tensor& xv = value(x);
    if (Tensor::numel_of(shape) != xv.numel()) throw ValidationError("reshape: element count mismatch");
    Tensor out = xv;
    out.shape = std::move(shape);
    return emit(std::move(out), {x}, [x](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    });
}

// ---------------------------------------------------------------------------
// elementwise

#define DYNPATCH_CHECK_SAME_SHAPE(a, b, who)                                     \
    if (!value(a).same_shape(value(b))) throw ValidationError(who ": shape mismatch")

Tape::Var Tape::add(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "add");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
        }
    });
}

Tape::Var Tape::sub(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "sub");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
        }
    });
}

Tape::Var Tape::mul(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "mul");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(a);
        const Tensor& bv2 = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
        }
    });
}

Tape::Var Tape::div(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "div");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= bv.data[i];
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(a);
        const Tensor& bv2 = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / bv2.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i)
                gb.data[i] -= g.data[i] * av.data[i] / (bv2.data[i] * bv2.data[i]);
        }
    });
}

Tape::Var Tape::vmin(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "vmin");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(out.data[i], bv.data[i]);
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(a);
        const Tensor& bv2 = t.value(b);
        for (size_t i = 0; i < g.data.size(); ++i) {
            bool take_a = av.data[i] <= bv2.data[i];
            Var tgt = take_a ? a : b;
            if (t.requires_grad(tgt)) t.grad_buf(tgt).data[i] += g.data[i];
        }
    });
}

Tape::Var Tape::vmax(Var a, Var b) {
    DYNPATCH_CHECK_SAME_SHAPE(a, b, "vmax");
    Tensor out = value(a);
    const Tensor& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(out.data[i], bv.data[i]);
    return emit(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(a);
        const Tensor& bv2 = t.value(b);
        for (size_t i = 0; i < g.data.size(); ++i) {
            bool take_a = av.data[i] >= bv2.data[i];
            Var tgt = take_a ? a : b;
            if (t.requires_grad(tgt)) t.grad_buf(tgt).data[i] += g.data[i];
        }
    });
}

Tape::Var Tape::relu(Var x) {
    Tensor out = value(x);
    for (auto& v : out.data) v = std::max(v, 0.0);
    return emit(std::move(out), {x}, [x](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i)
            if (xv.data[i] > 0.0) gx.data[i] += g.data[i];
    });
}

Tape::Var Tape::leaky_relu(Var x, double negative_slope) {
    Tensor out = value(x);
    for (auto& v : out.data)
        if (v < 0.0) v *= negative_slope;
    return emit(std::move(out), {x}, [x, negative_slope](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i)
            gx.data[i] += g.data[i] * (xv.data[i] >= 0.0 ? 1.0 : negative_slope);
    });
}

Tape::Var Tape::sigmoid(Var x) {
    Tensor out = value(x);
    for (auto& v : out.data) v = stable_sigmoid(v);
    return emit(std::move(out), {x}, [x](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& yv = t.value(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i)
            gx.data[i] += g.data[i] * yv.data[i] * (1.0 - yv.data[i]);
    });
}

Tape::Var Tape::exp_clamped(Var x, double lo, double hi) {
    Tensor out = value(x);
    for (auto& v : out.data) v = std::exp(std::clamp(v, lo, hi));
    return emit(std::move(out), {x}, [x, lo, hi](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(x);
        const Tensor& yv = t.value(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i)
            if (xv.data[i] > lo && xv.data[i] < hi) gx.data[i] += g.data[i] * yv.data[i];
    });
}

Tape::Var Tape::scale(Var x, double s) {
    Tensor out = value(x);
    for (auto& v : out.data) v *= s;
    return emit(std::move(out), {x}, [x, s](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * s;
    });
}

Tape::Var Tape::offset(Var x, double c) {
    Tensor out = value(x);
    for (auto& v : out.data) v += c;
    return emit(std::move(out), {x}, [x](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    });
}

Tape::Var Tape::softclip01(Var x, double k) {
    if (k <= 0.0) throw ValidationError("softclip01: k must be positive");
    Tensor out = value(x);
    for (auto& v : out.data) v = (stable_softplus(k * v) - stable_softplus(k * (v - 1.0))) / k;
    return emit(std::move(out), {x}, [x, k](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.data.size(); ++i) {
            double d = stable_sigmoid(k * xv.data[i]) - stable_sigmoid(k * (xv.data[i] - 1.0));
            gx.data[i] += g.data[i] * d;
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

Tape::Var Tape::sum(Var x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (double v : xv.data) acc += v;
    return emit(Tensor::scalar(acc), {x}, [x](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        Tensor& gx = t.grad_buf(x);
        for (auto& v : gx.data) v += g;
    });
}

Tape::Var Tape::mean(Var x) {
    const Tensor& xv = value(x);
    if (xv.numel() == 0) throw ValidationError("mean: empty tensor");
    double acc = 0.0;
    for (double v : xv.data) acc += v;
    double inv = 1.0 / static_cast<double>(xv.numel());
    return emit(Tensor::scalar(acc * inv), {x}, [x, inv](Tape& t, Var self) {
        double g = t.grad(self).data[0] * inv;
        Tensor& gx = t.grad_buf(x);
        for (auto& v : gx.data) v += g;
    });
}

Tape::Var Tape::weighted_sum(const std::vector<Var>& vars, const std::vector<double>& coeffs) {
    if (vars.empty() || vars.size() != coeffs.size())
        throw ValidationError("weighted_sum: needs matching non-empty vars/coeffs");
    double acc = 0.0;
    for (size_t i = 0; i < vars.size(); ++i) {
        if (value(vars[i]).numel() != 1) throw ValidationError("weighted_sum: vars must be scalar");
        acc += coeffs[i] * value(vars[i]).data[0];
    }
    std::vector<Var> parents = vars;
    std::vector<double> cs = coeffs;
    return emit(Tensor::scalar(acc), std::move(parents), [cs](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        const auto& parents = t.nodes_[static_cast<size_t>(self)].parents;
        for (size_t i = 0; i < parents.size(); ++i)
            if (t.requires_grad(parents[i])) t.grad_buf(parents[i]).data[0] += g * cs[i];
    });
}

// ---------------------------------------------------------------------------
// convolution

Tape::Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad, int dilation) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.shape.size() != 3 || wv.shape.size() != 4 || bv.shape.size() != 1)
        throw ValidationError("conv2d: expected x{C,H,W}, w{OC,IC,KH,KW}, b{OC}");
    const int IC = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int OC = wv.shape[0], KH = wv.shape[2], KW = wv.shape[3];
    if (wv.shape[1] != IC) throw ValidationError("conv2d: channel mismatch");
    if (bv.shape[0] != OC) throw ValidationError("conv2d: bias mismatch");
    if (stride < 1 || dilation < 1 || pad < 0) throw ValidationError("conv2d: bad geometry");
    const int OH = (H + 2 * pad - dilation * (KH - 1) - 1) / stride + 1;
    const int OW = (W + 2 * pad - dilation * (KW - 1) - 1) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ValidationError("conv2d: empty output");

    Tensor out({OC, OH, OW});
    for (int oc = 0; oc < OC; ++oc) {
        double bias = bv.data[static_cast<size_t>(oc)];
        double* oplane = out.data.data() + static_cast<size_t>(oc) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) oplane[i] = bias;
        for (int ic = 0; ic < IC; ++ic) {
            const double* xplane = xv.data.data() + static_cast<size_t>(ic) * H * W;
            const double* wk = wv.data.data() + (static_cast<size_t>(oc) * IC + ic) * KH * KW;
            for (int ky = 0; ky < KH; ++ky) {
                int oy_min, oy_max;
                conv_range(H, OH, stride, pad, ky * dilation, oy_min, oy_max);
                for (int kx = 0; kx < KW; ++kx) {
                    double wval = wk[ky * KW + kx];
                    if (wval == 0.0) continue;
                    int ox_min, ox_max;
                    conv_range(W, OW, stride, pad, kx * dilation, ox_min, ox_max);
                    for (int oy = oy_min; oy <= oy_max; ++oy) {
                        const double* xrow = xplane + (oy * stride - pad + ky * dilation) * W;
                        double* orow = oplane + oy * OW;
                        int ix0 = ox_min * stride - pad + kx * dilation;
                        if (stride == 1) {
                            const double* xr = xrow + ix0;
                            for (int ox = ox_min; ox <= ox_max; ++ox) orow[ox] += wval * xr[ox - ox_min];
                        } else {
                            int ix = ix0;
                            for (int ox = ox_min; ox <= ox_max; ++ox, ix += stride) orow[ox] += wval * xrow[ix];
                        }
                    }
                }
            }
        }
    }

    auto geom = [=](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& xval = t.value(x);
        const Tensor& wval = t.value(w);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(w);
        const bool need_b = t.requires_grad(b);
        Tensor* gx = need_x ? &t.grad_buf(x) : nullptr;
        Tensor* gw = need_w ? &t.grad_buf(w) : nullptr;
        Tensor* gb = need_b ? &t.grad_buf(b) : nullptr;
        for (int oc = 0; oc < OC; ++oc) {
            const double* gplane = g.data.data() + static_cast<size_t>(oc) * OH * OW;
            if (need_b) {
                double acc = 0.0;
                for (int i = 0; i < OH * OW; ++i) acc += gplane[i];
                gb->data[static_cast<size_t>(oc)] += acc;
            }
            for (int ic = 0; ic < IC; ++ic) {
                const double* xplane = xval.data.data() + static_cast<size_t>(ic) * H * W;
                const double* wk = wval.data.data() + (static_cast<size_t>(oc) * IC + ic) * KH * KW;
                double* gwk = need_w ? gw->data.data() + (static_cast<size_t>(oc) * IC + ic) * KH * KW : nullptr;
                double* gxplane = need_x ? gx->data.data() + static_cast<size_t>(ic) * H * W : nullptr;
                for (int ky = 0; ky < KH; ++ky) {
                    int oy_min, oy_max;
                    conv_range(H, OH, stride, pad, ky * dilation, oy_min, oy_max);
                    for (int kx = 0; kx < KW; ++kx) {
                        int ox_min, ox_max;
                        conv_range(W, OW, stride, pad, kx * dilation, ox_min, ox_max);
                        double wv_tap = wk[ky * KW + kx];
                        double wacc = 0.0;
                        for (int oy = oy_min; oy <= oy_max; ++oy) {
                            const double* grow = gplane + oy * OW;
                            const double* xrow = xplane + (oy * stride - pad + ky * dilation) * W;
                            double* gxrow = need_x ? gxplane + (oy * stride - pad + ky * dilation) * W : nullptr;
                            int ix = ox_min * stride - pad + kx * dilation;
                            for (int ox = ox_min; ox <= ox_max; ++ox, ix += stride) {
                                double gv = grow[ox];
                                if (need_w) wacc += gv * xrow[ix];
                                if (need_x) gxrow[ix] += gv * wv_tap;
                            }
                        }
                        if (need_w) gwk[ky * KW + kx] += wacc;
                    }
                }
            }
        }
    };
    return emit(std::move(out), {x, w, b}, geom);
}

// ---------------------------------------------------------------------------
// fused losses

Tape::Var Tape::mse_to(Var x, Tensor target) {
    const Tensor& xv = value(x);
    if (!xv.same_shape(target)) throw ValidationError("mse_to: shape mismatch");
    if (xv.numel() == 0) throw ValidationError("mse_to: empty tensor");
    double acc = 0.0;
    for (size_t i = 0; i < xv.data.size(); ++i) {
        double d = xv.data[i] - target.data[i];
        acc += d * d;
    }
    double inv = 1.0 / static_cast<double>(xv.numel());
    auto tgt = std::make_shared<Tensor>(std::move(target));
    return emit(Tensor::scalar(acc * inv), {x}, [x, tgt, inv](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        const Tensor& xval = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] += g * 2.0 * inv * (xval.data[i] - tgt->data[i]);
    });
}

Tape::Var Tape::bce_logits(Var x, Tensor target, Tensor weight) {
    const Tensor& xv = value(x);
    if (!xv.same_shape(target) || !xv.same_shape(weight))
        throw ValidationError("bce_logits: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < xv.data.size(); ++i)
        acc += weight.data[i] * (stable_softplus(xv.data[i]) - target.data[i] * xv.data[i]);
    auto tgt = std::make_shared<Tensor>(std::move(target));
    auto wgt = std::make_shared<Tensor>(std::move(weight));
    return emit(Tensor::scalar(acc), {x}, [x, tgt, wgt](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        const Tensor& xval = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] += g * wgt->data[i] * (stable_sigmoid(xval.data[i]) - tgt->data[i]);
    });
}

Tape::Var Tape::weighted_sse(Var x, Tensor target, Tensor weight) {
    const Tensor& xv = value(x);
    if (!xv.same_shape(target) || !xv.same_shape(weight))
        throw ValidationError("weighted_sse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < xv.data.size(); ++i) {
        double d = xv.data[i] - target.data[i];
        acc += weight.data[i] * d * d;
    }
    auto tgt = std::make_shared<Tensor>(std::move(target));
    auto wgt = std::make_shared<Tensor>(std::move(weight));
    return emit(Tensor::scalar(acc), {x}, [x, tgt, wgt](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        const Tensor& xval = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] += g * 2.0 * wgt->data[i] * (xval.data[i] - tgt->data[i]);
    });
}

Tape::Var Tape::tv_l1(Var x) {
    const Tensor& xv = value(x);
    if (xv.shape.size() != 3) throw ValidationError("tv_l1: expected {C,H,W}");
    const int C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    double acc = 0.0;
    for (int c = 0; c < C; ++c) {
        const double* p = xv.data.data() + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx + 1 < W; ++xx) acc += std::abs(p[y * W + xx + 1] - p[y * W + xx]);
        for (int y = 0; y + 1 < H; ++y)
            for (int xx = 0; xx < W; ++xx) acc += std::abs(p[(y + 1) * W + xx] - p[y * W + xx]);
    }
    return emit(Tensor::scalar(acc), {x}, [x, C, H, W](Tape& t, Var self) {
        double g = t.grad(self).data[0];
        const Tensor& xval = t.value(x);
        Tensor& gx = t.grad_buf(x);
        for (int c = 0; c < C; ++c) {
            const double* p = xval.data.data() + static_cast<size_t>(c) * H * W;
            double* gp = gx.data.data() + static_cast<size_t>(c) * H * W;
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx + 1 < W; ++xx) {
                    double d = p[y * W + xx + 1] - p[y * W + xx];
                    double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    gp[y * W + xx + 1] += g * s;
                    gp[y * W + xx] -= g * s;
                }
            for (int y = 0; y + 1 < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    double d = p[(y + 1) * W + xx] - p[y * W + xx];
                    double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    gp[(y + 1) * W + xx] += g * s;
                    gp[y * W + xx] -= g * s;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// warp

Tape::Var Tape::warp(Var background, Var patch, const WarpPlan& plan) {
    const Tensor& bg = value(background);
    const Tensor& pv = value(patch);
    if (bg.shape.size() != 3 || bg.shape[0] != 3 || bg.shape[1] != plan.image_height ||
        bg.shape[2] != plan.image_width)
        throw ValidationError("warp: background does not match plan");
    if (pv.shape.size() != 3 || pv.shape[0] != 3 || pv.shape[1] != plan.patch_height ||
        pv.shape[2] != plan.patch_width)
        throw ValidationError("warp: patch does not match plan");

    const size_t img_plane = static_cast<size_t>(plan.image_width) * plan.image_height;
    const size_t patch_plane = static_cast<size_t>(plan.patch_width) * plan.patch_height;
    Tensor out = bg;
    for (const auto& tap : plan.taps) {
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) {
                int tx = tap.texel[static_cast<size_t>(k)];
                if (tx >= 0)
                    acc += tap.weight[static_cast<size_t>(k)] * pv.data[static_cast<size_t>(c) * patch_plane + static_cast<size_t>(tx)];
            }
            out.data[static_cast<size_t>(c) * img_plane + static_cast<size_t>(tap.pixel_index)] = acc;
        }
    }
    const WarpPlan* planp = &plan;  // plans outlive tapes in all call sites
    return emit(std::move(out), {background, patch},
                [background, patch, planp, img_plane, patch_plane](Tape& t, Var self) {
                    const Tensor& g = t.grad(self);
                    if (t.requires_grad(patch)) {
                        Tensor& gp = t.grad_buf(patch);
                        for (const auto& tap : planp->taps) {
                            for (int c = 0; c < 3; ++c) {
                                double gv = g.data[static_cast<size_t>(c) * img_plane + static_cast<size_t>(tap.pixel_index)];
                                for (int k = 0; k < 4; ++k) {
                                    int tx = tap.texel[static_cast<size_t>(k)];
                                    if (tx >= 0)
                                        gp.data[static_cast<size_t>(c) * patch_plane + static_cast<size_t>(tx)] +=
                                            gv * tap.weight[static_cast<size_t>(k)];
                                }
                            }
                        }
                    }
                    if (t.requires_grad(background)) {
                        Tensor& gb = t.grad_buf(background);
                        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
                        for (const auto& tap : planp->taps)
                            for (int c = 0; c < 3; ++c)
                                gb.data[static_cast<size_t>(c) * img_plane + static_cast<size_t>(tap.pixel_index)] -=
                                    g.data[static_cast<size_t>(c) * img_plane + static_cast<size_t>(tap.pixel_index)];
                    }
                });
}

double central_difference(const std::function<double(const Tensor&)>& f, Tensor at, size_t coord,
                          double h) {
    double orig = at.data[coord];
    at.data[coord] = orig + h;
    double fp = f(at);
    at.data[coord] = orig - h;
    double fm = f(at);
    at.data[coord] = orig;
    return (fp - fm) / (2.0 * h);
}

}  // namespace dynpatch
