#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dynpatch/geometry.hpp"
#include "dynpatch/image.hpp"

namespace dynpatch {

// Dense row-major tensor of doubles. Shapes are small (<= 4 dims in practice).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { data.assign(numel_of(shape), 0.0); }
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)) { data.assign(numel_of(shape), fill); }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }
    size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }
};

Tensor image_to_chw(const Image& img);
Image chw_to_image(const Tensor& t);

// Reverse-mode tape. Build a computation from inputs to a scalar root, call
// backward(root), then read grad() of any input. Node indices are only valid
// for the tape that issued them.
class Tape {
public:
    using Var = int;

    Var input(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return input(std::move(value), false); }
    Var scalar_const(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v)].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // --- structural ops -----------------------------------------------------
    Var gather(Var x, std::vector<int64_t> indices);
    Var reshape(Var x, std::vector<int> shape);

    // --- elementwise --------------------------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var vmin(Var a, Var b);
    Var vmax(Var a, Var b);
    Var relu(Var x);
    Var leaky_relu(Var x, double negative_slope);
    Var sigmoid(Var x);
    Var exp_clamped(Var x, double lo, double hi);
    Var scale(Var x, double s);
    Var offset(Var x, double c);
    // smooth clamp to [0,1]: (softplus(k x) - softplus(k (x-1))) / k
    Var softclip01(Var x, double k);

    // --- reductions / compositions ------------------------------------------
    Var sum(Var x);
    Var mean(Var x);
    // weighted sum of scalar vars: sum_i coeff[i] * v[i]
    Var weighted_sum(const std::vector<Var>& vars, const std::vector<double>& coeffs);

    // --- neural-net ops -----------------------------------------------------
    // x {IC,H,W}, w {OC,IC,KH,KW}, b {OC} -> {OC,OH,OW}
    Var conv2d(Var x, Var w, Var b, int stride, int pad, int dilation = 1);

    // --- fused losses (value + analytic backward in one node) ---------------
    // mean((x - target)^2), target constant
    Var mse_to(Var x, Tensor target);
    // sum_i w_i * (softplus(x_i) - t_i * x_i)   (binary cross entropy on logits)
    Var bce_logits(Var x, Tensor target, Tensor weight);
    // sum_i w_i * (x_i - t_i)^2
    Var weighted_sse(Var x, Tensor target, Tensor weight);
    // anisotropic total variation (L1 of forward differences), x {C,H,W}
    Var tv_l1(Var x);

    // --- compositing ---------------------------------------------------------
    // background {3,H,W}, patch {3,h,w}; plan decides covered pixels
    Var warp(Var background, Var patch, const WarpPlan& plan);

    // Propagates d(root)/d(node) into every requires_grad node. Root must be
    // scalar. Grads accumulate; call once per tape in normal use.
    void backward(Var root);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_ready = false;
        std::vector<Var> parents;
        std::function<void(Tape&, Var)> backprop;  // reads grad of self, adds to parents
    };
    std::vector<Node> nodes_;

    Var emit(Tensor value, std::vector<Var> parents, std::function<void(Tape&, Var)> backprop);
    Tensor& grad_buf(Var v);
    friend struct TapeAccess;
};

// Central finite differences of a scalar-valued rebuild function with respect
// to one coordinate of an input tensor. Test/diagnostic helper; evaluates the
// function twice per call.
double central_difference(const std::function<double(const Tensor&)>& f, Tensor at, size_t coord,
                          double h);

}  // namespace dynpatch
