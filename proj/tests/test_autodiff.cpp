#include <doctest.h>

#include <cmath>

#include "dynpatch/autodiff.hpp"
#include "dynpatch/common.hpp"
#include "dynpatch/rng.hpp"
#include "support/oracles.hpp"

using namespace dynpatch;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

std::vector<size_t> sample_coords(size_t n, size_t count, Rng& rng) {
    std::vector<size_t> out;
    for (size_t i = 0; i < count; ++i) out.push_back(static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1)));
    return out;
}

}  // namespace

TEST_CASE("elementwise op values") {
    Tape tape;
    Tensor a({3});
    a.data = {1.0, -2.0, 3.0};
    Tensor b({3});
    b.data = {0.5, 4.0, -1.0};
    auto va = tape.input(a, false);
    auto vb = tape.input(b, false);
    CHECK(tape.value(tape.add(va, vb)).data[1] == doctest::Approx(2.0));
    CHECK(tape.value(tape.mul(va, vb)).data[2] == doctest::Approx(-3.0));
    CHECK(tape.value(tape.vmin(va, vb)).data[0] == doctest::Approx(0.5));
    CHECK(tape.value(tape.vmax(va, vb)).data[1] == doctest::Approx(4.0));
    CHECK(tape.value(tape.relu(va)).data[1] == 0.0);
    CHECK(tape.value(tape.sigmoid(tape.scale(va, 0.0))).data[0] == doctest::Approx(0.5));
}

TEST_CASE("backward of composite scalar expression matches finite differences") {
    Rng rng(31);
    Tensor x0 = random_tensor({12}, rng);
    auto build = [](Tape& tape, Tape::Var x) {
        auto s = tape.sigmoid(x);
        auto r = tape.leaky_relu(tape.offset(tape.scale(x, 1.7), -0.2), 0.1);
        auto m = tape.mul(s, r);
        auto mn = tape.vmin(m, tape.sigmoid(tape.scale(x, -1.0)));
        return tape.mean(tape.mul(mn, mn));
    };
    Tape tape;
    auto vx = tape.input(x0, true);
    auto root = build(tape, vx);
    tape.backward(root);
    const Tensor& g = tape.grad(vx);

    auto f = [&](const Tensor& t) {
        Tape tp;
        auto v = tp.input(t, false);
        return tp.value(build(tp, v)).data[0];
    };
    std::vector<size_t> coords(12);
    for (size_t i = 0; i < 12; ++i) coords[i] = i;
    auto stats = oracles::gradient_check(f, x0, g, coords, 1e-6, 1e-6);
    CHECK(stats.pass_fraction() == 1.0);
}

TEST_CASE("conv2d forward matches a hand computation") {
    Tape tape;
    Tensor x({1, 3, 3});
    x.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    Tensor w({1, 1, 3, 3});
    w.data = {0, 0, 0, 0, 1, 0, 0, 0, 0};  // identity kernel
    Tensor b({1});
    b.data = {0.5};
    auto out = tape.conv2d(tape.input(x, false), tape.input(w, false), tape.input(b, false), 1, 1);
    for (int i = 0; i < 9; ++i)
        CHECK(tape.value(out).data[static_cast<size_t>(i)] == doctest::Approx(x.data[static_cast<size_t>(i)] + 0.5));
}

TEST_CASE("conv2d strided output size and values") {
    Tape tape;
    Tensor x({1, 4, 4});
    for (int i = 0; i < 16; ++i) x.data[static_cast<size_t>(i)] = i;
    Tensor w({1, 1, 3, 3});
    w.data.assign(9, 1.0);
    Tensor b({1});
    auto out = tape.conv2d(tape.input(x, false), tape.input(w, false), tape.input(b, false), 2, 1);
    CHECK(tape.value(out).shape == std::vector<int>{1, 2, 2});
    // top-left window (pad 1): sums x[0..1][0..1]
    CHECK(tape.value(out).data[0] == doctest::Approx(0 + 1 + 4 + 5));
}

TEST_CASE("conv2d gradients match finite differences for x, w and b") {
    Rng rng(42);
    for (int stride : {1, 2}) {
        for (int dilation : {1, 2}) {
            if (stride == 2 && dilation == 2) continue;
            Tensor x0 = random_tensor({2, 7, 7}, rng);
            Tensor w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
            Tensor b0 = random_tensor({3}, rng, -0.2, 0.2);
            int pad = dilation;

            auto run = [&](const Tensor& x, const Tensor& w, const Tensor& b, bool grads,
                           Tensor* gx, Tensor* gw, Tensor* gb) {
                Tape tape;
                auto vx = tape.input(x, grads);
                auto vw = tape.input(w, grads);
                auto vb = tape.input(b, grads);
                auto y = tape.conv2d(vx, vw, vb, stride, pad, dilation);
                auto root = tape.mean(tape.mul(y, y));
                double val = tape.value(root).data[0];
                if (grads) {
                    tape.backward(root);
                    *gx = tape.grad(vx);
                    *gw = tape.grad(vw);
                    *gb = tape.grad(vb);
                }
                return val;
            };
            Tensor gx, gw, gb;
            run(x0, w0, b0, true, &gx, &gw, &gb);

            auto fx = [&](const Tensor& t) { return run(t, w0, b0, false, nullptr, nullptr, nullptr); };
            auto fw = [&](const Tensor& t) { return run(x0, t, b0, false, nullptr, nullptr, nullptr); };
            auto fb = [&](const Tensor& t) { return run(x0, w0, t, false, nullptr, nullptr, nullptr); };

            auto sx = oracles::gradient_check(fx, x0, gx, sample_coords(x0.numel(), 30, rng), 1e-6, 1e-5);
            auto sw = oracles::gradient_check(fw, w0, gw, sample_coords(w0.numel(), 30, rng), 1e-6, 1e-5);
            auto sb = oracles::gradient_check(fb, b0, gb, {0, 1, 2}, 1e-6, 1e-5);
            CHECK(sx.pass_fraction() == 1.0);
            CHECK(sw.pass_fraction() == 1.0);
            CHECK(sb.pass_fraction() == 1.0);
        }
    }
}

TEST_CASE("gather scatter gradient") {
    Rng rng(7);
    Tensor x0 = random_tensor({10}, rng);
    Tape tape;
    auto vx = tape.input(x0, true);
    auto g = tape.gather(vx, {1, 3, 3, 7});
    auto root = tape.sum(tape.mul(g, g));
    tape.backward(root);
    const Tensor& grad = tape.grad(vx);
    CHECK(grad.data[0] == 0.0);
    CHECK(grad.data[1] == doctest::Approx(2 * x0.data[1]));
    CHECK(grad.data[3] == doctest::Approx(4 * x0.data[3]));  // duplicated index accumulates
    CHECK(grad.data[7] == doctest::Approx(2 * x0.data[7]));
}

TEST_CASE("fused losses match finite differences") {
    Rng rng(12);
    Tensor x0 = random_tensor({2, 5, 5}, rng, 0.05, 0.95);
    Tensor target = random_tensor({2, 5, 5}, rng, 0.0, 1.0);
    Tensor weight = random_tensor({2, 5, 5}, rng, 0.1, 2.0);

    auto build = [&](Tape& tape, Tape::Var vx) {
        auto a = tape.mse_to(vx, target);
        auto b = tape.bce_logits(vx, target, weight);
        auto c = tape.weighted_sse(vx, target, weight);
        auto d = tape.tv_l1(vx);
        auto e = tape.softclip01(vx, 25.0);
        auto f = tape.mse_to(e, target);
        return tape.weighted_sum({a, b, c, d, f}, {1.0, 0.3, 0.2, 0.05, 0.7});
    };
    Tape tape;
    auto vx = tape.input(x0, true);
    auto root = build(tape, vx);
    tape.backward(root);
    const Tensor& g = tape.grad(vx);
    auto f = [&](const Tensor& t) {
        Tape tp;
        auto v = tp.input(t, false);
        return tp.value(build(tp, v)).data[0];
    };
    auto stats = oracles::gradient_check(f, x0, g, sample_coords(x0.numel(), 40, rng), 1e-6, 1e-5);
    CHECK(stats.pass_fraction() == 1.0);
}

TEST_CASE("tv_l1 value on the checkerboard") {
    Tape tape;
    Tensor x({1, 2, 2});
    x.data = {0, 1, 1, 0};
    CHECK(tape.value(tape.tv_l1(tape.input(x, false))).data[0] == doctest::Approx(4.0));
}

TEST_CASE("exp_clamped saturates with zero gradient outside the window") {
    Tape tape;
    Tensor x({3});
    x.data = {-10.0, 0.5, 10.0};
    auto vx = tape.input(x, true);
    auto y = tape.exp_clamped(vx, -6.0, 6.0);
    CHECK(tape.value(y).data[0] == doctest::Approx(std::exp(-6.0)));
    CHECK(tape.value(y).data[2] == doctest::Approx(std::exp(6.0)));
    auto root = tape.sum(y);
    tape.backward(root);
    CHECK(tape.grad(vx).data[0] == 0.0);
    CHECK(tape.grad(vx).data[1] == doctest::Approx(std::exp(0.5)));
    CHECK(tape.grad(vx).data[2] == 0.0);
}

TEST_CASE("warp tape op matches plain warp and has exact patch gradients") {
    Rng rng(23);
    Image bg_img(20, 20);
    for (auto& v : bg_img.px) v = rng.uniform();
    Image patch_img(5, 5);
    for (auto& v : patch_img.px) v = rng.uniform();
    Quad dst;
    dst.corners = {Point2{3.5, 4.1}, Point2{15.2, 5.0}, Point2{14.1, 16.3}, Point2{4.4, 15.0}};
    WarpPlan plan = make_warp_plan(dst, 20, 20, 5, 5);

    Image plain = warp_composite(bg_img, patch_img, plan);

    Tensor patch0 = image_to_chw(patch_img);
    auto build = [&](Tape& tape, Tape::Var p) {
        auto bg = tape.constant(image_to_chw(bg_img));
        auto warped = tape.warp(bg, p, plan);
        return tape.mean(warped);
    };
    Tape tape;
    auto vp = tape.input(patch0, true);
    auto bgv = tape.constant(image_to_chw(bg_img));
    auto wv = tape.warp(bgv, vp, plan);
    CHECK(tape.value(wv).data == image_to_chw(plain).data);

    auto root = tape.mean(wv);
    tape.backward(root);
    const Tensor& g = tape.grad(vp);
    auto f = [&](const Tensor& t) {
        Tape tp;
        auto v = tp.input(t, false);
        return tp.value(build(tp, v)).data[0];
    };
    std::vector<size_t> coords;
    for (size_t i = 0; i < patch0.numel(); ++i) coords.push_back(i);
    auto stats = oracles::gradient_check(f, patch0, g, coords, 1e-5, 1e-3);
    CHECK(stats.pass_fraction() >= 0.95);
    CHECK(stats.worst_rel < 1e-3);
}

TEST_CASE("backward rejects non-scalar roots and unconnected graphs") {
    Tape tape;
    Tensor x({4}, 1.0);
    auto vx = tape.input(x, true);
    CHECK_THROWS_AS(tape.backward(vx), ValidationError);
    auto c = tape.constant(Tensor::scalar(3.0));
    CHECK_THROWS_AS(tape.backward(c), ValidationError);
}
