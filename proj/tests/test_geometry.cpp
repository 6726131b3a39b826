#include <doctest.h>

#include <cmath>

#include "dynpatch/common.hpp"
#include "dynpatch/geometry.hpp"
#include "dynpatch/rng.hpp"
#include "support/oracles.hpp"

using namespace dynpatch;

namespace {

Quad random_convex_quad(Rng& rng, double cx, double cy, double r) {
    // jittered corners around a rectangle stay convex for small jitter
    double jx = 0.18 * r, jy = 0.18 * r;
    Quad q;
    q.corners[0] = {cx - r + rng.uniform(-jx, jx), cy - r + rng.uniform(-jy, jy)};
    q.corners[1] = {cx + r + rng.uniform(-jx, jx), cy - r + rng.uniform(-jy, jy)};
    q.corners[2] = {cx + r + rng.uniform(-jx, jx), cy + r + rng.uniform(-jy, jy)};
    q.corners[3] = {cx - r + rng.uniform(-jx, jx), cy + r + rng.uniform(-jy, jy)};
    return q;
}

}  // namespace

TEST_CASE("iou identity and disjoint cases") {
    BBox a{0, 0, 10, 10};
    CHECK(iou(a, a) == doctest::Approx(1.0));
    BBox b{5, 5, 6, 6};
    BBox c{0, 0, 1, 1};
    CHECK(iou(c, b) == 0.0);
}

TEST_CASE("iou matches the hand-derived overlap third") {
    // a=(0,0,2,2), b=(1,0,3,2): intersection 2, union 6
    BBox a{0, 0, 2, 2};
    BBox b{1, 0, 3, 2};
    double expect = oracles::iou_pixel_count(a, b, 0.125);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(iou(a, b) == doctest::Approx(expect).epsilon(1e-2));
}

TEST_CASE("iou rejects invalid boxes") {
    BBox bad{3, 0, 3, 5};
    BBox ok{0, 0, 1, 1};
    CHECK_THROWS_AS(iou(bad, ok), ValidationError);
    CHECK_THROWS_AS(iou(ok, bad), ValidationError);
    BBox nan_box{0, 0, std::nan(""), 1};
    CHECK_THROWS_AS(iou(nan_box, ok), ValidationError);
}

TEST_CASE("iou properties: symmetry, identity, range") {
    Rng rng(2024);
    for (int i = 0; i < 500; ++i) {
        BBox a{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
        a.x_max = a.x_min + rng.uniform(0.5, 30);
        a.y_max = a.y_min + rng.uniform(0.5, 30);
        BBox b{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
        b.x_max = b.x_min + rng.uniform(0.5, 30);
        b.y_max = b.y_min + rng.uniform(0.5, 30);
        double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(iou(a, a) == doctest::Approx(1.0));
    }
}

TEST_CASE("iou equals exact pixel counting on integer boxes") {
    Rng rng(77);
    for (int i = 0; i < 300; ++i) {
        BBox a, b;
        a.x_min = rng.uniform_int(0, 40);
        a.y_min = rng.uniform_int(0, 40);
        a.x_max = a.x_min + rng.uniform_int(1, 25);
        a.y_max = a.y_min + rng.uniform_int(1, 25);
        b.x_min = rng.uniform_int(0, 40);
        b.y_min = rng.uniform_int(0, 40);
        b.x_max = b.x_min + rng.uniform_int(1, 25);
        b.y_max = b.y_min + rng.uniform_int(1, 25);
        CHECK(iou(a, b) == doctest::Approx(oracles::iou_pixel_count(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("homography identity and translation") {
    Quad unit = Quad::from_rect(0, 0, 1, 1);
    Homography h = homography_from_quads(unit, unit);
    for (int i = 0; i < 9; ++i)
        CHECK(h.m[static_cast<size_t>(i)] == doctest::Approx(i % 4 == 0 ? 1.0 : 0.0).epsilon(1e-9));

    Quad moved = Quad::from_rect(5, 0, 6, 1);
    Homography t = homography_from_quads(unit, moved);
    CHECK(t.m[0] == doctest::Approx(1.0));
    CHECK(t.m[2] == doctest::Approx(5.0));
    CHECK(t.m[5] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(t.m[8] == doctest::Approx(1.0));
}

TEST_CASE("homography reprojects corners within 1e-6 and matches direct solver") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        Quad src = random_convex_quad(rng, rng.uniform(5, 60), rng.uniform(5, 60), rng.uniform(2, 20));
        Quad dst = random_convex_quad(rng, rng.uniform(5, 60), rng.uniform(5, 60), rng.uniform(2, 20));
        if (!src.is_valid() || !dst.is_valid()) continue;
        Homography h = homography_from_quads(src, dst);
        auto direct = oracles::homography_direct(src, dst);
        for (int i = 0; i < 4; ++i) {
            Point2 p = h.apply(src.corners[static_cast<size_t>(i)]);
            CHECK(std::abs(p.x - dst.corners[static_cast<size_t>(i)].x) < 1e-6);
            CHECK(std::abs(p.y - dst.corners[static_cast<size_t>(i)].y) < 1e-6);
        }
        for (int i = 0; i < 9; ++i)
            CHECK(h.m[static_cast<size_t>(i)] ==
                  doctest::Approx(direct[static_cast<size_t>(i)]).epsilon(1e-6));
    }
}

TEST_CASE("homography inverse round trip") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        Quad src = random_convex_quad(rng, 30, 30, rng.uniform(5, 15));
        Quad dst = random_convex_quad(rng, rng.uniform(20, 40), rng.uniform(20, 40), rng.uniform(4, 18));
        if (!src.is_valid() || !dst.is_valid()) continue;
        Homography h = homography_from_quads(src, dst);
        Homography inv = h.inverse();
        for (int i = 0; i < 20; ++i) {
            Point2 p{rng.uniform(0, 60), rng.uniform(0, 60)};
            Point2 back = inv.apply(h.apply(p));
            CHECK(std::abs(back.x - p.x) < 1e-6);
            CHECK(std::abs(back.y - p.y) < 1e-6);
        }
    }
}

TEST_CASE("homography rejects degenerate quads") {
    Quad degenerate;
    degenerate.corners = {Point2{0, 0}, Point2{1, 1}, Point2{2, 2}, Point2{3, 3}};
    Quad unit = Quad::from_rect(0, 0, 1, 1);
    CHECK_THROWS_AS(homography_from_quads(degenerate, unit), ValidationError);
    CHECK_THROWS_AS(homography_from_quads(unit, degenerate), ValidationError);
}

TEST_CASE("warp identity rectangle reproduces the patch") {
    int n = 16;
    Image patch(n, n);
    Rng rng(9);
    for (auto& v : patch.px) v = rng.uniform();
    quantize8(patch);
    Image bg(n, n, 0.25);
    Quad full = Quad::from_rect(-0.5, -0.5, n - 0.5, n - 0.5);
    Image out = warp_composite(bg, patch, full);
    for (size_t i = 0; i < out.px.size(); ++i) CHECK(out.px[i] == doctest::Approx(patch.px[i]).epsilon(1e-12));
}

TEST_CASE("warp leaves pixels outside the quad bit-identical") {
    Image bg(64, 64);
    Rng rng(11);
    for (auto& v : bg.px) v = rng.uniform();
    Image patch(8, 8, 0.5);
    Quad dst;
    dst.corners = {Point2{20.3, 18.2}, Point2{44.8, 21.5}, Point2{42.2, 47.9}, Point2{18.7, 44.1}};
    Image out = warp_composite(bg, patch, dst);
    int changed = 0, outside_changed = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            bool inside = dst.contains({static_cast<double>(x), static_cast<double>(y)});
            bool differs = false;
            for (int c = 0; c < 3; ++c)
                if (out.at(y, x, c) != bg.at(y, x, c)) differs = true;
            if (differs) ++changed;
            if (differs && !inside) ++outside_changed;
        }
    CHECK(changed > 0);
    CHECK(outside_changed == 0);
}

TEST_CASE("warp rejects bad input") {
    Image bg(32, 32, 0.1);
    Image patch(8, 8, 0.5);
    Quad degenerate;
    degenerate.corners = {Point2{0, 0}, Point2{5, 5}, Point2{10, 10}, Point2{15, 15}};
    CHECK_THROWS_AS(warp_composite(bg, patch, degenerate), ValidationError);
    Image bad_patch(8, 8, 1.5);
    Quad ok = Quad::from_rect(4, 4, 20, 20);
    CHECK_THROWS_AS(warp_composite(bg, bad_patch, ok), ValidationError);
}

TEST_CASE("warp output is linear in patch values (analytic jacobian = taps)") {
    // output pixels are weighted sums of patch texels; perturbing one texel
    // changes each covered pixel by exactly its tap weight
    Image bg(24, 24, 0.3);
    Image patch(6, 6, 0.4);
    Quad dst;
    dst.corners = {Point2{4.2, 5.1}, Point2{18.9, 6.0}, Point2{17.8, 19.3}, Point2{5.5, 18.2}};
    WarpPlan plan = make_warp_plan(dst, 24, 24, 6, 6);
    Image base = warp_composite(bg, patch, plan);

    Image bumped = patch;
    size_t texel = (3 * 6 + 2);
    double h = 0.05;
    bumped.px[texel * 3 + 1] += h;
    Image out = warp_composite(bg, bumped, plan);
    for (const auto& tap : plan.taps) {
        double w = 0.0;
        for (int k = 0; k < 4; ++k)
            if (tap.texel[static_cast<size_t>(k)] == static_cast<int>(texel)) w = tap.weight[static_cast<size_t>(k)];
        double delta = out.px[static_cast<size_t>(tap.pixel_index) * 3 + 1] -
                       base.px[static_cast<size_t>(tap.pixel_index) * 3 + 1];
        CHECK(delta == doctest::Approx(w * h).epsilon(1e-9));
    }
}

TEST_CASE("quad validation catches collinear corners and reversed winding") {
    Quad collinear;
    collinear.corners = {Point2{0, 0}, Point2{1, 0}, Point2{2, 0}, Point2{3, 0}};
    CHECK(!collinear.is_valid());
    Quad reversed;
    reversed.corners = {Point2{0, 0}, Point2{0, 10}, Point2{10, 10}, Point2{10, 0}};
    CHECK(!reversed.is_valid());
    CHECK(Quad::from_rect(0, 0, 10, 10).is_valid());
}
