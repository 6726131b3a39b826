#include "dynpatch/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {

constexpr double kAreaEps = 1e-9;

// Solves A x = b in place, n <= 8, partial pivoting. Returns false if singular.
bool solve_linear(int n, double a[][9], double* x) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12) return false;
        if (pivot != col)
            for (int c = 0; c <= n; ++c) std::swap(a[pivot][c], a[col][c]);
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (int c = col; c <= n; ++c) a[r][c] -= f * a[col][c];
        }
    }
    for (int i = 0; i < n; ++i) x[i] = a[i][n] / a[i][i];
    return true;
}

struct Similarity {
    double scale = 1.0;
    Point2 shift{};  // applied before scaling
};

Similarity normalizing_transform(const Quad& q) {
    Point2 c{0, 0};
    for (const auto& p : q.corners) {
        c.x += p.x;
        c.y += p.y;
    }
    c.x *= 0.25;
    c.y *= 0.25;
    double mean_dist = 0.0;
    for (const auto& p : q.corners) mean_dist += std::hypot(p.x - c.x, p.y - c.y);
    mean_dist *= 0.25;
    double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
    return {s, {-c.x, -c.y}};
}

Homography similarity_matrix(const Similarity& t) {
    Homography h;
    h.m = {t.scale, 0, t.scale * t.shift.x, 0, t.scale, t.scale * t.shift.y, 0, 0, 1};
    return h;
}

Homography similarity_inverse(const Similarity& t) {
    Homography h;
    h.m = {1.0 / t.scale, 0, -t.shift.x, 0, 1.0 / t.scale, -t.shift.y, 0, 0, 1};
    return h;
}

}  // namespace

bool BBox::is_valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
}

void BBox::validate(const char* who) const {
    if (!is_valid()) throw ValidationError(std::string(who) + ": invalid box extent");
}

double iou(const BBox& a, const BBox& b) {
    a.validate("iou lhs");
    b.validate("iou rhs");
    // canonical operand order keeps the result bitwise symmetric even when
    // the compiler contracts multiply-adds
    auto key = [](const BBox& x) { return std::array<double, 4>{x.x_min, x.y_min, x.x_max, x.y_max}; };
    const BBox& p = key(a) <= key(b) ? a : b;
    const BBox& q = key(a) <= key(b) ? b : a;
    double ix = std::min(p.x_max, q.x_max) - std::max(p.x_min, q.x_min);
    double iy = std::min(p.y_max, q.y_max) - std::max(p.y_min, q.y_min);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    double inter = ix * iy;
    return inter / (p.area() + q.area() - inter);
}

Quad Quad::from_rect(double x0, double y0, double x1, double y1) {
    Quad q;
    q.corners = {Point2{x0, y0}, Point2{x1, y0}, Point2{x1, y1}, Point2{x0, y1}};
    return q;
}

double Quad::signed_area() const {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
        const Point2& p = corners[static_cast<size_t>(i)];
        const Point2& n = corners[static_cast<size_t>((i + 1) % 4)];
        s += p.x * n.y - n.x * p.y;
    }
    return 0.5 * s;
}

bool Quad::is_valid() const {
    for (const auto& p : corners)
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
    if (signed_area() <= kAreaEps) return false;
    // winding consistency: every corner turn in the same direction
    for (int i = 0; i < 4; ++i) {
        const Point2& a = corners[static_cast<size_t>(i)];
        const Point2& b = corners[static_cast<size_t>((i + 1) % 4)];
        const Point2& c = corners[static_cast<size_t>((i + 2) % 4)];
        double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if (cross <= kAreaEps) return false;
    }
    return true;
}

void Quad::validate(const char* who) const {
    if (!is_valid()) throw ValidationError(std::string(who) + ": degenerate quad");
}

bool Quad::contains(const Point2& p) const {
    for (int i = 0; i < 4; ++i) {
        const Point2& a = corners[static_cast<size_t>(i)];
        const Point2& b = corners[static_cast<size_t>((i + 1) % 4)];
        double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if (cross < 0.0) return false;
    }
    return true;
}

BBox Quad::bounding_box() const {
    BBox b{corners[0].x, corners[0].y, corners[0].x, corners[0].y};
    for (const auto& p : corners) {
        b.x_min = std::min(b.x_min, p.x);
        b.y_min = std::min(b.y_min, p.y);
        b.x_max = std::max(b.x_max, p.x);
        b.y_max = std::max(b.y_max, p.y);
    }
    return b;
}

Point2 Homography::apply(const Point2& p) const {
    double w = m[6] * p.x + m[7] * p.y + m[8];
    if (std::abs(w) < 1e-15) throw ValidationError("homography: point maps to infinity");
    return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
}

double Homography::determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
    double det = determinant();
    if (std::abs(det) < 1e-15) throw ValidationError("homography: singular matrix");
    Homography r;
    r.m[0] = (m[4] * m[8] - m[5] * m[7]) / det;
    r.m[1] = (m[2] * m[7] - m[1] * m[8]) / det;
    r.m[2] = (m[1] * m[5] - m[2] * m[4]) / det;
    r.m[3] = (m[5] * m[6] - m[3] * m[8]) / det;
    r.m[4] = (m[0] * m[8] - m[2] * m[6]) / det;
    r.m[5] = (m[2] * m[3] - m[0] * m[5]) / det;
    r.m[6] = (m[3] * m[7] - m[4] * m[6]) / det;
    r.m[7] = (m[1] * m[6] - m[0] * m[7]) / det;
    r.m[8] = (m[0] * m[4] - m[1] * m[3]) / det;
    r.normalize();
    return r;
}

Homography Homography::composed(const Homography& rhs) const {
    Homography r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += m[static_cast<size_t>(3 * i + k)] * rhs.m[static_cast<size_t>(3 * k + j)];
            r.m[static_cast<size_t>(3 * i + j)] = acc;
        }
    r.normalize();
    return r;
}

void Homography::normalize() {
    if (std::abs(m[8]) < 1e-15) throw ValidationError("homography: cannot normalize, h33 ~ 0");
    double s = m[8];
    for (auto& v : m) v /= s;
}

Homography homography_from_quads(const Quad& src, const Quad& dst) {
    src.validate("homography src");
    dst.validate("homography dst");

    Similarity ts = normalizing_transform(src);
    Similarity td = normalizing_transform(dst);

    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = (src.corners[static_cast<size_t>(i)].x + ts.shift.x) * ts.scale;
        double y = (src.corners[static_cast<size_t>(i)].y + ts.shift.y) * ts.scale;
        double u = (dst.corners[static_cast<size_t>(i)].x + td.shift.x) * td.scale;
        double v = (dst.corners[static_cast<size_t>(i)].y + td.shift.y) * td.scale;
        double* r0 = a[2 * i];
        double* r1 = a[2 * i + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    double h[8];
    if (!solve_linear(8, a, h))
        throw ValidationError("homography: singular correspondence system");

    Homography hn;
    hn.m = {h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0};
    Homography result = similarity_inverse(td).composed(hn).composed(similarity_matrix(ts));
    if (std::abs(result.determinant()) < 1e-15)
        throw ValidationError("homography: degenerate estimate");
    return result;
}

WarpPlan make_warp_plan(const Quad& dst, int image_width, int image_height,
                        int patch_width, int patch_height) {
    dst.validate("warp dst");
    if (patch_width <= 0 || patch_height <= 0)
        throw ValidationError("warp: empty patch");

    // Map the quad onto the outer edges of the patch texel grid so interior
    // pixel centers land inside [-0.5, W-0.5] x [-0.5, H-0.5].
    Quad patch_rect = Quad::from_rect(-0.5, -0.5, patch_width - 0.5, patch_height - 0.5);
    Homography to_patch = homography_from_quads(dst, patch_rect);

    WarpPlan plan;
    plan.image_width = image_width;
    plan.image_height = image_height;
    plan.patch_width = patch_width;
    plan.patch_height = patch_height;

    BBox bb = dst.bounding_box();
    int x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)));
    int y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)));
    int x1 = std::min(image_width - 1, static_cast<int>(std::ceil(bb.x_max)));
    int y1 = std::min(image_height - 1, static_cast<int>(std::ceil(bb.y_max)));

    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            Point2 p{static_cast<double>(x), static_cast<double>(y)};
            if (!dst.contains(p)) continue;
            Point2 s = to_patch.apply(p);
            int sx0 = static_cast<int>(std::floor(s.x));
            int sy0 = static_cast<int>(std::floor(s.y));
            double fx = s.x - sx0;
            double fy = s.y - sy0;
            WarpTap tap;
            tap.pixel_index = y * image_width + x;
            const int xs[2] = {sx0, sx0 + 1};
            const int ys[2] = {sy0, sy0 + 1};
            const double wx[2] = {1.0 - fx, fx};
            const double wy[2] = {1.0 - fy, fy};
            int k = 0;
            for (int iy = 0; iy < 2; ++iy) {
                for (int ix = 0; ix < 2; ++ix) {
                    bool in = xs[ix] >= 0 && xs[ix] < patch_width && ys[iy] >= 0 && ys[iy] < patch_height;
                    tap.texel[static_cast<size_t>(k)] = in ? ys[iy] * patch_width + xs[ix] : -1;
                    tap.weight[static_cast<size_t>(k)] = wx[ix] * wy[iy];
                    ++k;
                }
            }
            plan.taps.push_back(tap);
        }
    }
    return plan;
}

Image warp_composite(const Image& background, const Image& patch, const WarpPlan& plan) {
    if (background.width != plan.image_width || background.height != plan.image_height)
        throw ValidationError("warp: background does not match plan");
    if (patch.width != plan.patch_width || patch.height != plan.patch_height)
        throw ValidationError("warp: patch does not match plan");
    for (double v : patch.px)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("warp: patch values outside [0,1]");

    Image out = background;
    for (const auto& tap : plan.taps) {
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) {
                int t = tap.texel[static_cast<size_t>(k)];
                if (t >= 0) acc += tap.weight[static_cast<size_t>(k)] * patch.px[static_cast<size_t>(t) * 3 + c];
            }
            out.px[static_cast<size_t>(tap.pixel_index) * 3 + c] = acc;
        }
    }
    return out;
}

Image warp_composite(const Image& background, const Image& patch, const Quad& dst) {
    WarpPlan plan = make_warp_plan(dst, background.width, background.height, patch.width, patch.height);
    return warp_composite(background, patch, plan);
}

void fill_quad(Image& img, const Quad& dst, double r, double g, double b) {
    dst.validate("fill quad");
    BBox bb = dst.bounding_box();
    int x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)));
    int y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)));
    int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(bb.x_max)));
    int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(bb.y_max)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (dst.contains({static_cast<double>(x), static_cast<double>(y)})) img.set(y, x, r, g, b);
}

}  // namespace dynpatch
