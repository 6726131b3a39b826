#pragma once

#include <array>
#include <vector>

#include "dynpatch/image.hpp"

namespace dynpatch {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Axis-aligned box in pixel coordinates, corner representation.
struct BBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    Point2 center() const { return {0.5 * (x_min + x_max), 0.5 * (y_min + y_max)}; }

    bool is_valid() const;
    // Throws ValidationError when extent is non-positive or non-finite.
    void validate(const char* who = "bbox") const;
};

double iou(const BBox& a, const BBox& b);

// Four corners ordered top-left, top-right, bottom-right, bottom-left.
// In image coordinates (y down) this ordering has positive shoelace area.
struct Quad {
    std::array<Point2, 4> corners{};

    static Quad from_rect(double x0, double y0, double x1, double y1);

    double signed_area() const;
    bool is_valid() const;  // strictly convex, consistent winding
    void validate(const char* who = "quad") const;

    bool contains(const Point2& p) const;
    BBox bounding_box() const;
};

// 3x3 projective map, normalized so the bottom-right entry is 1.
struct Homography {
    // row-major
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }

    Point2 apply(const Point2& p) const;
    Homography inverse() const;
    Homography composed(const Homography& rhs) const;  // this ∘ rhs
    double determinant() const;
    void normalize();  // scale so m[8] == 1
};

// Exact 4-point estimate via the normalized direct linear transform.
// Maps src corner i onto dst corner i.
Homography homography_from_quads(const Quad& src, const Quad& dst);

// Precomputed bilinear taps for warping a patch onto a quad footprint.
// Each covered background pixel stores up to four source texels and weights;
// texel index -1 means the tap fell outside the patch (zero padding).
struct WarpTap {
    int pixel_index;               // flat y*width+x into the background
    std::array<int, 4> texel;      // flat y*patch_width+x into the patch, or -1
    std::array<double, 4> weight;
};

struct WarpPlan {
    int image_width = 0, image_height = 0;
    int patch_width = 0, patch_height = 0;
    std::vector<WarpTap> taps;
};

// Footprint + homography for compositing `patch_w x patch_h` texels onto
// `dst` inside an image of the given size. The quad may extend beyond the
// image; out-of-frame pixels are simply not covered.
WarpPlan make_warp_plan(const Quad& dst, int image_width, int image_height,
                        int patch_width, int patch_height);

// Composite `patch` onto `background` over `dst`. Pixels outside the quad
// are bit-identical to the background. Output is linear in patch values;
// the autodiff op reuses the same WarpPlan for its backward pass.
Image warp_composite(const Image& background, const Image& patch, const Quad& dst);
Image warp_composite(const Image& background, const Image& patch, const WarpPlan& plan);

// Flat-fills every pixel the warp would cover. Used for the calibration
// screen so covered pixels carry the exact configured color.
void fill_quad(Image& img, const Quad& dst, double r, double g, double b);

}  // namespace dynpatch
