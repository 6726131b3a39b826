#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace dynpatch {

// Interleaved RGB image, double precision, values nominally in [0,1].
// Row-major, index (y, x, c) -> px[(y*width + x)*3 + c].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> px;

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), px(static_cast<size_t>(w) * h * 3, fill) {}

    double& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    void set(int y, int x, double r, double g, double b) {
        size_t i = (static_cast<size_t>(y) * width + x) * 3;
        px[i] = r;
        px[i + 1] = g;
        px[i + 2] = b;
    }

    bool in_bounds(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

// Snap every channel to the 8-bit grid (round to nearest k/255). Rendered
// frames are quantized before use so in-memory data matches PNG round trips.
void quantize8(Image& img);

std::array<uint8_t, 3> to_rgb8(const Image& img, int y, int x);

void clamp01(Image& img);

bool images_equal(const Image& a, const Image& b);

// Mean absolute difference over all channels; images must share shape.
double mean_abs_diff(const Image& a, const Image& b);

// Bilinear resize (used by heatmap upsampling and plot scaling).
Image resize_bilinear(const Image& src, int new_w, int new_h);

}  // namespace dynpatch
