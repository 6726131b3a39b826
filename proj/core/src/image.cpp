#include "dynpatch/image.hpp"

#include <algorithm>
#include <cmath>

#include "dynpatch/common.hpp"

namespace dynpatch {

void quantize8(Image& img) {
    for (auto& v : img.px) {
        double c = std::clamp(v, 0.0, 1.0);
        v = std::round(c * 255.0) / 255.0;
    }
}

std::array<uint8_t, 3> to_rgb8(const Image& img, int y, int x) {
    std::array<uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        out[static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

void clamp01(Image& img) {
    for (auto& v : img.px) v = std::clamp(v, 0.0, 1.0);
}

bool images_equal(const Image& a, const Image& b) {
    return a.width == b.width && a.height == b.height && a.px == b.px;
}

double mean_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ValidationError("mean_abs_diff: shape mismatch");
    if (a.px.empty()) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) acc += std::abs(a.px[i] - b.px[i]);
    return acc / static_cast<double>(a.px.size());
}

Image resize_bilinear(const Image& src, int new_w, int new_h) {
    if (new_w <= 0 || new_h <= 0) throw ValidationError("resize_bilinear: non-positive size");
    Image out(new_w, new_h);
    const double sx = static_cast<double>(src.width) / new_w;
    const double sy = static_cast<double>(src.height) / new_h;
    for (int y = 0; y < new_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, src.height - 1);
        int y1c = std::clamp(y0 + 1, 0, src.height - 1);
        for (int x = 0; x < new_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, src.width - 1);
            int x1c = std::clamp(x0 + 1, 0, src.width - 1);
            for (int c = 0; c < 3; ++c) {
                double v00 = src.at(y0c, x0c, c);
                double v01 = src.at(y0c, x1c, c);
                double v10 = src.at(y1c, x0c, c);
                double v11 = src.at(y1c, x1c, c);
                out.at(y, x, c) = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) +
                                  v10 * (1 - wx) * wy + v11 * wx * wy;
            }
        }
    }
    return out;
}

}  // namespace dynpatch
