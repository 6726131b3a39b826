#include "dynpatch/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {

// 5x7 glyphs for numeric tick labels, column-major bits (LSB = top row).
struct Glyph {
    char ch;
    uint8_t col[5];
};

constexpr Glyph kGlyphs[] = {
    {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
    {'.', {0x00, 0x60, 0x60, 0x00, 0x00}}, {'-', {0x08, 0x08, 0x08, 0x08, 0x08}},
    {'%', {0x62, 0x64, 0x08, 0x13, 0x23}}, {'e', {0x38, 0x54, 0x54, 0x54, 0x18}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00}},
};

const Glyph* find_glyph(char c) {
    for (const auto& g : kGlyphs)
        if (g.ch == c) return &g;
    return nullptr;
}

void draw_text(Image& img, int x, int y, const std::string& text, double r, double g, double b) {
    int cx = x;
    for (char c : text) {
        const Glyph* gl = find_glyph(c);
        if (gl) {
            for (int col = 0; col < 5; ++col)
                for (int row = 0; row < 7; ++row)
                    if (gl->col[col] & (1 << row))
                        if (img.in_bounds(y + row, cx + col)) img.set(y + row, cx + col, r, g, b);
        }
        cx += 6;
    }
}

void draw_line(Image& img, double x0, double y0, double x1, double y1, double r, double g, double b) {
    double dx = x1 - x0, dy = y1 - y0;
    int steps = static_cast<int>(std::max(std::abs(dx), std::abs(dy))) + 1;
    for (int i = 0; i <= steps; ++i) {
        int x = static_cast<int>(std::lround(x0 + dx * i / steps));
        int y = static_cast<int>(std::lround(y0 + dy * i / steps));
        if (img.in_bounds(y, x)) img.set(y, x, r, g, b);
    }
}

std::string format_tick(double v) {
    char buf[32];
    if (v != 0.0 && (std::abs(v) < 0.01 || std::abs(v) >= 10000.0))
        std::snprintf(buf, sizeof(buf), "%.1e", v);
    else
        std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

Image line_chart(const std::vector<PlotSeries>& series, int width, int height) {
    Image img(width, height, 1.0);
    const int ml = 52, mr = 14, mt = 14, mb = 26;
    const int px0 = ml, px1 = width - mr, py0 = mt, py1 = height - mb;

    double lo = 0.0, hi = 1e-12;
    size_t max_n = 0;
    for (const auto& s : series) {
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        max_n = std::max(max_n, s.values.size());
    }
    if (max_n < 2) max_n = 2;
    if (hi - lo < 1e-12) hi = lo + 1.0;

    for (int gx = 0; gx <= 4; ++gx) {
        int x = px0 + gx * (px1 - px0) / 4;
        draw_line(img, x, py0, x, py1, 0.9, 0.9, 0.9);
        double val = static_cast<double>(gx) / 4.0 * static_cast<double>(max_n - 1);
        draw_text(img, x - 10, py1 + 6, format_tick(val), 0.2, 0.2, 0.2);
    }
    for (int gy = 0; gy <= 4; ++gy) {
        int y = py1 - gy * (py1 - py0) / 4;
        draw_line(img, px0, y, px1, y, 0.9, 0.9, 0.9);
        draw_text(img, 4, y - 3, format_tick(lo + gy * (hi - lo) / 4), 0.2, 0.2, 0.2);
    }
    draw_line(img, px0, py0, px0, py1, 0.1, 0.1, 0.1);
    draw_line(img, px0, py1, px1, py1, 0.1, 0.1, 0.1);

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        if (s.values.size() < 2) continue;
        for (size_t i = 0; i + 1 < s.values.size(); ++i) {
            double xa = px0 + static_cast<double>(i) / (max_n - 1) * (px1 - px0);
            double xb = px0 + static_cast<double>(i + 1) / (max_n - 1) * (px1 - px0);
            double ya = py1 - (s.values[i] - lo) / (hi - lo) * (py1 - py0);
            double yb = py1 - (s.values[i + 1] - lo) / (hi - lo) * (py1 - py0);
            draw_line(img, xa, ya, xb, yb, s.color[0], s.color[1], s.color[2]);
            draw_line(img, xa, ya + 1, xb, yb + 1, s.color[0], s.color[1], s.color[2]);
        }
        // legend swatch
        int sy = py0 + 4 + static_cast<int>(si) * 10;
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 14; ++x)
                if (img.in_bounds(sy + y, px1 - 20 + x))
                    img.set(sy + y, px1 - 20 + x, s.color[0], s.color[1], s.color[2]);
    }
    return img;
}

Image bar_chart(const std::vector<BarGroup>& groups, const std::vector<std::array<double, 3>>& colors,
                double y_max, int width, int height) {
    Image img(width, height, 1.0);
    const int ml = 52, mr = 14, mt = 14, mb = 26;
    const int px0 = ml, px1 = width - mr, py0 = mt, py1 = height - mb;
    if (y_max <= 0) y_max = 1.0;

    for (int gy = 0; gy <= 4; ++gy) {
        int y = py1 - gy * (py1 - py0) / 4;
        draw_line(img, px0, y, px1, y, 0.9, 0.9, 0.9);
        draw_text(img, 4, y - 3, format_tick(gy * y_max / 4), 0.2, 0.2, 0.2);
    }
    draw_line(img, px0, py0, px0, py1, 0.1, 0.1, 0.1);
    draw_line(img, px0, py1, px1, py1, 0.1, 0.1, 0.1);

    if (groups.empty()) return img;
    const int n_groups = static_cast<int>(groups.size());
    const int group_w = (px1 - px0) / n_groups;
    for (int gi = 0; gi < n_groups; ++gi) {
        const auto& vals = groups[static_cast<size_t>(gi)].values;
        int n_bars = static_cast<int>(vals.size());
        if (n_bars == 0) continue;
        int bar_w = std::max(2, (group_w - 8) / n_bars);
        for (int bi = 0; bi < n_bars; ++bi) {
            double v = std::clamp(vals[static_cast<size_t>(bi)], 0.0, y_max);
            int x0 = px0 + gi * group_w + 4 + bi * bar_w;
            int y0 = py1 - static_cast<int>((v / y_max) * (py1 - py0));
            auto col = colors[static_cast<size_t>(bi) % colors.size()];
            for (int y = y0; y < py1; ++y)
                for (int x = x0; x < x0 + bar_w - 2; ++x)
                    if (img.in_bounds(y, x)) img.set(y, x, col[0], col[1], col[2]);
        }
    }
    return img;
}

Image heatmap_overlay(const Image& base, const Tensor& heat, double alpha) {
    if (heat.shape.size() != 2) throw ValidationError("heatmap_overlay: expected {H,W}");
    Image resized_base = base;
    const int H = heat.shape[0], W = heat.shape[1];
    if (base.height != H || base.width != W) resized_base = resize_bilinear(base, W, H);
    Image out = resized_base;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double v = std::clamp(heat.data[static_cast<size_t>(y) * W + x], 0.0, 1.0);
            // v=1 red, v=0 purple-blue
            double hr = std::clamp(1.5 * v, 0.0, 1.0);
            double hg = std::clamp(1.0 - std::abs(2.0 * v - 1.0), 0.0, 1.0) * 0.8;
            double hb = std::clamp(1.2 * (1.0 - v), 0.0, 1.0);
            for (int c = 0; c < 3; ++c) {
                double hc = c == 0 ? hr : (c == 1 ? hg : hb);
                out.at(y, x, c) = (1 - alpha) * out.at(y, x, c) + alpha * hc;
            }
        }
    }
    return out;
}

}  // namespace dynpatch
