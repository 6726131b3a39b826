// Independent test oracles. Everything here recomputes expected values by a
// different route than the library code under test and must stay free of the
// implementation paths it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dynpatch/autodiff.hpp"
#include "dynpatch/geometry.hpp"

namespace oracles {

// Discrete area oracle: counts sub-pixel grid cells whose centers fall in
// each box. Exact for integer-aligned boxes with step 1.
inline double iou_pixel_count(const dynpatch::BBox& a, const dynpatch::BBox& b, double step = 1.0) {
    double lo_x = std::min(a.x_min, b.x_min), hi_x = std::max(a.x_max, b.x_max);
    double lo_y = std::min(a.y_min, b.y_min), hi_y = std::max(a.y_max, b.y_max);
    long long inter = 0, uni = 0;
    for (double y = lo_y + step / 2; y < hi_y; y += step) {
        bool in_ay = y > a.y_min && y < a.y_max;
        bool in_by = y > b.y_min && y < b.y_max;
        for (double x = lo_x + step / 2; x < hi_x; x += step) {
            bool in_a = in_ay && x > a.x_min && x < a.x_max;
            bool in_b = in_by && x > b.x_min && x < b.x_max;
            if (in_a && in_b) ++inter;
            if (in_a || in_b) ++uni;
        }
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Plain unnormalized 8x8 DLT solve, Gaussian elimination w/ partial pivot.
// Distinct route from the library's Hartley-normalized estimator.
inline std::array<double, 9> homography_direct(const dynpatch::Quad& src, const dynpatch::Quad& dst) {
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = src.corners[static_cast<size_t>(i)].x, y = src.corners[static_cast<size_t>(i)].y;
        double u = dst.corners[static_cast<size_t>(i)].x, v = dst.corners[static_cast<size_t>(i)].y;
        double* r0 = a[2 * i];
        double* r1 = a[2 * i + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        for (int c = 0; c <= 8; ++c) std::swap(a[piv][c], a[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            for (int c = col; c <= 8; ++c) a[r][c] -= f * a[col][c];
        }
    }
    std::array<double, 9> h{};
    for (int i = 0; i < 8; ++i) h[static_cast<size_t>(i)] = a[i][8] / a[i][i];
    h[8] = 1.0;
    return h;
}

// Exhaustive k-means optimum: tries every assignment of n points to k labels
// (k^n), centroid = cluster mean. Only for tiny n.
inline double kmeans_brute_force_wcss(const std::vector<std::vector<double>>& points, int k) {
    const size_t n = points.size();
    const size_t dim = points[0].size();
    double best = 1e300;
    std::vector<int> labels(n, 0);
    long long total = 1;
    for (size_t i = 0; i < n; ++i) total *= k;
    for (long long code = 0; code < total; ++code) {
        long long c = code;
        for (size_t i = 0; i < n; ++i) {
            labels[i] = static_cast<int>(c % k);
            c /= k;
        }
        std::vector<std::vector<double>> mean(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
        std::vector<int> count(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < n; ++i) {
            for (size_t d = 0; d < dim; ++d) mean[static_cast<size_t>(labels[i])][d] += points[i][d];
            ++count[static_cast<size_t>(labels[i])];
        }
        bool any_empty = false;
        for (int cc = 0; cc < k; ++cc)
            if (count[static_cast<size_t>(cc)] == 0) any_empty = true;
        if (any_empty) continue;
        for (int cc = 0; cc < k; ++cc)
            for (size_t d = 0; d < dim; ++d) mean[static_cast<size_t>(cc)][d] /= count[static_cast<size_t>(cc)];
        double wcss = 0.0;
        for (size_t i = 0; i < n; ++i)
            for (size_t d = 0; d < dim; ++d) {
                double diff = points[i][d] - mean[static_cast<size_t>(labels[i])][d];
                wcss += diff * diff;
            }
        best = std::min(best, wcss);
    }
    return best;
}

struct GradCheckStats {
    int checked = 0;
    int passed = 0;
    double worst_rel = 0.0;

    double pass_fraction() const { return checked == 0 ? 1.0 : static_cast<double>(passed) / checked; }
};

// Central-difference comparison of analytic gradients on sampled coordinates.
// rel err = |g_a - g_fd| / max(|g_a|, |g_fd|, floor).
inline GradCheckStats gradient_check(const std::function<double(const dynpatch::Tensor&)>& f,
                                     const dynpatch::Tensor& at, const dynpatch::Tensor& analytic,
                                     const std::vector<size_t>& coords, double h, double tol,
                                     double floor = 1e-8) {
    GradCheckStats stats;
    for (size_t c : coords) {
        double fd = dynpatch::central_difference(f, at, c, h);
        double ga = analytic.data[c];
        double denom = std::max({std::abs(fd), std::abs(ga), floor});
        double rel = std::abs(fd - ga) / denom;
        ++stats.checked;
        if (rel < tol) ++stats.passed;
        stats.worst_rel = std::max(stats.worst_rel, rel);
    }
    return stats;
}

}  // namespace oracles
