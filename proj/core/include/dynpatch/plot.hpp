#pragma once

#include <string>
#include <vector>

#include "dynpatch/autodiff.hpp"
#include "dynpatch/image.hpp"

namespace dynpatch {

struct PlotSeries {
    std::vector<double> values;
    std::array<double, 3> color{0.2, 0.4, 0.9};
};

// Line chart with axes and numeric tick labels (digits only). Series legend
// colors are drawn as swatches in the top-right corner, in order.
Image line_chart(const std::vector<PlotSeries>& series, int width = 640, int height = 400);

struct BarGroup {
    std::vector<double> values;  // one bar per series color
};

Image bar_chart(const std::vector<BarGroup>& groups, const std::vector<std::array<double, 3>>& colors,
                double y_max = 1.0, int width = 640, int height = 400);

// Red-to-purple overlay of a [0,1] heat map ({H,W}) on a base image.
Image heatmap_overlay(const Image& base, const Tensor& heat, double alpha = 0.55);

}  // namespace dynpatch
