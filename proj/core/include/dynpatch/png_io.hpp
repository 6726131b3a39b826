#pragma once

#include <string>

#include "dynpatch/image.hpp"

namespace dynpatch {

// Minimal PNG codec for 8-bit RGB artifacts. The writer always produces the
// same bytes for the same pixels (fixed filter, fixed zlib settings), which
// the reproducibility checks rely on. The reader handles the subset this
// project writes plus RGBA/gray produced by common tools.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace dynpatch
