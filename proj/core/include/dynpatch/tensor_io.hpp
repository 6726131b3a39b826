#pragma once

#include <string>
#include <vector>

#include "dynpatch/autodiff.hpp"

namespace dynpatch {

// Versioned binary array container used for model parameters.
//
// Layout (little endian):
//   8 bytes   magic "DPTENSR1"
//   u32       tensor count
//   per tensor:
//     u16     name length, then name bytes
//     u8      ndim
//     u32[n]  dims
//     f64[...] row-major data
//
// Model metadata (architecture, class list, seeds, dataset hashes) lives in
// a JSON sidecar next to the container, written by the owning module.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Convenience: find by name, throws IoError when absent.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace dynpatch
