#include "dynpatch/tensor_io.hpp"

#include <cstring>
#include <fstream>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {
constexpr char kMagic[8] = {'D', 'P', 'T', 'E', 'N', 'S', 'R', '1'};

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError(std::string("tensor container: truncated reading ") + what);
    return v;
}
}  // namespace

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("tensor container: cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    write_raw(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        if (nt.name.size() > 0xffff) throw ValidationError("tensor container: name too long");
        write_raw(out, static_cast<uint16_t>(nt.name.size()));
        out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        write_raw(out, static_cast<uint8_t>(nt.tensor.shape.size()));
        for (int d : nt.tensor.shape) write_raw(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(nt.tensor.data.data()),
                  static_cast<std::streamsize>(nt.tensor.data.size() * sizeof(double)));
    }
    if (!out) throw IoError("tensor container: write failed for " + path);
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("tensor container: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("tensor container: bad magic in " + path);
    uint32_t count = read_raw<uint32_t>(in, "count");
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = read_raw<uint16_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw IoError("tensor container: truncated name");
        uint8_t ndim = read_raw<uint8_t>(in, "ndim");
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_raw<uint32_t>(in, "dim"));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw IoError("tensor container: truncated data");
        out.push_back({std::move(name), std::move(t)});
    }
    return out;
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& nt : tensors)
        if (nt.name == name) return nt.tensor;
    throw IoError("tensor container: missing tensor " + name);
}

}  // namespace dynpatch
