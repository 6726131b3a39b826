#include "dynpatch/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "dynpatch/common.hpp"

namespace dynpatch {

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::string& out, const char type[4], const std::string& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.append(type, 4);
    out.append(data);
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data() + start), static_cast<uInt>(out.size() - start));
    put_u32(out, static_cast<uint32_t>(crc));
}

std::string zlib_compress(const std::string& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string out(bound, '\0');
    int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                       reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6);
    if (rc != Z_OK) throw IoError("png: zlib compression failed");
    out.resize(bound);
    return out;
}

std::string zlib_decompress(const std::string& comp, size_t expected) {
    std::string out(expected, '\0');
    uLongf len = static_cast<uLongf>(expected);
    int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &len,
                        reinterpret_cast<const Bytef*>(comp.data()), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || len != expected) throw IoError("png: zlib decompression failed");
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.width <= 0 || img.height <= 0) throw ValidationError("write_png: empty image");
    std::string file("\x89PNG\r\n\x1a\n", 8);

    std::string ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.width));
    put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    append_chunk(file, "IHDR", ihdr);

    std::string raw;
    raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * 3));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        for (int x = 0; x < img.width; ++x) {
            auto rgb = to_rgb8(img, y, x);
            raw.push_back(static_cast<char>(rgb[0]));
            raw.push_back(static_cast<char>(rgb[1]));
            raw.push_back(static_cast<char>(rgb[2]));
        }
    }
    append_chunk(file, "IDAT", zlib_compress(raw));
    append_chunk(file, "IEND", "");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_png: cannot open " + path);
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw IoError("write_png: write failed for " + path);
}

Image read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_png: cannot open " + path);
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 8 || std::memcmp(file.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw IoError("read_png: not a png: " + path);

    size_t pos = 8;
    uint32_t width = 0, height = 0;
    int bit_depth = 0, color_type = 0, interlace = 0;
    std::string idat;
    while (pos + 8 <= file.size()) {
        uint32_t len = get_u32(reinterpret_cast<const unsigned char*>(file.data() + pos));
        std::string type = file.substr(pos + 4, 4);
        if (pos + 12 + len > file.size()) throw IoError("read_png: truncated chunk");
        const char* data = file.data() + pos + 8;
        if (type == "IHDR") {
            width = get_u32(reinterpret_cast<const unsigned char*>(data));
            height = get_u32(reinterpret_cast<const unsigned char*>(data + 4));
            bit_depth = static_cast<unsigned char>(data[8]);
            color_type = static_cast<unsigned char>(data[9]);
            interlace = static_cast<unsigned char>(data[12]);
        } else if (type == "IDAT") {
            idat.append(data, len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (width == 0 || height == 0) throw IoError("read_png: missing IHDR");
    if (bit_depth != 8) throw IoError("read_png: unsupported bit depth");
    if (interlace != 0) throw IoError("read_png: interlaced png unsupported");
    int channels;
    switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 6: channels = 4; break;
        default: throw IoError("read_png: unsupported color type");
    }

    const size_t stride = static_cast<size_t>(width) * channels;
    std::string raw = zlib_decompress(idat, height * (stride + 1));

    std::vector<unsigned char> prev(stride, 0), cur(stride, 0);
    Image img(static_cast<int>(width), static_cast<int>(height));
    for (uint32_t y = 0; y < height; ++y) {
        const unsigned char* row = reinterpret_cast<const unsigned char*>(raw.data()) + y * (stride + 1);
        int filter = row[0];
        const unsigned char* src = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            int a = (i >= static_cast<size_t>(channels)) ? cur[i - channels] : 0;
            int b = prev[i];
            int c = (i >= static_cast<size_t>(channels)) ? prev[i - channels] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("read_png: bad filter byte");
            }
            cur[i] = static_cast<unsigned char>(v & 0xff);
        }
        for (uint32_t x = 0; x < width; ++x) {
            double r, g, bl;
            if (channels == 1) {
                r = g = bl = cur[x] / 255.0;
            } else {
                r = cur[static_cast<size_t>(x) * channels] / 255.0;
                g = cur[static_cast<size_t>(x) * channels + 1] / 255.0;
                bl = cur[static_cast<size_t>(x) * channels + 2] / 255.0;
            }
            img.set(static_cast<int>(y), static_cast<int>(x), r, g, bl);
        }
        std::swap(prev, cur);
    }
    return img;
}

}  // namespace dynpatch
