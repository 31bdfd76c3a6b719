#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "mvdiff/common.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Images travel as [C,H,W] tensors in [-1, 1]. On disk: binary PGM (C = 1) or
// PPM (C = 3) with maxval 255 as the bit-exact interchange format, plus an
// optional PNG writer for viewing.

inline std::uint8_t quantize_unit(double v) {
    double u = (v + 1.0) * 0.5 * 255.0;
    if (u < 0) u = 0;
    if (u > 255) u = 255;
    return static_cast<std::uint8_t>(std::lround(u));
}

template <typename T>
std::vector<std::uint8_t> to_bytes(const Tensor<T>& img) {
    require(img.ndim() == 3 && (img.dim(0) == 1 || img.dim(0) == 3),
            "image: expect [C,H,W] with C in {1,3}");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::vector<std::uint8_t> bytes(static_cast<size_t>(c) * h * w);
    // interleave channels per pixel (PPM order); C = 1 is a plain copy
    size_t k = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < c; ++cc)
                bytes[k++] = quantize_unit(static_cast<double>(img.at3(cc, y, x)));
    return bytes;
}

template <typename T>
void write_pnm(const std::string& path, const Tensor<T>& img) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const auto bytes = to_bytes(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

// Returns a [C,H,W] float tensor in [-1, 1].
inline Tensor<float> read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5" && magic != "P6") throw IoError(path + ": not a binary PGM/PPM");
    const int c = magic == "P5" ? 1 : 3;
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (!f || w <= 0 || h <= 0 || maxval != 255) throw IoError(path + ": unsupported header");
    f.get();  // single whitespace after maxval
    std::vector<std::uint8_t> bytes(static_cast<size_t>(c) * w * h);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path + ": truncated pixel data");
    Tensor<float> img({c, h, w});
    size_t k = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < c; ++cc)
                img.at3(cc, y, x) = static_cast<float>(bytes[k++]) / 255.0f * 2.0f - 1.0f;
    return img;
}

namespace detail {

inline void png_chunk(std::ofstream& f, const char* tag, const std::vector<std::uint8_t>& data) {
    const auto be32 = [](std::uint32_t v) {
        return std::array<std::uint8_t, 4>{static_cast<std::uint8_t>(v >> 24),
                                           static_cast<std::uint8_t>(v >> 16),
                                           static_cast<std::uint8_t>(v >> 8),
                                           static_cast<std::uint8_t>(v)};
    };
    auto len = be32(static_cast<std::uint32_t>(data.size()));
    f.write(reinterpret_cast<const char*>(len.data()), 4);
    f.write(tag, 4);
    if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()),
                               static_cast<std::streamsize>(data.size()));
    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(tag), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
    auto crcb = be32(crc);
    f.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

}  // namespace detail

template <typename T>
void write_png(const std::string& path, const Tensor<T>& img) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const auto bytes = to_bytes(img);
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * c));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), bytes.begin() + static_cast<std::ptrdiff_t>(y) * w * c,
                   bytes.begin() + static_cast<std::ptrdiff_t>(y + 1) * w * c);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("png: deflate failed");
    comp.resize(comp_len);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    f.write(reinterpret_cast<const char*>(sig), 8);
    std::vector<std::uint8_t> ihdr(13);
    const auto put32 = [&](size_t off, std::uint32_t v) {
        ihdr[off] = static_cast<std::uint8_t>(v >> 24);
        ihdr[off + 1] = static_cast<std::uint8_t>(v >> 16);
        ihdr[off + 2] = static_cast<std::uint8_t>(v >> 8);
        ihdr[off + 3] = static_cast<std::uint8_t>(v);
    };
    put32(0, static_cast<std::uint32_t>(w));
    put32(4, static_cast<std::uint32_t>(h));
    ihdr[8] = 8;                    // bit depth
    ihdr[9] = (c == 1) ? 0 : 2;     // grayscale / truecolor
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    detail::png_chunk(f, "IHDR", ihdr);
    detail::png_chunk(f, "IDAT", comp);
    detail::png_chunk(f, "IEND", {});
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace mvdiff
