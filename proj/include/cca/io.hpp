#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cca/errors.hpp"

namespace cca {

// Shortest-exact decimal form; %.17g round-trips IEEE doubles.
inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Write via a temp file in the same directory, then rename into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    fs::create_directories(dir);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw input_error("cannot open for write: " + tmp.string());
        out.write(content.data(), std::streamsize(content.size()));
        if (!out) throw input_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open for read: " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Binary PGM (P5) from raw bytes, one byte per cell.
inline std::string pgm_encode_bytes(int width, int height, std::span<const std::uint8_t> bytes) {
    require(width >= 1 && height >= 1, "pgm: empty image");
    require(bytes.size() == std::size_t(width) * std::size_t(height), "pgm: size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    return out;
}

// Linear min-max normalization to 0..255. A constant image maps to all zeros.
inline std::string pgm_encode_normalized(int width, int height, std::span<const double> values) {
    require(values.size() == std::size_t(width) * std::size_t(height), "pgm: size mismatch");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    std::vector<std::uint8_t> bytes(values.size(), 0);
    if (*mx > *mn) {
        const double scale = 255.0 / (*mx - *mn);
        for (std::size_t i = 0; i < values.size(); ++i)
            bytes[i] = std::uint8_t(std::lround((values[i] - *mn) * scale));
    }
    return pgm_encode_bytes(width, height, bytes);
}

} // namespace cca
