#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dis {

/// 8-bit image, row-major, channels interleaved (C = 1 graymap, C = 3 pixmap).
struct PnmImage {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

/// Binary P5/P6 with maxval 255. Throws FormatError on anything else.
PnmImage read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const PnmImage& image);

/// [-1, 1] <-> [0, 255]
std::uint8_t to_byte(double value);
double from_byte(std::uint8_t value);

} // namespace dis
