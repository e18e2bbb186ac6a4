#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace casdm {

// 8-bit interleaved image, row-major; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int64_t height = 0;
    int64_t width = 0;
    int64_t channels = 0;
    std::vector<uint8_t> pixels;
};

// Decodes any libpng-readable file to 8-bit gray or RGB (palette expanded,
// alpha stripped, 16-bit depth scaled down).
ImageU8 read_png(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);

} // namespace casdm
