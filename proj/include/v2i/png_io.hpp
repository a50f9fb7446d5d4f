#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace v2i {

struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 1;  // 1 (gray) or 3 (RGB), interleaved
    std::vector<std::uint8_t> data;
};

// Both throw IoError on failure.
void write_png(const std::filesystem::path& path, const Image8& image);
Image8 read_png(const std::filesystem::path& path);

}  // namespace v2i
