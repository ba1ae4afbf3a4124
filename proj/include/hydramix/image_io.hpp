#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hydramix {

// 8-bit RGB PNG I/O. Pixels are row-major, interleaved, size w*h*3.
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<uint8_t>& pixels);

struct PngImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;
};

PngImage read_png_rgb(const std::string& path);

}  // namespace hydramix
