#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace tdg::png {

class PngError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

void write(const std::filesystem::path& path, const Raster& raster);
Raster read(const std::filesystem::path& path);

}  // namespace tdg::png
