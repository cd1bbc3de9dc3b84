#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace causnvs {

/// Interleaved RGB image, row-major, values nominally in [-1, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // height * width * 3

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

/// 8-bit RGB PNG bytes; [-1, 1] is mapped to [0, 255] with clamping.
std::vector<std::uint8_t> encode_png(const Image& img);
/// Throws IoError on malformed data. Grayscale and alpha inputs are converted to RGB.
Image decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// Rounds to the 8-bit grid encode_png would store.
Image quantize8(const Image& img);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws IoError on invalid input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace causnvs
