#include "causnvs/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <boost/beast/core/detail/base64.hpp>
#include <png.h>

#include "causnvs/errors.hpp"

namespace causnvs {

namespace {

std::uint8_t to_byte(double v) {
  const double u = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(u * 255.0));
}

double from_byte(std::uint8_t b) { return 2.0 * (static_cast<double>(b) / 255.0) - 1.0; }

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset;
};

void read_callback(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + n > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, cur->bytes->data() + cur->offset, n);
  cur->offset += n;
}

void write_callback(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

void flush_callback(png_structp) {}

// libpng unwinds with longjmp; the message is kept for the IoError thrown after setjmp returns.
thread_local char png_error_message[256];

void error_callback(png_structp png, png_const_charp msg) {
  std::snprintf(png_error_message, sizeof(png_error_message), "%s", msg);
  png_longjmp(png, 1);
}

void warning_callback(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.height <= 0 || img.width <= 0) throw IoError("png: empty image");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.height) * img.width * 3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = to_byte(img.data[i]);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(std::string("png: ") + png_error_message);
  }
  {
    png_set_write_fn(png, &out, write_callback, flush_callback);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_sRGB(png, info, PNG_sRGB_INTENT_PERCEPTUAL);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
      png_write_row(png, rows.data() + static_cast<std::size_t>(y) * img.width * 3);
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("png: bad signature");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{&bytes, 0};
  std::vector<std::uint8_t> rows;
  std::vector<png_bytep> ptrs;
  png_uint_32 w = 0;
  png_uint_32 h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(std::string("png: ") + png_error_message);
  }
  {
    png_set_read_fn(png, &cursor, read_callback);
    png_read_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
      png_set_gray_to_rgb(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (w == 0 || h == 0 || w > 4096 || h > 4096 || png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) {
      std::snprintf(png_error_message, sizeof(png_error_message), "unsupported image layout");
      png_longjmp(png, 1);
    }
    rows.resize(static_cast<std::size_t>(w) * h * 3);
    ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) ptrs[y] = rows.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, ptrs.data());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  Image img(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < rows.size(); ++i) img.data[i] = from_byte(rows[i]);
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = from_byte(to_byte(v));
  return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  namespace b64 = boost::beast::detail::base64;
  std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
  const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
  // The decoder stops at padding; anything after it must be padding too.
  const std::size_t rest = text.size() - read;
  if (rest > 2 || text.find_first_not_of('=', read) != std::string::npos) throw IoError("base64: invalid character");
  out.resize(written);
  return out;
}

}  // namespace causnvs
