#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace mags {

// Interleaved row-major image of linear-light doubles.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  bool same_shape(const Image& o) const { return width == o.width && height == o.height && channels == o.channels; }
  std::size_t size() const { return data.size(); }
};

inline constexpr double kDisplayGamma = 2.2;

inline std::uint8_t encode_srgb(double linear) {
  const double v = std::pow(std::clamp(linear, 0.0, 1.0), 1.0 / kDisplayGamma);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

inline double decode_srgb(std::uint8_t encoded) { return std::pow(encoded / 255.0, kDisplayGamma); }

namespace detail {
inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}
inline void png_flush_noop(png_structp) {}

struct PngReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
};
inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t length) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + length > cur->size) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, cur->data + cur->offset, length);
  cur->offset += length;
}
}  // namespace detail

// 8-bit sRGB PNG (gamma 2.2 encode). 1, 3 or 4 channels.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4) {
    fail(ErrorCode::InvalidArgument, "png export needs 1, 3 or 4 channels");
  }
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * img.channels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::IoError, "png encoding failed");
  }
  png_set_write_fn(png, &out, detail::png_write_to_vector, detail::png_flush_noop);
  const int color_type = img.channels == 1 ? PNG_COLOR_TYPE_GRAY
                         : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                                             : PNG_COLOR_TYPE_RGBA;
  png_set_IHDR(png, info, img.width, img.height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        // Alpha is coverage, not light: stored linearly.
        const double v = img.at(x, y, c);
        row[static_cast<std::size_t>(x) * img.channels + c] =
            (img.channels == 4 && c == 3) ? static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))
                                          : encode_srgb(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

// Decodes to linear light; the result keeps the file's channel count
// (gray, gray+alpha, RGB or RGBA), with 16-bit files reduced to 8 bits.
inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) fail(ErrorCode::ParseError, "not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  detail::PngReadCursor cursor{bytes.data(), bytes.size(), 0};
  Image img;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::ParseError, "corrupt PNG stream");
  }
  png_set_read_fn(png, &cursor, detail::png_read_from_memory);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  buffer.resize(static_cast<std::size_t>(w) * h * c);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  img = Image(w, h, c);
  const bool has_alpha = (c == 2 || c == 4);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const bool is_alpha = has_alpha && (static_cast<int>(i % c) == c - 1);
    img.data[i] = is_alpha ? buffer[i] / 255.0 : decode_srgb(buffer[i]);
  }
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

inline void save_png(const Image& img, const std::string& path) { write_file_bytes(path, encode_png(img)); }
inline Image load_png(const std::string& path) { return decode_png(read_file_bytes(path)); }

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace detail

// Lossless float dump: u32 width, u32 height, u32 channels, then row-major
// little-endian f32 samples.
inline std::vector<std::uint8_t> encode_float_image(const Image& img) {
  std::vector<std::uint8_t> out;
  out.reserve(12 + img.size() * 4);
  detail::put_u32(out, static_cast<std::uint32_t>(img.width));
  detail::put_u32(out, static_cast<std::uint32_t>(img.height));
  detail::put_u32(out, static_cast<std::uint32_t>(img.channels));
  for (double v : img.data) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Image decode_float_image(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) fail(ErrorCode::CorruptBlob, "float image header truncated");
  const auto w = detail::get_u32(bytes.data());
  const auto h = detail::get_u32(bytes.data() + 4);
  const auto c = detail::get_u32(bytes.data() + 8);
  const std::size_t count = static_cast<std::size_t>(w) * h * c;
  if (bytes.size() != 12 + count * 4) fail(ErrorCode::CorruptBlob, "float image payload length mismatch");
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::get_u32(bytes.data() + 12 + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    img.data[i] = f;
  }
  return img;
}

}  // namespace mags
