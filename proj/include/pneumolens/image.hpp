#pragma once

#include <png.h>
// jpeglib.h needs FILE and size_t declared first
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pneumolens {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or truncated PNG/JPEG stream. `offset` is the number of input bytes
/// consumed when the decoder gave up.
class DecodeError : public ImageError {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : ImageError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedFormatError : public ImageError {
 public:
  using ImageError::ImageError;
};

/// Interleaved (HWC) pixel buffer.
template <typename P>
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<P> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, P fill = P{})
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  P& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  const P& at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool empty() const noexcept { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

using ImageBuffer = Image<std::uint8_t>;
using ImageF = Image<float>;

template <typename To, typename From>
Image<To> convert(const Image<From>& src) {
  Image<To> out(src.width, src.height, src.channels);
  for (std::size_t i = 0; i < src.pixels.size(); ++i) {
    if constexpr (std::is_same_v<To, std::uint8_t> && !std::is_same_v<From, std::uint8_t>) {
      const double v = std::clamp(std::round(static_cast<double>(src.pixels[i])), 0.0, 255.0);
      out.pixels[i] = static_cast<std::uint8_t>(v);
    } else {
      out.pixels[i] = static_cast<To>(src.pixels[i]);
    }
  }
  return out;
}

/// Replicates a single channel to three; three-channel input is returned as is.
template <typename P>
Image<P> to_rgb(const Image<P>& src) {
  if (src.channels == 3) return src;
  if (src.channels != 1) throw ImageError("to_rgb: expected 1 or 3 channels, got " + std::to_string(src.channels));
  Image<P> out(src.width, src.height, 3);
  for (std::size_t i = 0; i < src.width * src.height; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = src.pixels[i];
  return out;
}

/// Luma (ITU-R BT.601 weights) of a 3-channel image, or a copy of a 1-channel one.
template <typename P>
ImageF to_gray(const Image<P>& src) {
  ImageF out(src.width, src.height, 1);
  for (std::size_t i = 0; i < src.width * src.height; ++i) {
    if (src.channels == 1) {
      out.pixels[i] = static_cast<float>(src.pixels[i]);
    } else {
      out.pixels[i] = 0.299f * static_cast<float>(src.pixels[i * src.channels]) +
                      0.587f * static_cast<float>(src.pixels[i * src.channels + 1]) +
                      0.114f * static_cast<float>(src.pixels[i * src.channels + 2]);
    }
  }
  return out;
}

/// Bilinear sample at continuous source coordinates, clamped to the border.
template <typename P>
float sample_bilinear(const Image<P>& img, double x, double y, std::size_t c) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = (1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
  const double bottom = (1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
  return static_cast<float>((1 - fy) * top + fy * bottom);
}

/// Half-pixel-centre bilinear resize with edge clamping; no rounding.
template <typename P>
ImageF resize_bilinear(const Image<P>& img, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ImageError("resize_bilinear: target extent must be positive");
  if (img.empty()) throw ImageError("resize_bilinear: empty image");
  ImageF out(width, height, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < width; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = sample_bilinear(img, src_x, src_y, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File IO

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Codec

namespace detail {

struct PngReadState {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
  std::string error;
  ImageBuffer image;
  std::vector<png_bytep> rows;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t length) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->offset + length > st->bytes.size()) {
    st->offset = st->bytes.size();
    png_error(png, "truncated PNG stream");
  }
  std::memcpy(out, st->bytes.data() + st->offset, length);
  st->offset += length;
}

inline void png_error_to_state(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngReadState*>(png_get_error_ptr(png));
  if (st && st->error.empty()) st->error = msg;
  png_longjmp(png, 1);
}

inline void png_silent_warning(png_structp, png_const_charp) {}

inline ImageBuffer decode_png(std::span<const std::uint8_t> bytes) {
  // Everything touched after setjmp lives behind this pointer.
  auto state = std::make_unique<PngReadState>();
  PngReadState* const st = state.get();
  st->bytes = bytes;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, st, png_error_to_state, png_silent_warning);
  if (!png) throw ImageError("png: cannot allocate decoder");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("png: cannot allocate decoder");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DecodeError("png: " + (st->error.empty() ? std::string("corrupt stream") : st->error), st->offset);
  }
  png_set_read_fn(png, st, png_read_from_memory);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t ch = png_get_channels(png, info);
  if (ch != 3) png_error(png, "unexpected channel layout after conversion");
  st->image = ImageBuffer(w, h, 3);
  st->rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) st->rows[y] = st->image.pixels.data() + y * w * 3;
  png_read_image(png, st->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return std::move(st->image);
}

struct JpegErrorState {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* st = reinterpret_cast<JpegErrorState*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, st->message);
  std::longjmp(st->jump, 1);
}

// Warnings such as a premature end of data would otherwise yield a padded
// partial image; treat them as errors.
inline void jpeg_emit_message(j_common_ptr cinfo, int level) {
  if (level < 0) jpeg_error_exit(cinfo);
}

struct JpegReadState {
  jpeg_decompress_struct cinfo;
  JpegErrorState err;
  ImageBuffer image;
};

inline ImageBuffer decode_jpeg(std::span<const std::uint8_t> bytes) {
  auto state = std::make_unique<JpegReadState>();
  JpegReadState* const st = state.get();
  st->cinfo.err = jpeg_std_error(&st->err.mgr);
  st->err.mgr.error_exit = jpeg_error_exit;
  st->err.mgr.emit_message = jpeg_emit_message;
  st->err.message[0] = '\0';
  if (setjmp(st->err.jump)) {
    std::size_t consumed = bytes.size();
    if (st->cinfo.src) consumed = bytes.size() - st->cinfo.src->bytes_in_buffer;
    jpeg_destroy_decompress(&st->cinfo);
    throw DecodeError(std::string("jpeg: ") + st->err.message, consumed);
  }
  jpeg_create_decompress(&st->cinfo);
  jpeg_mem_src(&st->cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&st->cinfo, TRUE);
  st->cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&st->cinfo);
  const std::size_t w = st->cinfo.output_width, h = st->cinfo.output_height;
  st->image = ImageBuffer(w, h, 3);
  while (st->cinfo.output_scanline < st->cinfo.output_height) {
    JSAMPROW row = st->image.pixels.data() + static_cast<std::size_t>(st->cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&st->cinfo, &row, 1);
  }
  jpeg_finish_decompress(&st->cinfo);
  jpeg_destroy_decompress(&st->cinfo);
  return std::move(st->image);
}

struct PngWriteState {
  std::vector<std::uint8_t> out;
  std::string error;
  std::vector<png_const_bytep> rows;
};

inline void png_write_to_memory(png_structp png, png_bytep data, png_size_t length) {
  auto* st = static_cast<PngWriteState*>(png_get_io_ptr(png));
  st->out.insert(st->out.end(), data, data + length);
}

inline void png_flush_noop(png_structp) {}

inline void png_write_error(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngWriteState*>(png_get_error_ptr(png));
  if (st) st->error = msg;
  png_longjmp(png, 1);
}

}  // namespace detail

/// Decodes a PNG or JPEG stream into an 8-bit, 3-channel buffer (grayscale
/// replicated, alpha dropped, 16-bit reduced).
inline ImageBuffer decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return detail::decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return detail::decode_jpeg(bytes);
  }
  throw UnsupportedFormatError("unsupported image format (expected PNG or JPEG signature)");
}

inline ImageBuffer read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

/// Lossless 8-bit PNG encoding of a 1- or 3-channel buffer.
inline std::vector<std::uint8_t> encode_png(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw ImageError("encode_png: expected 1 or 3 channels, got " + std::to_string(img.channels));
  }
  if (img.empty()) throw ImageError("encode_png: empty image");
  auto state = std::make_unique<detail::PngWriteState>();
  detail::PngWriteState* const st = state.get();
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, st, detail::png_write_error, nullptr);
  if (!png) throw ImageError("png: cannot allocate encoder");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("png: cannot allocate encoder");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("png encode: " + st->error);
  }
  png_set_write_fn(png, st, detail::png_write_to_memory, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  st->rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) st->rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(st->rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(st->out);
}

inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  write_file_bytes(path, encode_png(img));
}

}  // namespace pneumolens
