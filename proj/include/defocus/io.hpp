// File formats: PGM / grayscale PNG images, depth rasters ("DPTH") and
// label rasters ("LBLS"). Binary multi-byte fields are little-endian.
#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "defocus/common.hpp"

namespace defocus {

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32_le(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32_le(os, u);
}

inline float read_f32_le(std::istream& is) {
  std::uint32_t u = read_u32_le(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void expect_magic(std::istream& is, const char* magic, const char* what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw DataError(std::string(what) + ": bad magic, not a " + magic + " file");
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + p.string());
  return is;
}

// Header token reader for PGM; skips whitespace and # comments.
inline long pgm_token(std::istream& is) {
  int ch = is.get();
  while (is && (std::isspace(ch) || ch == '#')) {
    if (ch == '#')
      while (is && ch != '\n') ch = is.get();
    ch = is.get();
  }
  long v = 0;
  bool any = false;
  while (is && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    any = true;
    ch = is.get();
  }
  if (!any) throw DataError("malformed PGM header");
  return v;
}

}  // namespace detail

// ---- PGM (binary P5, 8- or 16-bit; 16-bit payload is big-endian per Netpbm) ----

inline void write_pgm(const std::filesystem::path& p, const Image<double>& img, int bits = 16) {
  if (img.channels != 1) throw ConfigError("write_pgm: single-channel images only");
  if (bits != 8 && bits != 16) throw ConfigError("write_pgm: bits must be 8 or 16");
  auto os = detail::open_out(p);
  long maxval = bits == 8 ? 255 : 65535;
  os << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double v = std::clamp(img.at(y, x), 0.0, 1.0);
      long q = std::lround(v * static_cast<double>(maxval));
      if (bits == 8) {
        unsigned char b = static_cast<unsigned char>(q);
        os.write(reinterpret_cast<const char*>(&b), 1);
      } else {
        unsigned char b[2] = {static_cast<unsigned char>((q >> 8) & 0xff),
                              static_cast<unsigned char>(q & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 2);
      }
    }
  if (!os) throw DataError("write failed: " + p.string());
}

inline Image<double> read_pgm(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  char m0 = static_cast<char>(is.get()), m1 = static_cast<char>(is.get());
  if (m0 != 'P' || m1 != '5') throw DataError("read_pgm: only binary P5 supported: " + p.string());
  long w = detail::pgm_token(is);
  long h = detail::pgm_token(is);
  long maxval = detail::pgm_token(is);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw DataError("read_pgm: bad header: " + p.string());
  Image<double> img(static_cast<int>(h), static_cast<int>(w), 1);
  bool wide = maxval > 255;
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * (wide ? 2 : 1));
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw DataError("read_pgm: truncated payload: " + p.string());
    for (int x = 0; x < w; ++x) {
      long q = wide ? (static_cast<long>(row[2 * x]) << 8) | row[2 * x + 1] : row[x];
      img.at(y, x) = static_cast<double>(q) / static_cast<double>(maxval);
    }
  }
  return img;
}

// ---- PNG (grayscale read, grayscale/RGB write) ----

inline Image<double> read_png_gray(const std::filesystem::path& p) {
  std::FILE* fp = std::fopen(p.string().c_str(), "rb");
  if (!fp) throw DataError("cannot open for reading: " + p.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("libpng init failed");
  }
  std::vector<unsigned char> pixels;
  png_uint_32 w = 0, h = 0;
  int bit_depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("PNG decode failed: " + p.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  int color = png_get_color_type(png, info);
  bit_depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("grayscale PNG required: " + p.string());
  }
  if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
  if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (bit_depth == 16) png_set_swap(png);  // host is little-endian
  png_read_update_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  bit_depth = png_get_bit_depth(png, info);
  std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  Image<double> img(static_cast<int>(h), static_cast<int>(w), 1);
  if (bit_depth == 16) {
    const std::uint16_t* src = reinterpret_cast<const std::uint16_t*>(pixels.data());
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = src[i] / 65535.0;
  } else {
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = pixels[i] / 255.0;
  }
  return img;
}

namespace detail {

inline void write_png(const std::filesystem::path& p, const unsigned char* pixels, int h, int w,
                      int color_type, int bit_depth, std::size_t rowbytes) {
  std::FILE* fp = std::fopen(p.string().c_str(), "wb");
  if (!fp) throw DataError("cannot open for writing: " + p.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("PNG encode failed: " + p.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * rowbytes);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace detail

inline void write_png_gray16(const std::filesystem::path& p, const Image<double>& img) {
  if (img.channels != 1) throw ConfigError("write_png_gray16: single-channel images only");
  std::vector<std::uint16_t> q(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    q[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 65535.0));
  detail::write_png(p, reinterpret_cast<const unsigned char*>(q.data()), img.height, img.width,
                    PNG_COLOR_TYPE_GRAY, 16, static_cast<std::size_t>(img.width) * 2);
}

inline void write_png_rgb8(const std::filesystem::path& p, const Image<std::uint8_t>& img) {
  if (img.channels != 3) throw ConfigError("write_png_rgb8: 3-channel images only");
  detail::write_png(p, img.data.data(), img.height, img.width, PNG_COLOR_TYPE_RGB, 8,
                    static_cast<std::size_t>(img.width) * 3);
}

// Reads a grayscale image, values linearized to [0,1]; dispatches on magic bytes.
inline Image<double> read_gray_image(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  unsigned char sig[2] = {0, 0};
  is.read(reinterpret_cast<char*>(sig), 2);
  is.close();
  if (sig[0] == 'P' && sig[1] == '5') return read_pgm(p);
  if (sig[0] == 0x89 && sig[1] == 'P') return read_png_gray(p);
  throw DataError("unsupported image format (want PGM or PNG): " + p.string());
}

// ---- depth raster: "DPTH", u32 height, u32 width, u32 reserved, f32 payload ----

inline void write_depth_raster(const std::filesystem::path& p, const Image<double>& depth) {
  if (depth.channels != 1) throw ConfigError("write_depth_raster: single-channel only");
  auto os = detail::open_out(p);
  os.write("DPTH", 4);
  detail::write_u32_le(os, static_cast<std::uint32_t>(depth.height));
  detail::write_u32_le(os, static_cast<std::uint32_t>(depth.width));
  detail::write_u32_le(os, 0);
  for (double v : depth.data) detail::write_f32_le(os, static_cast<float>(v));
  if (!os) throw DataError("write failed: " + p.string());
}

inline Image<double> read_depth_raster(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  detail::expect_magic(is, "DPTH", "read_depth_raster");
  std::uint32_t h = detail::read_u32_le(is);
  std::uint32_t w = detail::read_u32_le(is);
  detail::read_u32_le(is);  // reserved
  if (h < 1 || w < 1 || h > (1u << 20) || w > (1u << 20))
    throw DataError("read_depth_raster: implausible dimensions");
  Image<double> depth(static_cast<int>(h), static_cast<int>(w), 1);
  for (auto& v : depth.data) v = detail::read_f32_le(is);
  return depth;
}

// ---- label raster: "LBLS", u32 height, u32 width, u32 max_blur, i8 payload ----

struct LabelRaster {
  Image<std::int8_t> labels;
  int max_blur = 0;
};

inline void write_label_raster(const std::filesystem::path& p, const Image<std::int8_t>& labels,
                               int max_blur) {
  if (labels.channels != 1) throw ConfigError("write_label_raster: single-channel only");
  auto os = detail::open_out(p);
  os.write("LBLS", 4);
  detail::write_u32_le(os, static_cast<std::uint32_t>(labels.height));
  detail::write_u32_le(os, static_cast<std::uint32_t>(labels.width));
  detail::write_u32_le(os, static_cast<std::uint32_t>(max_blur));
  os.write(reinterpret_cast<const char*>(labels.data.data()),
           static_cast<std::streamsize>(labels.data.size()));
  if (!os) throw DataError("write failed: " + p.string());
}

inline LabelRaster read_label_raster(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  detail::expect_magic(is, "LBLS", "read_label_raster");
  std::uint32_t h = detail::read_u32_le(is);
  std::uint32_t w = detail::read_u32_le(is);
  std::uint32_t m = detail::read_u32_le(is);
  if (h < 1 || w < 1 || h > (1u << 20) || w > (1u << 20))
    throw DataError("read_label_raster: implausible dimensions");
  LabelRaster out;
  out.labels = Image<std::int8_t>(static_cast<int>(h), static_cast<int>(w), 1);
  out.max_blur = static_cast<int>(m);
  is.read(reinterpret_cast<char*>(out.labels.data.data()),
          static_cast<std::streamsize>(out.labels.data.size()));
  if (!is) throw DataError("read_label_raster: truncated payload: " + p.string());
  return out;
}

}  // namespace defocus
