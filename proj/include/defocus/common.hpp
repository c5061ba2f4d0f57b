// Core types shared across the library: error categories, seeded RNG,
// 2-D rasters and 4-D tensors (row-major, channel fastest).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace defocus {

// Error categories; the CLI maps them to exit codes (config=2, data=3, numeric=4).
class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConfigError : public Error {
  using Error::Error;
};
class DataError : public Error {
  using Error::Error;
};
class NumericError : public Error {
  using Error::Error;
};

// 2-D raster with interleaved channels. Index: (y * width + x) * channels + c.
template <typename T>
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int h, int w, int c = 1, T fill = T{})
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c),
             fill) {
    if (h < 1 || w < 1 || c < 1) throw ConfigError("Image: dimensions must be positive");
  }

  T& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const T& at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  template <typename U>
  Image<U> cast() const {
    Image<U> out(height, width, channels);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// 4-D tensor [height, width, depth, channels], row-major with channels fastest.
template <typename T>
struct Tensor4 {
  int height = 0;
  int width = 0;
  int depth = 0;
  int channels = 0;
  std::vector<T> data;

  Tensor4() = default;
  Tensor4(int h, int w, int d, int c, T fill = T{})
      : height(h), width(w), depth(d), channels(c),
        data(static_cast<std::size_t>(h) * w * d * c, fill) {
    if (h < 1 || w < 1 || d < 1 || c < 1) throw ConfigError("Tensor4: dimensions must be positive");
  }

  std::size_t index(int y, int x, int z, int c) const {
    return ((static_cast<std::size_t>(y) * width + x) * depth + z) * channels + c;
  }
  T& at(int y, int x, int z, int c) { return data[index(y, x, z, c)]; }
  const T& at(int y, int x, int z, int c) const { return data[index(y, x, z, c)]; }

  bool same_shape(const Tensor4& o) const {
    return height == o.height && width == o.width && depth == o.depth && channels == o.channels;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(height, width, depth, channels);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Network output volume [height, width, depth]; depth indexes stack slices.
template <typename T>
struct LogitVolume {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<T> values;

  LogitVolume() = default;
  LogitVolume(int h, int w, int d, T fill = T{})
      : height(h), width(w), depth(d), values(static_cast<std::size_t>(h) * w * d, fill) {
    if (h < 1 || w < 1 || d < 1) throw ConfigError("LogitVolume: dimensions must be positive");
  }

  T& at(int y, int x, int k) {
    return values[(static_cast<std::size_t>(y) * width + x) * depth + k];
  }
  const T& at(int y, int x, int k) const {
    return values[(static_cast<std::size_t>(y) * width + x) * depth + k];
  }
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t s = base;
  std::uint64_t a = splitmix64(s);
  s ^= stream * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
  std::uint64_t b = splitmix64(s);
  return a ^ (b + 0x9e3779b97f4a7c15ull);
}

// Seeded generator with explicit value mappings so results are identical on
// every platform (std distributions are not pinned by the standard).
struct Rng {
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x6a09e667f3bcc909ull) {
    // warm up
    for (int i = 0; i < 4; ++i) splitmix64(state_);
  }

  std::uint64_t bits() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range, rejection-sampled
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw ConfigError("Rng::uniform_int: empty range");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(bits());  // full 64-bit range
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % span);
    std::uint64_t v;
    do {
      v = bits();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  double normal() {
    double u1 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // standard Gumbel(0, 1)
  double gumbel() {
    double u = uniform();
    if (u < 0x1.0p-60) u = 0x1.0p-60;
    return -std::log(-std::log(u) + 1e-300);
  }

 private:
  std::uint64_t state_;
};

template <typename Container>
bool all_finite(const Container& c) {
  for (auto v : c)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace defocus
