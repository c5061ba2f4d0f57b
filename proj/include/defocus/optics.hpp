// Thin-lens defocus model: circle-of-confusion geometry, PSF banks built
// from coded aperture masks, spatially-varying defocus rendering, and a
// procedural scene synthesizer.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "defocus/common.hpp"
#include "defocus/io.hpp"

namespace defocus {

// Focal geometry. alpha folds the pixel conversion into the blur gain so the
// circle-of-confusion diameter comes out directly in pixels.
struct ThinLensConfig {
  double s1 = 1.0;          // object-space focal distance (scene depth units)
  double f1 = 0.05;         // image-space focal distance
  double d = 1.0;           // aperture diameter
  double pixel_scale = 1.0; // pixels per depth-unit of blur diameter
  double alpha = 0.05;      // derived: (f1 / s1) * d * pixel_scale

  ThinLensConfig() = default;
  ThinLensConfig(double s1_, double f1_, double d_, double pixel_scale_)
      : s1(s1_), f1(f1_), d(d_), pixel_scale(pixel_scale_) {
    if (!(s1 > 0.0) || !(f1 > 0.0) || !(d > 0.0) || !(pixel_scale > 0.0))
      throw ConfigError("ThinLensConfig: s1, f1, d, pixel_scale must all be positive");
    alpha = f1 / s1 * d * pixel_scale;
  }

  // Convenience constructor: focal plane at s1 with a prescribed blur gain.
  static ThinLensConfig for_alpha(double s1, double alpha) {
    if (!(s1 > 0.0) || !(alpha > 0.0))
      throw ConfigError("ThinLensConfig::for_alpha: s1 and alpha must be positive");
    double f1 = 0.05 * s1;
    double d = 1.0;
    return ThinLensConfig(s1, f1, d, alpha / (f1 / s1 * d));
  }
};

// Signed blur diameter in pixels for an object at depth x. Negative values
// are in front of the focal plane, positive behind it.
inline double coc_diameter(double x, const ThinLensConfig& lens) {
  if (!(x > 0.0)) throw ConfigError("coc_diameter: depth must be positive");
  return lens.alpha * (x - lens.s1) / x;
}

// Rounds a blur diameter to its label. Half-away-from-zero; {-1, 0, +1}
// collapse to 0 (a sub-pixel blur is the identity kernel regardless of
// orientation); magnitudes beyond max_blur clamp.
inline int quantize_coc(double c, int max_blur) {
  long r = std::lround(c);
  if (r >= -1 && r <= 1) return 0;
  if (r > max_blur) return max_blur;
  if (r < -max_blur) return -max_blur;
  return static_cast<int>(r);
}

struct ApertureMask {
  Image<double> values;  // square, odd side >= 3, non-negative
  std::string name;
};

inline ApertureMask make_aperture_mask(Image<double> values, std::string name) {
  if (values.channels != 1) throw ConfigError("aperture mask must be single-channel");
  if (values.height != values.width)
    throw ConfigError("aperture mask must be square: " + name);
  if (values.height < 3 || values.height % 2 == 0)
    throw ConfigError("aperture mask side must be odd and >= 3: " + name);
  bool any_positive = false;
  for (double v : values.data) {
    if (v < 0.0) throw ConfigError("aperture mask entries must be non-negative: " + name);
    if (v > 0.0) any_positive = true;
  }
  if (!any_positive) throw ConfigError("aperture mask has no positive entries: " + name);
  return ApertureMask{std::move(values), std::move(name)};
}

inline ApertureMask load_aperture_mask(const std::filesystem::path& p) {
  return make_aperture_mask(read_gray_image(p), p.stem().string());
}

// Bilinear resample to a square side x side grid, sampling at target pixel
// centers mapped into the source grid.
inline Image<double> resize_bilinear(const Image<double>& src, int side) {
  if (side < 1) throw ConfigError("resize_bilinear: side must be positive");
  Image<double> out(side, side, 1);
  double sy = static_cast<double>(src.height) / side;
  double sx = static_cast<double>(src.width) / side;
  for (int ty = 0; ty < side; ++ty) {
    double fy = std::clamp((ty + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, src.height - 1);
    double wy = fy - y0;
    for (int tx = 0; tx < side; ++tx) {
      double fx = std::clamp((tx + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, src.width - 1);
      double wx = fx - x0;
      out.at(ty, tx) = (1.0 - wy) * ((1.0 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                       wy * ((1.0 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
    }
  }
  return out;
}

// Ordered PSF set, one kernel per signed label {-m..-2, 0, +2..+m}.
// Kernel for label L has |L| x |L| support; label 0 is the 1x1 delta;
// negative labels are the point-reflected positive kernels.
struct KernelBank {
  int max_blur = 0;
  std::vector<int> labels;             // ascending
  std::vector<Image<double>> kernels;  // parallel to labels

  int index_of(int label) const {
    int m = max_blur;
    if (label == 0) return m - 1;
    if (label <= -2 && label >= -m) return label + m;
    if (label >= 2 && label <= m) return m - 2 + label;
    throw ConfigError("label " + std::to_string(label) + " not in bank (max_blur " +
                      std::to_string(m) + ")");
  }
  const Image<double>& kernel_for(int label) const { return kernels[index_of(label)]; }
  int size() const { return static_cast<int>(labels.size()); }
};

inline KernelBank build_kernel_bank(const ApertureMask& mask, int max_blur) {
  if (max_blur < 2) throw ConfigError("build_kernel_bank: max_blur must be >= 2");
  KernelBank bank;
  bank.max_blur = max_blur;
  std::vector<Image<double>> positive(max_blur + 1);
  for (int l = 2; l <= max_blur; ++l) {
    Image<double> k = resize_bilinear(mask.values, l);
    double sum = 0.0;
    for (double v : k.data) sum += v;
    if (!(sum > 1e-12))
      throw DataError("degenerate kernel: mask '" + mask.name + "' is all-zero after resize to " +
                      std::to_string(l) + "x" + std::to_string(l));
    for (double& v : k.data) v /= sum;
    positive[l] = std::move(k);
  }
  for (int l = -max_blur; l <= -2; ++l) {
    const Image<double>& src = positive[-l];
    Image<double> k(src.height, src.width, 1);
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        k.at(y, x) = src.at(src.height - 1 - y, src.width - 1 - x);
    bank.labels.push_back(l);
    bank.kernels.push_back(std::move(k));
  }
  bank.labels.push_back(0);
  bank.kernels.push_back(Image<double>(1, 1, 1, 1.0));
  for (int l = 2; l <= max_blur; ++l) {
    bank.labels.push_back(l);
    bank.kernels.push_back(std::move(positive[l]));
  }
  return bank;
}

struct Scene {
  Image<double> image;  // [0,1], 1 or more channels
  Image<double> depth;  // strictly positive, single channel
  std::string scene_id;
};

inline void validate_scene(const Scene& s) {
  if (s.image.height != s.depth.height || s.image.width != s.depth.width)
    throw ConfigError("scene image and depth dimensions disagree: " + s.scene_id);
  if (s.depth.channels != 1) throw ConfigError("scene depth must be single-channel");
  for (double v : s.depth.data)
    if (!(v > 0.0)) throw ConfigError("scene depth must be strictly positive: " + s.scene_id);
}

struct DefocusedSample {
  Image<double> image;
  Image<std::int8_t> label_map;
  ThinLensConfig lens;
  std::string scene_id;
  int focal_index = 0;
};

enum class Boundary { replicate, periodic };

// Dense single-kernel correlation-style gather:
//   out(p) = sum_t k(t) * img(p + t - c),  c = ((side-1)/2, (side-1)/2),
// out-of-range taps resolved by edge replication or wraparound.
inline Image<double> conv_gather(const Image<double>& img, const Image<double>& kernel,
                                 Boundary boundary = Boundary::replicate) {
  if (kernel.height != kernel.width) throw ConfigError("conv_gather: kernel must be square");
  const int side = kernel.height;
  const int cy = (side - 1) / 2, cx = (side - 1) / 2;
  Image<double> out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = 0.0;
      for (int ky = 0; ky < side; ++ky)
        for (int kx = 0; kx < side; ++kx) {
          double kv = kernel.at(ky, kx);
          int sy = y + ky - cy, sx = x + kx - cx;
          if (boundary == Boundary::replicate) {
            sy = std::clamp(sy, 0, img.height - 1);
            sx = std::clamp(sx, 0, img.width - 1);
          } else {
            sy = ((sy % img.height) + img.height) % img.height;
            sx = ((sx % img.width) + img.width) % img.width;
          }
          for (int c = 0; c < img.channels; ++c) out.at(y, x, c) += kv * img.at(sy, sx, c);
        }
    }
  return out;
}

// Per-pixel defocus: each output pixel gathers through the kernel of its own
// depth's quantized label. Edge replication at the boundary.
inline DefocusedSample render_defocus(const Scene& scene, const ThinLensConfig& lens,
                                      const KernelBank& bank, int focal_index = 0,
                                      double noise_sigma = 0.0, std::uint64_t noise_seed = 0) {
  validate_scene(scene);
  const Image<double>& img = scene.image;
  DefocusedSample out;
  out.lens = lens;
  out.scene_id = scene.scene_id;
  out.focal_index = focal_index;
  out.label_map = Image<std::int8_t>(img.height, img.width, 1);
  out.image = Image<double>(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int label = quantize_coc(coc_diameter(scene.depth.at(y, x), lens), bank.max_blur);
      out.label_map.at(y, x) = static_cast<std::int8_t>(label);
      const Image<double>& k = bank.kernel_for(label);
      const int side = k.height;
      const int cy = (side - 1) / 2, cx = (side - 1) / 2;
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int ky = 0; ky < side; ++ky) {
          int sy = std::clamp(y + ky - cy, 0, img.height - 1);
          for (int kx = 0; kx < side; ++kx) {
            int sx = std::clamp(x + kx - cx, 0, img.width - 1);
            acc += k.at(ky, kx) * img.at(sy, sx, c);
          }
        }
        out.image.at(y, x, c) = acc;
      }
    }
  if (noise_sigma > 0.0) {
    Rng rng(mix_seed(noise_seed, 0x4e015eull));
    for (auto& v : out.image.data) v += noise_sigma * rng.normal();
  }
  return out;
}

namespace detail {

// Bilinearly interpolated random lattice; broadband low/mid frequency texture.
inline Image<double> value_noise(Rng& rng, int h, int w, int cell) {
  int gh = h / cell + 2, gw = w / cell + 2;
  Image<double> grid(gh, gw, 1);
  for (auto& v : grid.data) v = rng.uniform(-1.0, 1.0);
  Image<double> out(h, w, 1);
  for (int y = 0; y < h; ++y) {
    double fy = static_cast<double>(y) / cell;
    int y0 = static_cast<int>(fy);
    double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      double fx = static_cast<double>(x) / cell;
      int x0 = static_cast<int>(fx);
      double wx = fx - x0;
      out.at(y, x) = (1.0 - wy) * ((1.0 - wx) * grid.at(y0, x0) + wx * grid.at(y0, x0 + 1)) +
                     wy * ((1.0 - wx) * grid.at(y0 + 1, x0) + wx * grid.at(y0 + 1, x0 + 1));
    }
  }
  return out;
}

}  // namespace detail

// Deterministic textured scene over a piecewise-smooth depth field. Layered
// sinusoid gratings and two octaves of value noise give broadband texture.
// Depth is organized around four levels equally spaced in inverse depth (the
// blur diameter is linear in 1/x), a base plane plus rectangular/elliptic
// regions, each with a gentle inverse-depth tilt. Any mid-range focal plane
// therefore sees pixels on both sides, and a focal plane placed on one level
// keeps the others at well-separated blur labels.
inline Scene synth_scene(std::uint64_t seed, int height, int width) {
  if (height < 16 || width < 16) throw ConfigError("synth_scene: minimum size is 16x16");
  Rng rng(mix_seed(seed, 0x5ce9e5ull));
  Scene scene;
  scene.scene_id = "synth-" + std::to_string(seed);

  // four inverse-depth levels with jitter, spanning depths ~[1.0, 4.2]
  constexpr int kLevels = 4;
  double u_lo = 1.0 / rng.uniform(3.8, 4.6);
  double u_hi = 1.0 / rng.uniform(0.9, 1.15);
  std::array<double, kLevels> level_u;
  for (int i = 0; i < kLevels; ++i) {
    double frac = static_cast<double>(i) / (kLevels - 1);
    level_u[i] = u_lo + (u_hi - u_lo) * (frac + rng.uniform(-0.04, 0.04));
  }

  // weighted Voronoi cells, sites cycling through the levels so every level
  // holds a comparable pixel share
  struct Site {
    double y, x, weight, tilt;
    int level;
  };
  int nsites = static_cast<int>(rng.uniform_int(7, 11));
  int level_offset = static_cast<int>(rng.uniform_int(0, kLevels - 1));
  std::vector<Site> sites(nsites);
  for (int i = 0; i < nsites; ++i) {
    sites[i].y = rng.uniform(0.0, 1.0) * height;
    sites[i].x = rng.uniform(0.0, 1.0) * width;
    sites[i].weight = rng.uniform(0.7, 1.4);
    sites[i].level = (i + level_offset) % kLevels;
    sites[i].tilt = rng.uniform(-0.02, 0.02) / std::max(height, width);
  }

  Image<double> inv_depth(height, width, 1);
  Image<int> region(height, width, 1, 0);
  int nregions = nsites;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      int best = 0;
      double best_d = 1e300;
      for (int i = 0; i < nsites; ++i) {
        double dy = (y - sites[i].y) / height, dx = (x - sites[i].x) / width;
        double d = sites[i].weight * (dy * dy + dx * dx);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      const Site& s = sites[best];
      double u = level_u[s.level];
      inv_depth.at(y, x) = u + s.tilt * u * ((x - s.x) + (y - s.y));
      region.at(y, x) = best;
    }
  Image<double> depth(height, width, 1);
  for (std::size_t i = 0; i < depth.data.size(); ++i)
    depth.data[i] = std::clamp(1.0 / std::max(inv_depth.data[i], 1e-3), 0.4, 5.0);

  // texture: piecewise-smooth albedo with strong step edges (deblurring a
  // wrong kernel rings visibly against flat areas), plus sparse shapes, a
  // grating patch and low-amplitude fine noise
  Image<double> img(height, width, 1, 0.0);
  std::vector<double> albedo(static_cast<std::size_t>(nregions) + 1);
  for (auto& a : albedo) a = rng.uniform(0.2, 0.8);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) img.at(y, x) = albedo[region.at(y, x)];

  int nshapes = static_cast<int>(rng.uniform_int(8, 14));
  for (int s = 0; s < nshapes; ++s) {
    double value = rng.uniform(0.05, 0.95);
    int kind = static_cast<int>(rng.uniform_int(0, 2));
    double cy = rng.uniform(0.05, 0.95) * height;
    double cx = rng.uniform(0.05, 0.95) * width;
    if (kind == 0) {  // disc
      double r = rng.uniform(0.03, 0.12) * std::min(height, width);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) img.at(y, x) = value;
    } else if (kind == 1) {  // axis-aligned bar
      bool horiz = rng.uniform() < 0.5;
      double half_t = rng.uniform(0.8, 2.5);
      double half_l = rng.uniform(0.08, 0.3) * (horiz ? width : height);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          double along = horiz ? x - cx : y - cy;
          double across = horiz ? y - cy : x - cx;
          if (std::abs(along) <= half_l && std::abs(across) <= half_t) img.at(y, x) = value;
        }
    } else {  // rectangle
      double ry = rng.uniform(0.03, 0.14) * height;
      double rx = rng.uniform(0.03, 0.14) * width;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          if (std::abs(y - cy) <= ry && std::abs(x - cx) <= rx) img.at(y, x) = value;
    }
  }

  {  // one localized grating patch
    double freq = rng.uniform(0.08, 0.25);
    double theta = rng.uniform(0.0, 6.283185307179586477);
    double phase = rng.uniform(0.0, 6.283185307179586477);
    double amp = rng.uniform(0.1, 0.2);
    double cy = rng.uniform(0.2, 0.8) * height;
    double cx = rng.uniform(0.2, 0.8) * width;
    double rr = rng.uniform(0.15, 0.3) * std::min(height, width);
    double fx = freq * std::cos(theta), fy = freq * std::sin(theta);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rr * rr)
          img.at(y, x) += amp * std::sin(6.283185307179586477 * (fx * x + fy * y) + phase);
  }

  // speckles: small high-contrast dots, the strongest defocus cue
  int ndots = static_cast<int>(rng.uniform_int(90, 150) * (height / 64.0) * (width / 64.0)) + 8;
  for (int s = 0; s < ndots; ++s) {
    int dy = static_cast<int>(rng.uniform_int(1, height - 2));
    int dx = static_cast<int>(rng.uniform_int(1, width - 2));
    double value = rng.uniform() < 0.5 ? rng.uniform(0.0, 0.1) : rng.uniform(0.9, 1.0);
    int size = rng.uniform() < 0.6 ? 1 : 2;
    for (int yy = dy; yy < std::min(dy + size, height); ++yy)
      for (int xx = dx; xx < std::min(dx + size, width); ++xx) img.at(yy, xx) = value;
  }

  Image<double> fine =
      detail::value_noise(rng, height, width, static_cast<int>(rng.uniform_int(2, 4)));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) img.at(y, x) += 0.04 * fine.at(y, x);

  double lo = img.data[0], hi = img.data[0];
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span = hi > lo ? hi - lo : 1.0;
  for (auto& v : img.data) v = 0.03 + 0.94 * (v - lo) / span;

  scene.image = std::move(img);
  scene.depth = std::move(depth);
  return scene;
}

}  // namespace defocus
