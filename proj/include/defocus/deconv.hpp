// Deblurring under PSF hypotheses and assembly of the fixed-depth-24 input
// stack: Wiener deconvolution in the frequency domain (FFTW) and a
// conjugate-gradient solver with a quadratic gradient prior in the spatial
// domain.
#pragma once

#include <complex>
#include <filesystem>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "defocus/common.hpp"
#include "defocus/io.hpp"
#include "defocus/optics.hpp"

namespace defocus {

namespace detail {

inline std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

// In-place 2-D complex FFT. Plan creation is serialized (FFTW planning is not
// thread-safe); FFTW_ESTIMATE leaves the buffer untouched during planning.
inline void fft2d(std::vector<std::complex<double>>& a, int h, int w, bool inverse) {
  fftw_complex* buf = reinterpret_cast<fftw_complex*>(a.data());
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_mutex());
    plan = fftw_plan_dft_2d(h, w, buf, buf, inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
  }
  if (!plan) throw NumericError("fftw plan creation failed");
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(fftw_mutex());
    fftw_destroy_plan(plan);
  }
  if (inverse) {
    double scale = 1.0 / (static_cast<double>(h) * w);
    for (auto& v : a) v *= scale;
  }
}

// Transfer function of the forward blur implemented by conv_gather: the
// kernel tap at offset (t - c) lands at index (t - c) mod N, and the gather
// (correlation) convention conjugates the spectrum.
inline std::vector<std::complex<double>> forward_otf(const Image<double>& psf, int ph, int pw) {
  const int side = psf.height;
  const int cy = (side - 1) / 2, cx = (side - 1) / 2;
  std::vector<std::complex<double>> h(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int ky = 0; ky < side; ++ky)
    for (int kx = 0; kx < side; ++kx) {
      int y = (((ky - cy) % ph) + ph) % ph;
      int x = (((kx - cx) % pw) + pw) % pw;
      h[static_cast<std::size_t>(y) * pw + x] += psf.at(ky, kx);
    }
  fft2d(h, ph, pw, false);
  for (auto& v : h) v = std::conj(v);
  return h;
}

inline void validate_psf(const Image<double>& psf, const char* who) {
  if (psf.channels != 1 || psf.height != psf.width)
    throw ConfigError(std::string(who) + ": PSF must be a square single-channel kernel");
  double sum = 0.0;
  for (double v : psf.data) sum += v;
  if (std::abs(sum - 1.0) > 1e-6)
    throw ConfigError(std::string(who) + ": PSF must sum to 1 (got " + std::to_string(sum) + ")");
}

}  // namespace detail

// Frequency-domain deblur: X = conj(H) Y / (|H|^2 + nsr) per channel.
// With replicate boundary the image is edge-padded to (H+side, W+side) before
// the FFT and cropped afterwards; periodic mode transforms the image as-is.
inline Image<double> wiener_deblur(const Image<double>& image, const Image<double>& psf,
                                   double nsr, Boundary boundary = Boundary::replicate) {
  detail::validate_psf(psf, "wiener_deblur");
  if (image.height < 1 || image.width < 1) throw ConfigError("wiener_deblur: empty image");
  if (nsr < 0.0) throw ConfigError("wiener_deblur: nsr must be non-negative");
  const int side = psf.height;
  const int cy = (side - 1) / 2, cx = (side - 1) / 2;
  const bool padded = boundary == Boundary::replicate;
  const int ph = padded ? image.height + side : image.height;
  const int pw = padded ? image.width + side : image.width;

  std::vector<std::complex<double>> otf = detail::forward_otf(psf, ph, pw);
  if (nsr == 0.0) {
    for (const auto& v : otf)
      if (std::abs(v) < 1e-12)
        throw NumericError("wiener_deblur: singular inverse (OTF has near-zero entries, nsr=0)");
  }

  Image<double> out(image.height, image.width, image.channels);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(ph) * pw);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) {
        int sy = padded ? std::clamp(y - cy, 0, image.height - 1) : y;
        int sx = padded ? std::clamp(x - cx, 0, image.width - 1) : x;
        buf[static_cast<std::size_t>(y) * pw + x] = image.at(sy, sx, c);
      }
    detail::fft2d(buf, ph, pw, false);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      double denom = std::norm(otf[i]) + nsr;
      buf[i] = std::conj(otf[i]) * buf[i] / denom;
    }
    detail::fft2d(buf, ph, pw, true);
    const int oy = padded ? cy : 0, ox = padded ? cx : 0;
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        out.at(y, x, c) = buf[static_cast<std::size_t>(y + oy) * pw + (x + ox)].real();
  }
  return out;
}

namespace detail {

// Plane helpers for the CG solver (single channel, contiguous).

inline void blur_apply(const std::vector<double>& x, std::vector<double>& out, int h, int w,
                       const Image<double>& psf) {
  const int side = psf.height;
  const int cy = (side - 1) / 2, cx = (side - 1) / 2;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      double acc = 0.0;
      for (int ky = 0; ky < side; ++ky) {
        int sy = std::clamp(y + ky - cy, 0, h - 1);
        for (int kx = 0; kx < side; ++kx) {
          int sx = std::clamp(xx + kx - cx, 0, w - 1);
          acc += psf.at(ky, kx) * x[static_cast<std::size_t>(sy) * w + sx];
        }
      }
      out[static_cast<std::size_t>(y) * w + xx] = acc;
    }
}

// Exact adjoint of blur_apply (scatter through the same clamped index map).
inline void blur_adjoint(const std::vector<double>& r, std::vector<double>& out, int h, int w,
                         const Image<double>& psf) {
  const int side = psf.height;
  const int cy = (side - 1) / 2, cx = (side - 1) / 2;
  std::fill(out.begin(), out.end(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      double rv = r[static_cast<std::size_t>(y) * w + xx];
      for (int ky = 0; ky < side; ++ky) {
        int sy = std::clamp(y + ky - cy, 0, h - 1);
        for (int kx = 0; kx < side; ++kx) {
          int sx = std::clamp(xx + kx - cx, 0, w - 1);
          out[static_cast<std::size_t>(sy) * w + sx] += psf.at(ky, kx) * rv;
        }
      }
    }
}

// grad^T grad for forward differences in both directions (graph Laplacian).
inline void laplacian_apply(const std::vector<double>& x, std::vector<double>& out, int h, int w) {
  std::fill(out.begin(), out.end(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx + 1 < w; ++xx) {
      double d = x[static_cast<std::size_t>(y) * w + xx + 1] - x[static_cast<std::size_t>(y) * w + xx];
      out[static_cast<std::size_t>(y) * w + xx + 1] += d;
      out[static_cast<std::size_t>(y) * w + xx] -= d;
    }
  for (int y = 0; y + 1 < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      double d = x[static_cast<std::size_t>(y + 1) * w + xx] - x[static_cast<std::size_t>(y) * w + xx];
      out[static_cast<std::size_t>(y + 1) * w + xx] += d;
      out[static_cast<std::size_t>(y) * w + xx] -= d;
    }
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cg_objective(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                           const Image<double>& psf, double reg, std::vector<double>& scratch) {
  blur_apply(x, scratch, h, w, psf);
  double data = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = scratch[i] - y[i];
    data += d * d;
  }
  double smooth = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c + 1 < w; ++c) {
      double d = x[static_cast<std::size_t>(r) * w + c + 1] - x[static_cast<std::size_t>(r) * w + c];
      smooth += d * d;
    }
  for (int r = 0; r + 1 < h; ++r)
    for (int c = 0; c < w; ++c) {
      double d = x[static_cast<std::size_t>(r + 1) * w + c] - x[static_cast<std::size_t>(r) * w + c];
      smooth += d * d;
    }
  return data + reg * smooth;
}

}  // namespace detail

struct CgResult {
  Image<double> x;
  int iterations = 0;       // max across channels
  double rel_residual = 0;  // max across channels, true residual at exit
  std::vector<double> objective_trace;  // first channel
};

// Minimizes ||K x - y||^2 + reg (||grad_h x||^2 + ||grad_v x||^2) by conjugate
// gradients on the normal equations, warm-started at x = y. The objective is
// checked every iteration and must not increase (SPD system).
inline CgResult cg_deblur(const Image<double>& image, const Image<double>& psf, double reg,
                          double tol = 1e-6, int max_iter = 500) {
  detail::validate_psf(psf, "cg_deblur");
  if (reg < 0.0) throw ConfigError("cg_deblur: reg must be non-negative");
  if (max_iter < 1) throw ConfigError("cg_deblur: max_iter must be >= 1");
  const int h = image.height, w = image.width;
  const std::size_t npix = static_cast<std::size_t>(h) * w;

  CgResult result;
  result.x = Image<double>(h, w, image.channels);

  std::vector<double> y(npix), x(npix), r(npix), p(npix), ap(npix), scratch(npix), tmp(npix);
  auto apply_a = [&](const std::vector<double>& v, std::vector<double>& out) {
    detail::blur_apply(v, scratch, h, w, psf);
    detail::blur_adjoint(scratch, out, h, w, psf);
    detail::laplacian_apply(v, tmp, h, w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += reg * tmp[i];
  };

  for (int c = 0; c < image.channels; ++c) {
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) y[static_cast<std::size_t>(yy) * w + xx] = image.at(yy, xx, c);

    std::vector<double> b(npix);
    detail::blur_adjoint(y, b, h, w, psf);
    double bnorm = std::sqrt(detail::dot(b, b));
    x = y;
    if (bnorm == 0.0) {
      std::fill(x.begin(), x.end(), 0.0);
    } else {
      apply_a(x, ap);
      for (std::size_t i = 0; i < npix; ++i) r[i] = b[i] - ap[i];
      p = r;
      double rs = detail::dot(r, r);
      double obj = detail::cg_objective(x, y, h, w, psf, reg, scratch);
      if (c == 0) result.objective_trace.push_back(obj);
      int it = 0;
      while (it < max_iter && std::sqrt(rs) > tol * bnorm) {
        apply_a(p, ap);
        double pap = detail::dot(p, ap);
        if (!(pap > 0.0)) throw NumericError("cg_deblur: breakdown, system not positive definite");
        double alpha = rs / pap;
        for (std::size_t i = 0; i < npix; ++i) x[i] += alpha * p[i];
        for (std::size_t i = 0; i < npix; ++i) r[i] -= alpha * ap[i];
        double rs_next = detail::dot(r, r);
        double beta = rs_next / rs;
        for (std::size_t i = 0; i < npix; ++i) p[i] = r[i] + beta * p[i];
        rs = rs_next;
        ++it;
        double obj_next = detail::cg_objective(x, y, h, w, psf, reg, scratch);
        if (obj_next > obj + 1e-9)
          throw NumericError("cg_deblur: objective increased (divergence) at iteration " +
                             std::to_string(it));
        obj = obj_next;
        if (c == 0) result.objective_trace.push_back(obj);
      }
      result.iterations = std::max(result.iterations, it);
      // true residual at exit
      apply_a(x, ap);
      double rr = 0.0;
      for (std::size_t i = 0; i < npix; ++i) {
        double d = b[i] - ap[i];
        rr += d * d;
      }
      result.rel_residual = std::max(result.rel_residual, std::sqrt(rr) / bnorm);
    }
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) result.x.at(yy, xx, c) = x[static_cast<std::size_t>(yy) * w + xx];
  }
  return result;
}

// ---- hypothesis stack ----

enum class DeblurAlgo { wiener, cg };

inline const char* to_string(DeblurAlgo a) { return a == DeblurAlgo::wiener ? "wiener" : "cg"; }

inline DeblurAlgo deblur_algo_from_string(const std::string& s) {
  if (s == "wiener") return DeblurAlgo::wiener;
  if (s == "cg") return DeblurAlgo::cg;
  throw ConfigError("unknown deblur algorithm '" + s + "' (want wiener or cg)");
}

struct DeblurParams {
  double nsr = 1e-3;     // wiener
  double lambda = 1e-3;  // cg
  double tol = 1e-6;     // cg
  int max_iter = 500;    // cg
};

// Deblurred slices are clamped to this range before stacking; the raw
// defocused slice is stored as-is.
inline constexpr float kStackClampLo = -0.25f;
inline constexpr float kStackClampHi = 1.25f;

// Fixed-depth stack of deblurred hypotheses: slices 0..n-1 are the deblurred
// results in ascending label order (-m..-2, +2..+m), slice n is the defocused
// image itself, slices n+1..23 are zero padding.
struct HypothesisStack {
  static constexpr int kDepth = 24;
  static constexpr std::int8_t kDiSlice = 127;    // sentinel: defocused image
  static constexpr std::int8_t kPadSlice = -128;  // sentinel: zero padding

  Tensor4<float> data;  // [H, W, 24, C]
  std::array<std::int8_t, kDepth> slice_labels{};
  int n = 0;  // deblurred slice count (= 2 * max_blur - 2)

  int height() const { return data.height; }
  int width() const { return data.width; }
  int channels() const { return data.channels; }
};

inline Image<double> deblur_with(const Image<double>& image, const Image<double>& psf,
                                 DeblurAlgo algo, const DeblurParams& params) {
  if (algo == DeblurAlgo::wiener) return wiener_deblur(image, psf, params.nsr);
  return cg_deblur(image, psf, params.lambda, params.tol, params.max_iter).x;
}

inline HypothesisStack build_stack(const Image<double>& defocused, const KernelBank& bank,
                                   DeblurAlgo algo, const DeblurParams& params = {}) {
  const int m = bank.max_blur;
  if (2 * m - 1 > HypothesisStack::kDepth)
    throw ConfigError("build_stack: max_blur " + std::to_string(m) +
                      " exceeds the depth-24 stack capacity (max 12)");
  HypothesisStack stack;
  stack.n = 2 * m - 2;
  stack.data = Tensor4<float>(defocused.height, defocused.width, HypothesisStack::kDepth,
                              defocused.channels, 0.0f);
  stack.slice_labels.fill(HypothesisStack::kPadSlice);

  int slice = 0;
  for (std::size_t i = 0; i < bank.labels.size(); ++i) {
    int label = bank.labels[i];
    if (label == 0) continue;
    Image<double> deblurred;
    try {
      deblurred = deblur_with(defocused, bank.kernels[i], algo, params);
    } catch (const NumericError& e) {
      throw NumericError("hypothesis label " + std::to_string(label) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("hypothesis label " + std::to_string(label) + ": " + e.what());
    }
    for (int y = 0; y < defocused.height; ++y)
      for (int x = 0; x < defocused.width; ++x)
        for (int c = 0; c < defocused.channels; ++c)
          stack.data.at(y, x, slice, c) = std::clamp(
              static_cast<float>(deblurred.at(y, x, c)), kStackClampLo, kStackClampHi);
    stack.slice_labels[slice] = static_cast<std::int8_t>(label);
    ++slice;
  }
  for (int y = 0; y < defocused.height; ++y)
    for (int x = 0; x < defocused.width; ++x)
      for (int c = 0; c < defocused.channels; ++c)
        stack.data.at(y, x, slice, c) = static_cast<float>(defocused.at(y, x, c));
  stack.slice_labels[slice] = HypothesisStack::kDiSlice;
  return stack;
}

// Maps per-pixel signed labels to stack slice indices (label 0 resolves to
// the defocused-image slice). Works on shuffled stacks as well.
inline Image<int> label_index_map(const Image<std::int8_t>& labels,
                                  const std::array<std::int8_t, 24>& slice_labels) {
  std::array<int, 256> table;
  table.fill(-1);
  auto slot = [](int label) { return label + 128; };
  for (int k = 0; k < 24; ++k) {
    std::int8_t sl = slice_labels[k];
    if (sl == HypothesisStack::kPadSlice) continue;
    if (sl == HypothesisStack::kDiSlice)
      table[slot(0)] = k;
    else
      table[slot(sl)] = k;
  }
  Image<int> out(labels.height, labels.width, 1);
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x) {
      int idx = table[slot(labels.at(y, x))];
      if (idx < 0)
        throw DataError("label " + std::to_string(static_cast<int>(labels.at(y, x))) +
                        " has no slice in this stack");
      out.at(y, x) = idx;
    }
  return out;
}

// ---- stack serialization: "HSTK" ----

inline void save_stack(const std::filesystem::path& p, const HypothesisStack& stack) {
  auto os = detail::open_out(p);
  os.write("HSTK", 4);
  detail::write_u32_le(os, static_cast<std::uint32_t>(stack.data.height));
  detail::write_u32_le(os, static_cast<std::uint32_t>(stack.data.width));
  detail::write_u32_le(os, static_cast<std::uint32_t>(stack.data.depth));
  detail::write_u32_le(os, static_cast<std::uint32_t>(stack.data.channels));
  detail::write_u32_le(os, static_cast<std::uint32_t>(stack.n));
  os.write(reinterpret_cast<const char*>(stack.slice_labels.data()), 24);
  for (float v : stack.data.data) detail::write_f32_le(os, v);
  if (!os) throw DataError("write failed: " + p.string());
}

inline HypothesisStack load_stack(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  detail::expect_magic(is, "HSTK", "load_stack");
  std::uint32_t h = detail::read_u32_le(is);
  std::uint32_t w = detail::read_u32_le(is);
  std::uint32_t d = detail::read_u32_le(is);
  std::uint32_t c = detail::read_u32_le(is);
  std::uint32_t n = detail::read_u32_le(is);
  if (d != HypothesisStack::kDepth)
    throw DataError("load_stack: depth " + std::to_string(d) + ", expected 24");
  if (h < 1 || w < 1 || c < 1 || h > (1u << 20) || w > (1u << 20) || c > 64 || n >= d)
    throw DataError("load_stack: implausible header");
  HypothesisStack stack;
  stack.n = static_cast<int>(n);
  is.read(reinterpret_cast<char*>(stack.slice_labels.data()), 24);
  if (!is) throw DataError("load_stack: truncated header");
  stack.data = Tensor4<float>(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d),
                              static_cast<int>(c));
  for (auto& v : stack.data.data) v = detail::read_f32_le(is);
  return stack;
}

}  // namespace defocus
