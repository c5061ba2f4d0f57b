// Training objective: random depth shuffle, per-pixel cross-entropy over the
// depth axis, Gumbel-softmax soft index map, and first-order smoothness loss.
#pragma once

#include <numeric>
#include <optional>

#include "defocus/common.hpp"
#include "defocus/deconv.hpp"

namespace defocus {

// Bijection on the 24 depth positions (padding included).
struct DepthPermutation {
  std::array<int, 24> perm{};
  std::uint64_t seed = 0;

  static DepthPermutation identity() {
    DepthPermutation p;
    std::iota(p.perm.begin(), p.perm.end(), 0);
    return p;
  }

  // Fisher-Yates from a dedicated stream.
  static DepthPermutation random(std::uint64_t seed) {
    DepthPermutation p = identity();
    p.seed = seed;
    Rng rng(mix_seed(seed, 0x9e6f1eull));
    for (int i = 23; i > 0; --i) {
      int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(p.perm[i], p.perm[j]);
    }
    return p;
  }

  DepthPermutation inverse() const {
    DepthPermutation inv;
    inv.seed = seed;
    for (int i = 0; i < 24; ++i) inv.perm[perm[i]] = i;
    return inv;
  }

  bool valid() const {
    std::array<bool, 24> seen{};
    for (int v : perm) {
      if (v < 0 || v >= 24 || seen[v]) return false;
      seen[v] = true;
    }
    return true;
  }
};

// stack'[.., k, ..] = stack[.., perm^-1(k), ..]; slice_labels move with their
// slices; gt'(p) = perm(gt(p)).
inline std::pair<HypothesisStack, Image<int>> random_shuffle(const HypothesisStack& stack,
                                                             const Image<int>& gt,
                                                             const DepthPermutation& perm) {
  if (!perm.valid()) throw ConfigError("random_shuffle: not a permutation");
  HypothesisStack out;
  out.n = stack.n;
  out.data = Tensor4<float>(stack.data.height, stack.data.width, stack.data.depth,
                            stack.data.channels);
  DepthPermutation inv = perm.inverse();
  for (int k = 0; k < 24; ++k) out.slice_labels[k] = stack.slice_labels[inv.perm[k]];
  const int c = stack.data.channels;
  const std::size_t sites = static_cast<std::size_t>(stack.data.height) * stack.data.width;
  for (std::size_t si = 0; si < sites; ++si)
    for (int k = 0; k < 24; ++k) {
      const float* src = &stack.data.data[(si * 24 + static_cast<std::size_t>(inv.perm[k])) * c];
      float* dst = &out.data.data[(si * 24 + static_cast<std::size_t>(k)) * c];
      for (int i = 0; i < c; ++i) dst[i] = src[i];
    }
  Image<int> gt_out(gt.height, gt.width, 1);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    int v = gt.data[i];
    if (v < 0 || v >= 24) throw ConfigError("random_shuffle: gt index out of range");
    gt_out.data[i] = perm.perm[v];
  }
  return {std::move(out), std::move(gt_out)};
}

template <typename T>
struct CrossEntropyResult {
  double value = 0.0;
  LogitVolume<T> grad;  // d(mean CE)/d logits = (softmax - onehot) / pixel count
};

namespace detail {

// Softmax statistics computed order-independently: the max is a true max and
// the exp sum is accumulated over value-sorted entries, so any depth
// permutation of the inputs yields bit-identical results.
template <typename T>
struct SoftmaxStats {
  T maxv;
  double sum;
};

template <typename T>
SoftmaxStats<T> softmax_stats(const T* z, int d, std::vector<T>& scratch) {
  scratch.assign(z, z + d);
  std::sort(scratch.begin(), scratch.end());
  T maxv = scratch[d - 1];
  double sum = 0.0;
  for (int k = 0; k < d; ++k) sum += std::exp(static_cast<double>(scratch[k] - maxv));
  return {maxv, sum};
}

}  // namespace detail

// Mean over pixels of -log softmax(logits(p))[gt(p)], softmax along depth.
template <typename T>
CrossEntropyResult<T> cross_entropy(const LogitVolume<T>& logits, const Image<int>& gt) {
  if (gt.height != logits.height || gt.width != logits.width)
    throw ConfigError("cross_entropy: gt dims do not match logits");
  const int d = logits.depth;
  const std::size_t npix = static_cast<std::size_t>(logits.height) * logits.width;
  CrossEntropyResult<T> out;
  out.grad = LogitVolume<T>(logits.height, logits.width, d);
  double total = 0.0;
  std::vector<T> scratch;
  for (std::size_t p = 0; p < npix; ++p) {
    int g = gt.data[p];
    if (g < 0 || g >= d)
      throw ConfigError("cross_entropy: gt index " + std::to_string(g) + " out of range");
    const T* z = &logits.values[p * d];
    T* gr = &out.grad.values[p * d];
    auto st = detail::softmax_stats(z, d, scratch);
    double logsum = std::log(st.sum);
    total += logsum - static_cast<double>(z[g] - st.maxv);
    for (int k = 0; k < d; ++k) {
      double y = std::exp(static_cast<double>(z[k] - st.maxv)) / st.sum;
      gr[k] = static_cast<T>((y - (k == g ? 1.0 : 0.0)) / static_cast<double>(npix));
    }
  }
  out.value = total / static_cast<double>(npix);
  return out;
}

template <typename T>
struct SoftIndexResult {
  Image<T> index;           // per-pixel expected depth index, in [0, depth-1]
  std::vector<T> probs;     // softmax((logits + G)/tau) per pixel, depth fastest
  double tau = 0.5;
};

// Differentiable index map: y = softmax((logits + G)/tau) with i.i.d.
// Gumbel(0,1) noise G; soft index = sum_k k y_k. Pass nullopt for the
// noise-free (G = 0) mode.
template <typename T>
SoftIndexResult<T> gumbel_soft_index(const LogitVolume<T>& logits, double tau,
                                     std::optional<std::uint64_t> noise_seed) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_soft_index: temperature must be positive");
  const int d = logits.depth;
  const std::size_t npix = static_cast<std::size_t>(logits.height) * logits.width;
  SoftIndexResult<T> out;
  out.tau = tau;
  out.index = Image<T>(logits.height, logits.width, 1);
  out.probs.resize(npix * d);
  std::optional<Rng> rng;
  if (noise_seed) rng.emplace(mix_seed(*noise_seed, 0x6b3a77ull));
  std::vector<double> z(d);
  for (std::size_t p = 0; p < npix; ++p) {
    const T* lp = &logits.values[p * d];
    for (int k = 0; k < d; ++k) {
      double g = rng ? rng->gumbel() : 0.0;
      z[k] = (static_cast<double>(lp[k]) + g) / tau;
    }
    double maxv = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (int k = 0; k < d; ++k) {
      z[k] = std::exp(z[k] - maxv);
      sum += z[k];
    }
    double idx = 0.0;
    T* pp = &out.probs[p * d];
    for (int k = 0; k < d; ++k) {
      double y = z[k] / sum;
      pp[k] = static_cast<T>(y);
      idx += k * y;
    }
    out.index.data[p] = static_cast<T>(idx);
  }
  return out;
}

// d(soft index)/d(logit_k) = y_k (k - index) / tau.
template <typename T>
LogitVolume<T> soft_index_backward(const SoftIndexResult<T>& cache, const Image<T>& upstream) {
  const int d = static_cast<int>(cache.probs.size() / cache.index.data.size());
  LogitVolume<T> grad(cache.index.height, cache.index.width, d);
  const std::size_t npix = cache.index.data.size();
  for (std::size_t p = 0; p < npix; ++p) {
    double u = static_cast<double>(upstream.data[p]);
    double idx = static_cast<double>(cache.index.data[p]);
    const T* pp = &cache.probs[p * d];
    T* gp = &grad.values[p * d];
    for (int k = 0; k < d; ++k)
      gp[k] = static_cast<T>(u * static_cast<double>(pp[k]) * (k - idx) / cache.tau);
  }
  return grad;
}

template <typename T>
struct SmoothnessResult {
  double value = 0.0;
  Image<T> grad;
};

// Mean absolute first-order forward difference, horizontal and vertical
// pairs pooled together.
template <typename T>
SmoothnessResult<T> smoothness_loss(const Image<T>& index_map) {
  if (index_map.height < 2 || index_map.width < 2)
    throw ConfigError("smoothness_loss: map must be at least 2x2");
  const int h = index_map.height, w = index_map.width;
  const double count = static_cast<double>(h) * (w - 1) + static_cast<double>(h - 1) * w;
  SmoothnessResult<T> out;
  out.grad = Image<T>(h, w, 1, T(0));
  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x) {
      double dv = static_cast<double>(index_map.at(y, x + 1)) - index_map.at(y, x);
      total += std::abs(dv);
      double s = dv > 0.0 ? 1.0 : (dv < 0.0 ? -1.0 : 0.0);
      out.grad.at(y, x + 1) += static_cast<T>(s / count);
      out.grad.at(y, x) -= static_cast<T>(s / count);
    }
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dv = static_cast<double>(index_map.at(y + 1, x)) - index_map.at(y, x);
      total += std::abs(dv);
      double s = dv > 0.0 ? 1.0 : (dv < 0.0 ? -1.0 : 0.0);
      out.grad.at(y + 1, x) += static_cast<T>(s / count);
      out.grad.at(y, x) -= static_cast<T>(s / count);
    }
  out.value = total / count;
  return out;
}

struct LossReport {
  double ce = 0.0;
  double smooth = 0.0;
  double total = 0.0;  // ce + lambda_s * smooth
  double lambda_s = 0.0;
};

template <typename T>
struct TotalLossResult {
  LossReport report;
  LogitVolume<T> grad;
};

// Combined objective: cross-entropy plus lambda_s times the smoothness of
// the Gumbel-softmax soft index map, with the gradient propagated through
// both branches.
template <typename T>
TotalLossResult<T> total_loss(const LogitVolume<T>& logits, const Image<int>& gt, double tau,
                              double lambda_s, std::optional<std::uint64_t> noise_seed) {
  TotalLossResult<T> out;
  auto ce = cross_entropy(logits, gt);
  auto soft = gumbel_soft_index(logits, tau, noise_seed);
  auto smooth = smoothness_loss(soft.index);
  LogitVolume<T> smooth_grad = soft_index_backward(soft, smooth.grad);

  out.report.ce = ce.value;
  out.report.smooth = smooth.value;
  out.report.lambda_s = lambda_s;
  out.report.total = ce.value + lambda_s * smooth.value;
  out.grad = std::move(ce.grad);
  for (std::size_t i = 0; i < out.grad.values.size(); ++i)
    out.grad.values[i] += static_cast<T>(lambda_s) * smooth_grad.values[i];
  return out;
}

}  // namespace defocus
