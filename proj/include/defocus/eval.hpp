// Logit decoding, N-1/N-3 accuracy metrics, and blur-map rendering.
#pragma once

#include <map>

#include "defocus/common.hpp"
#include "defocus/deconv.hpp"

namespace defocus {

// Per-pixel argmax over valid (non-padding) slices, ties broken toward the
// lowest depth index; the winning slice maps to its signed label (the
// defocused-image slice decodes as label 0).
template <typename T>
Image<std::int8_t> decode(const LogitVolume<T>& logits,
                          const std::array<std::int8_t, 24>& slice_labels) {
  if (logits.depth != 24) throw ConfigError("decode: logit volume depth must be 24");
  std::array<int, 24> valid{};
  int nvalid = 0;
  for (int k = 0; k < 24; ++k)
    if (slice_labels[k] != HypothesisStack::kPadSlice) valid[nvalid++] = k;
  if (nvalid == 0) throw ConfigError("decode: stack has no valid slices");

  Image<std::int8_t> out(logits.height, logits.width, 1);
  const std::size_t npix = static_cast<std::size_t>(logits.height) * logits.width;
  for (std::size_t p = 0; p < npix; ++p) {
    const T* z = &logits.values[p * 24];
    int best = valid[0];
    for (int i = 1; i < nvalid; ++i) {
      int k = valid[i];
      if (z[k] > z[best]) best = k;
    }
    std::int8_t sl = slice_labels[best];
    out.data[p] = sl == HypothesisStack::kDiSlice ? 0 : sl;
  }
  return out;
}

// Canonical ordered label list for a bank size: -m..-2, 0, +2..+m.
inline std::vector<int> canonical_label_order(int max_blur) {
  std::vector<int> order;
  for (int l = -max_blur; l <= -2; ++l) order.push_back(l);
  order.push_back(0);
  for (int l = 2; l <= max_blur; ++l) order.push_back(l);
  return order;
}

struct MetricsReport {
  double n1 = 0.0;  // percent
  double n3 = 0.0;  // percent
  std::map<std::pair<int, int>, long> confusion;  // (gt, pred) -> count
  long pixels = 0;

  void accumulate(const MetricsReport& o) {
    pixels += o.pixels;
    for (const auto& [key, cnt] : o.confusion) confusion[key] += cnt;
  }

  // recompute percentages from confusion counts against a label order
  void finalize(const std::vector<int>& label_order) {
    std::map<int, int> pos;
    for (std::size_t i = 0; i < label_order.size(); ++i) pos[label_order[i]] = static_cast<int>(i);
    long exact = 0, near = 0;
    for (const auto& [key, cnt] : confusion) {
      int dg = pos.at(key.first), dp = pos.at(key.second);
      if (dg == dp) exact += cnt;
      if (std::abs(dg - dp) <= 1) near += cnt;
    }
    n1 = pixels > 0 ? 100.0 * exact / pixels : 0.0;
    n3 = pixels > 0 ? 100.0 * near / pixels : 0.0;
  }
};

// N-1: exact label match. N-3: match within one step in the ordered label
// list (0's neighbors are -2 and +2 because +-1 collapse into 0).
inline MetricsReport metrics(const Image<std::int8_t>& pred, const Image<std::int8_t>& gt,
                             const std::vector<int>& label_order) {
  if (!pred.same_shape(gt)) throw ConfigError("metrics: pred/gt shape mismatch");
  std::map<int, int> pos;
  for (std::size_t i = 0; i < label_order.size(); ++i) pos[label_order[i]] = static_cast<int>(i);
  MetricsReport r;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    int p = pred.data[i], g = gt.data[i];
    if (!pos.count(p))
      throw ConfigError("metrics: predicted label " + std::to_string(p) + " outside label set");
    if (!pos.count(g))
      throw ConfigError("metrics: ground-truth label " + std::to_string(g) + " outside label set");
    r.confusion[{g, p}] += 1;
    r.pixels += 1;
  }
  r.finalize(label_order);
  return r;
}

// Drops a border of the given width on all sides.
template <typename T>
Image<T> crop_border(const Image<T>& img, int border) {
  if (img.height <= 2 * border || img.width <= 2 * border)
    throw ConfigError("crop_border: image too small for border " + std::to_string(border));
  Image<T> out(img.height - 2 * border, img.width - 2 * border, img.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = img.at(y + border, x + border, c);
  return out;
}

// Diverging colormap centered at label 0: negative labels cool (blue),
// positive warm (red). A legend strip with one block per label in canonical
// order is appended below the map.
inline Image<std::uint8_t> render_blur_map(const Image<std::int8_t>& labels, int max_blur) {
  auto color_of = [max_blur](int label) {
    double t = static_cast<double>(label) / max_blur;  // [-1, 1]
    double r, g, b;
    if (t < 0) {  // white -> blue
      r = 1.0 + t * 0.78;
      g = 1.0 + t * 0.65;
      b = 1.0;
    } else {  // white -> red
      r = 1.0;
      g = 1.0 - t * 0.72;
      b = 1.0 - t * 0.85;
    }
    auto q = [](double v) {
      return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    };
    return std::array<std::uint8_t, 3>{q(r), q(g), q(b)};
  };

  const int legend_h = 8;
  auto order = canonical_label_order(max_blur);
  Image<std::uint8_t> out(labels.height + legend_h, labels.width, 3);
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x) {
      int l = labels.at(y, x);
      if (l != 0 && (std::abs(l) < 2 || std::abs(l) > max_blur))
        throw ConfigError("render_blur_map: label " + std::to_string(l) + " outside set");
      auto c = color_of(l);
      for (int i = 0; i < 3; ++i) out.at(y, x, i) = c[i];
    }
  const int nblocks = static_cast<int>(order.size());
  for (int y = labels.height; y < out.height; ++y)
    for (int x = 0; x < labels.width; ++x) {
      int block = std::min(nblocks - 1, x * nblocks / labels.width);
      auto c = color_of(order[block]);
      for (int i = 0; i < 3; ++i) out.at(y, x, i) = c[i];
    }
  return out;
}

}  // namespace defocus
