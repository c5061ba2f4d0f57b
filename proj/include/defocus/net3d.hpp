// 3-D fully convolutional encoder-decoder with skip connections: explicit
// forward and reverse-mode gradient passes, SGD update, checkpoint I/O.
// All convolutions are 3x3x3 cross-correlations with ceil-division "same"
// zero padding; stride and dilation apply uniformly to H, W and D.
#pragma once

#include <cstring>
#include <filesystem>

#include "defocus/common.hpp"
#include "defocus/deconv.hpp"

namespace defocus {

struct ConvSpec {
  const char* name;
  int stride;
  int dilation;
  int filters;
};

// Canonical architecture, one row per convolution. Inputs: each layer takes
// the previous activation except conv5_1/conv6_1/conv7_1, which take the 2x
// nearest-neighbor upsampling of a channel concatenation (see net_forward).
inline constexpr std::array<ConvSpec, 18> kNetConvs = {{
    {"conv1_1", 1, 1, 8},
    {"conv1_2", 2, 1, 16},
    {"conv2_1", 1, 1, 16},
    {"conv2_2", 2, 1, 32},
    {"conv3_1", 1, 1, 32},
    {"conv3_2", 1, 1, 32},
    {"conv3_3", 2, 1, 64},
    {"conv4_1", 1, 2, 64},
    {"conv4_2", 1, 2, 64},
    {"conv4_3", 1, 2, 64},
    {"conv5_1", 1, 1, 32},
    {"conv5_2", 1, 1, 32},
    {"conv5_3", 1, 1, 32},
    {"conv6_1", 1, 1, 16},
    {"conv6_2", 1, 1, 16},
    {"conv7_1", 1, 1, 8},
    {"conv7_2", 1, 1, 8},
    {"conv7_3", 1, 1, 1},
}};

inline constexpr int kNumConvs = 18;
inline constexpr int kNumLayerNorms = 17;  // every conv but conv7_3

// Input channel count per layer for a given stack channel count.
inline std::array<int, kNumConvs> net_conv_cin(int in_channels) {
  return {in_channels, 8, 16, 16, 32, 32, 32, 64, 64, 64, 128, 32, 32, 64, 16, 32, 8, 8};
}

template <typename T>
struct ConvParam {
  int cin = 0, cout = 0, stride = 1, dilation = 1;
  std::vector<T> weight;  // [3][3][3][cin][cout], cout fastest
  std::vector<T> bias;    // [cout]
};

template <typename T>
struct LayerNormParam {
  std::vector<T> gain, offset;  // [C]
};

template <typename T>
struct NetParams {
  int in_channels = 1;
  std::array<ConvParam<T>, kNumConvs> conv;
  std::array<LayerNormParam<T>, kNumLayerNorms> ln;

  // zero-valued parameter set with canonical shapes
  static NetParams make(int in_channels) {
    NetParams p;
    p.in_channels = in_channels;
    auto cins = net_conv_cin(in_channels);
    for (int i = 0; i < kNumConvs; ++i) {
      auto& c = p.conv[i];
      c.cin = cins[i];
      c.cout = kNetConvs[i].filters;
      c.stride = kNetConvs[i].stride;
      c.dilation = kNetConvs[i].dilation;
      c.weight.assign(static_cast<std::size_t>(27) * c.cin * c.cout, T(0));
      c.bias.assign(c.cout, T(0));
      if (i < kNumLayerNorms) {
        p.ln[i].gain.assign(c.cout, T(0));
        p.ln[i].offset.assign(c.cout, T(0));
      }
    }
    return p;
  }

  template <typename U>
  NetParams<U> cast() const {
    NetParams<U> out = NetParams<U>::make(in_channels);
    for (int i = 0; i < kNumConvs; ++i) {
      for (std::size_t j = 0; j < conv[i].weight.size(); ++j)
        out.conv[i].weight[j] = static_cast<U>(conv[i].weight[j]);
      for (std::size_t j = 0; j < conv[i].bias.size(); ++j)
        out.conv[i].bias[j] = static_cast<U>(conv[i].bias[j]);
      if (i < kNumLayerNorms) {
        for (std::size_t j = 0; j < ln[i].gain.size(); ++j) {
          out.ln[i].gain[j] = static_cast<U>(ln[i].gain[j]);
          out.ln[i].offset[j] = static_cast<U>(ln[i].offset[j]);
        }
      }
    }
    return out;
  }
};

// Fan-in-scaled uniform init (bound sqrt(6/fan_in)); biases zero, layer-norm
// gain 1 and offset 0. Deterministic per seed.
template <typename T = float>
NetParams<T> init_params(std::uint64_t seed, int in_channels = 1) {
  NetParams<T> p = NetParams<T>::make(in_channels);
  Rng rng(mix_seed(seed, 0x173d09ull));
  for (int i = 0; i < kNumConvs; ++i) {
    double bound = std::sqrt(6.0 / (27.0 * p.conv[i].cin));
    for (auto& wv : p.conv[i].weight) wv = static_cast<T>(rng.uniform(-bound, bound));
    if (i < kNumLayerNorms) {
      std::fill(p.ln[i].gain.begin(), p.ln[i].gain.end(), T(1));
      std::fill(p.ln[i].offset.begin(), p.ln[i].offset.end(), T(0));
    }
  }
  return p;
}

namespace detail {

struct AxisPad {
  int out;
  int lo;
};

// ceil-division output size with "same" zero padding; for stride 2 the extra
// pad goes at the high end.
inline AxisPad same_pad(int in, int stride, int dilation) {
  int out = (in + stride - 1) / stride;
  int eff = 2 * dilation + 1;
  int total = std::max((out - 1) * stride + eff - in, 0);
  return {out, total / 2};
}

}  // namespace detail

template <typename T>
Tensor4<T> conv3d(const Tensor4<T>& in, const ConvParam<T>& p) {
  if (in.channels != p.cin)
    throw ConfigError("conv3d: input has " + std::to_string(in.channels) + " channels, expected " +
                      std::to_string(p.cin));
  const auto [oh, ply] = detail::same_pad(in.height, p.stride, p.dilation);
  const auto [ow, plx] = detail::same_pad(in.width, p.stride, p.dilation);
  const auto [od, plz] = detail::same_pad(in.depth, p.stride, p.dilation);
  Tensor4<T> out(oh, ow, od, p.cout);
  const int cin = p.cin, cout = p.cout, s = p.stride, dl = p.dilation;
  const int ih = in.height, iw = in.width, id = in.depth;
  const T* __restrict wall = p.weight.data();
  const T* __restrict ball = p.bias.data();
  const T* __restrict ivals = in.data.data();

#pragma omp parallel for schedule(static)
  for (int y = 0; y < oh; ++y) {
    std::vector<T> accbuf(cout);
    T* __restrict acc = accbuf.data();
    for (int x = 0; x < ow; ++x)
      for (int z = 0; z < od; ++z) {
        const int iy0 = y * s - ply, ix0 = x * s - plx, iz0 = z * s - plz;
        for (int co = 0; co < cout; ++co) acc[co] = ball[co];
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = iy0 + ky * dl;
          if (static_cast<unsigned>(iy) >= static_cast<unsigned>(ih)) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ix0 + kx * dl;
            if (static_cast<unsigned>(ix) >= static_cast<unsigned>(iw)) continue;
            for (int kz = 0; kz < 3; ++kz) {
              const int iz = iz0 + kz * dl;
              if (static_cast<unsigned>(iz) >= static_cast<unsigned>(id)) continue;
              const T* __restrict ip =
                  ivals + ((static_cast<std::size_t>(iy) * iw + ix) * id + iz) * cin;
              const T* __restrict wp =
                  wall + static_cast<std::size_t>((ky * 3 + kx) * 3 + kz) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                const T a = ip[ci];
                const T* __restrict wr = wp + static_cast<std::size_t>(ci) * cout;
                for (int co = 0; co < cout; ++co) acc[co] += a * wr[co];
              }
            }
          }
        }
        T* op = &out.data[((static_cast<std::size_t>(y) * ow + x) * od + z) * cout];
        for (int co = 0; co < cout; ++co) op[co] = acc[co];
      }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv3d_grad(const Tensor4<T>& upstream, const Tensor4<T>& input,
                         const ConvParam<T>& p) {
  if (input.channels != p.cin) throw ConfigError("conv3d_grad: cached input channel mismatch");
  const auto [oh, ply] = detail::same_pad(input.height, p.stride, p.dilation);
  const auto [ow, plx] = detail::same_pad(input.width, p.stride, p.dilation);
  const auto [od, plz] = detail::same_pad(input.depth, p.stride, p.dilation);
  if (upstream.height != oh || upstream.width != ow || upstream.depth != od ||
      upstream.channels != p.cout)
    throw ConfigError("conv3d_grad: upstream shape does not match cached forward shape");

  const int cin = p.cin, cout = p.cout, s = p.stride, dl = p.dilation;
  const int ih = input.height, iw = input.width, id = input.depth;
  ConvGrads<T> g;
  g.weight.assign(p.weight.size(), T(0));
  g.bias.assign(p.bias.size(), T(0));
  g.input = Tensor4<T>(ih, iw, id, cin);

  // bias: sum of upstream over sites
  {
    std::vector<double> acc(cout, 0.0);
    const T* up = upstream.data.data();
    const std::size_t sites = static_cast<std::size_t>(oh) * ow * od;
    for (std::size_t sidx = 0; sidx < sites; ++sidx)
      for (int co = 0; co < cout; ++co) acc[co] += static_cast<double>(up[sidx * cout + co]);
    for (int co = 0; co < cout; ++co) g.bias[co] = static_cast<T>(acc[co]);
  }

  // weight: chunked over output rows so the parallel reduction has a fixed
  // combination order independent of thread count
  {
    const int nchunks = std::min(8, oh);
    std::vector<std::vector<T>> partial(nchunks);
#pragma omp parallel for schedule(static)
    for (int chunk = 0; chunk < nchunks; ++chunk) {
      std::vector<T>& gw = partial[chunk];
      gw.assign(p.weight.size(), T(0));
      const int y0 = static_cast<int>(static_cast<long>(oh) * chunk / nchunks);
      const int y1 = static_cast<int>(static_cast<long>(oh) * (chunk + 1) / nchunks);
      for (int y = y0; y < y1; ++y)
        for (int x = 0; x < ow; ++x)
          for (int z = 0; z < od; ++z) {
            const int iy0 = y * s - ply, ix0 = x * s - plx, iz0 = z * s - plz;
            const T* __restrict ur =
                &upstream.data[((static_cast<std::size_t>(y) * ow + x) * od + z) * cout];
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = iy0 + ky * dl;
              if (static_cast<unsigned>(iy) >= static_cast<unsigned>(ih)) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ix0 + kx * dl;
                if (static_cast<unsigned>(ix) >= static_cast<unsigned>(iw)) continue;
                for (int kz = 0; kz < 3; ++kz) {
                  const int iz = iz0 + kz * dl;
                  if (static_cast<unsigned>(iz) >= static_cast<unsigned>(id)) continue;
                  const T* __restrict ip =
                      &input.data[((static_cast<std::size_t>(iy) * iw + ix) * id + iz) * cin];
                  T* __restrict wp =
                      gw.data() + static_cast<std::size_t>((ky * 3 + kx) * 3 + kz) * cin * cout;
                  for (int ci = 0; ci < cin; ++ci) {
                    const T a = ip[ci];
                    if (a == T(0)) continue;
                    T* __restrict wr = wp + static_cast<std::size_t>(ci) * cout;
                    for (int co = 0; co < cout; ++co) wr[co] += a * ur[co];
                  }
                }
              }
            }
          }
    }
    for (int chunk = 0; chunk < nchunks; ++chunk)
      for (std::size_t j = 0; j < g.weight.size(); ++j) g.weight[j] += partial[chunk][j];
  }

  // input: gather formulation, each input site written once
  {
    const T* __restrict wall = p.weight.data();
#pragma omp parallel for schedule(static)
    for (int iy = 0; iy < ih; ++iy) {
      std::vector<T> accbuf(cin);
      T* __restrict acc = accbuf.data();
      for (int ix = 0; ix < iw; ++ix)
        for (int iz = 0; iz < id; ++iz) {
          for (int ci = 0; ci < cin; ++ci) acc[ci] = T(0);
          for (int ky = 0; ky < 3; ++ky) {
            const int ty = iy + ply - ky * dl;
            if (ty < 0 || ty % s) continue;
            const int oy = ty / s;
            if (oy >= oh) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int tx = ix + plx - kx * dl;
              if (tx < 0 || tx % s) continue;
              const int ox = tx / s;
              if (ox >= ow) continue;
              for (int kz = 0; kz < 3; ++kz) {
                const int tz = iz + plz - kz * dl;
                if (tz < 0 || tz % s) continue;
                const int oz = tz / s;
                if (oz >= od) continue;
                const T* __restrict ur =
                    &upstream.data[((static_cast<std::size_t>(oy) * ow + ox) * od + oz) * cout];
                const T* __restrict wp =
                    wall + static_cast<std::size_t>((ky * 3 + kx) * 3 + kz) * cin * cout;
                for (int ci = 0; ci < cin; ++ci) {
                  const T* __restrict wr = wp + static_cast<std::size_t>(ci) * cout;
                  T sum = T(0);
                  for (int co = 0; co < cout; ++co) sum += wr[co] * ur[co];
                  acc[ci] += sum;
                }
              }
            }
          }
          T* gp = &g.input.data[((static_cast<std::size_t>(iy) * iw + ix) * id + iz) * cin];
          for (int ci = 0; ci < cin; ++ci) gp[ci] = acc[ci];
        }
    }
  }
  return g;
}

// Normalization over the channel axis per (h, w, d) site, then affine.
template <typename T>
Tensor4<T> layer_norm(const Tensor4<T>& in, const LayerNormParam<T>& p, T eps = T(1e-5)) {
  if (static_cast<int>(p.gain.size()) != in.channels)
    throw ConfigError("layer_norm: parameter size mismatch");
  const int c = in.channels;
  Tensor4<T> out(in.height, in.width, in.depth, c);
  const std::size_t sites = static_cast<std::size_t>(in.height) * in.width * in.depth;
#pragma omp parallel for schedule(static)
  for (long long si = 0; si < static_cast<long long>(sites); ++si) {
    const T* ip = &in.data[static_cast<std::size_t>(si) * c];
    T* op = &out.data[static_cast<std::size_t>(si) * c];
    T mu = T(0);
    for (int i = 0; i < c; ++i) mu += ip[i];
    mu /= c;
    T var = T(0);
    for (int i = 0; i < c; ++i) {
      T d = ip[i] - mu;
      var += d * d;
    }
    var /= c;
    T inv = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i) op[i] = p.gain[i] * ((ip[i] - mu) * inv) + p.offset[i];
  }
  return out;
}

template <typename T>
struct LayerNormGrads {
  Tensor4<T> input;
  std::vector<T> gain, offset;
};

template <typename T>
LayerNormGrads<T> layer_norm_grad(const Tensor4<T>& upstream, const Tensor4<T>& in,
                                  const LayerNormParam<T>& p, T eps = T(1e-5)) {
  if (!upstream.same_shape(in)) throw ConfigError("layer_norm_grad: shape mismatch");
  const int c = in.channels;
  LayerNormGrads<T> g;
  g.input = Tensor4<T>(in.height, in.width, in.depth, c);
  g.gain.assign(c, T(0));
  g.offset.assign(c, T(0));
  const std::size_t sites = static_cast<std::size_t>(in.height) * in.width * in.depth;
  std::vector<double> gacc(c, 0.0), oacc(c, 0.0);
  for (std::size_t si = 0; si < sites; ++si) {
    const T* ip = &in.data[si * c];
    const T* up = &upstream.data[si * c];
    T* gp = &g.input.data[si * c];
    T mu = T(0);
    for (int i = 0; i < c; ++i) mu += ip[i];
    mu /= c;
    T var = T(0);
    for (int i = 0; i < c; ++i) {
      T d = ip[i] - mu;
      var += d * d;
    }
    var /= c;
    T inv = T(1) / std::sqrt(var + eps);
    // dxhat, and the two reductions over channels
    T sum_d = T(0), sum_dx = T(0);
    for (int i = 0; i < c; ++i) {
      T xhat = (ip[i] - mu) * inv;
      T d = up[i] * p.gain[i];
      sum_d += d;
      sum_dx += d * xhat;
      gacc[i] += static_cast<double>(up[i]) * xhat;
      oacc[i] += static_cast<double>(up[i]);
    }
    for (int i = 0; i < c; ++i) {
      T xhat = (ip[i] - mu) * inv;
      T d = up[i] * p.gain[i];
      gp[i] = inv * (d - sum_d / c - xhat * sum_dx / c);
    }
  }
  for (int i = 0; i < c; ++i) {
    g.gain[i] = static_cast<T>(gacc[i]);
    g.offset[i] = static_cast<T>(oacc[i]);
  }
  return g;
}

template <typename T>
Tensor4<T> relu(const Tensor4<T>& in) {
  Tensor4<T> out = in;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return out;
}

// Mask from the forward output: relu(x) > 0 iff x > 0.
template <typename T>
Tensor4<T> relu_grad(const Tensor4<T>& upstream, const Tensor4<T>& out) {
  if (!upstream.same_shape(out)) throw ConfigError("relu_grad: shape mismatch");
  Tensor4<T> g = upstream;
  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (!(out.data[i] > T(0))) g.data[i] = T(0);
  return g;
}

// 2x nearest-neighbor upsampling of H, W and D.
template <typename T>
Tensor4<T> nn_upsample(const Tensor4<T>& in) {
  Tensor4<T> out(in.height * 2, in.width * 2, in.depth * 2, in.channels);
  const int c = in.channels;
#pragma omp parallel for schedule(static)
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int z = 0; z < out.depth; ++z) {
        const T* ip = &in.data[((static_cast<std::size_t>(y / 2) * in.width + x / 2) * in.depth +
                                z / 2) * c];
        T* op = &out.data[((static_cast<std::size_t>(y) * out.width + x) * out.depth + z) * c];
        for (int i = 0; i < c; ++i) op[i] = ip[i];
      }
  return out;
}

template <typename T>
Tensor4<T> nn_upsample_grad(const Tensor4<T>& upstream, int in_h, int in_w, int in_d) {
  if (upstream.height != 2 * in_h || upstream.width != 2 * in_w || upstream.depth != 2 * in_d)
    throw ConfigError("nn_upsample_grad: upstream shape mismatch");
  const int c = upstream.channels;
  Tensor4<T> g(in_h, in_w, in_d, c, T(0));
  for (int y = 0; y < upstream.height; ++y)
    for (int x = 0; x < upstream.width; ++x)
      for (int z = 0; z < upstream.depth; ++z) {
        const T* up = &upstream.data[((static_cast<std::size_t>(y) * upstream.width + x) *
                                          upstream.depth + z) * c];
        T* gp = &g.data[((static_cast<std::size_t>(y / 2) * in_w + x / 2) * in_d + z / 2) * c];
        for (int i = 0; i < c; ++i) gp[i] += up[i];
      }
  return g;
}

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.height != b.height || a.width != b.width || a.depth != b.depth)
    throw ConfigError("concat_channels: spatial/depth dims disagree");
  Tensor4<T> out(a.height, a.width, a.depth, a.channels + b.channels);
  const std::size_t sites = static_cast<std::size_t>(a.height) * a.width * a.depth;
  for (std::size_t si = 0; si < sites; ++si) {
    std::memcpy(&out.data[si * out.channels], &a.data[si * a.channels],
                sizeof(T) * a.channels);
    std::memcpy(&out.data[si * out.channels + a.channels], &b.data[si * b.channels],
                sizeof(T) * b.channels);
  }
  return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& in, int ca) {
  Tensor4<T> a(in.height, in.width, in.depth, ca);
  Tensor4<T> b(in.height, in.width, in.depth, in.channels - ca);
  const std::size_t sites = static_cast<std::size_t>(in.height) * in.width * in.depth;
  for (std::size_t si = 0; si < sites; ++si) {
    std::memcpy(&a.data[si * a.channels], &in.data[si * in.channels], sizeof(T) * a.channels);
    std::memcpy(&b.data[si * b.channels], &in.data[si * in.channels + ca],
                sizeof(T) * b.channels);
  }
  return {std::move(a), std::move(b)};
}

struct LayerShape {
  std::string name;
  int depth_in = 0;
  int depth_out = 0;
};

template <typename T>
struct ForwardCache {
  Tensor4<T> input;                                  // the stack tensor
  std::array<Tensor4<T>, kNumConvs> conv_out;        // raw conv outputs (layer-norm inputs)
  std::array<Tensor4<T>, kNumConvs> act;             // block outputs (post LN+ReLU; raw for conv7_3)
  std::array<Tensor4<T>, 3> up_in;                   // upsampled concats feeding conv5_1/6_1/7_1
  bool valid = false;
};

namespace detail {

template <typename T>
const Tensor4<T>& conv_input(const ForwardCache<T>& c, int i) {
  if (i == 0) return c.input;
  if (i == 10) return c.up_in[0];
  if (i == 13) return c.up_in[1];
  if (i == 15) return c.up_in[2];
  return c.act[i - 1];
}

}  // namespace detail

// Runs the canonical graph on a [H, W, 24, C] tensor. H and W must be
// divisible by 8 (three stride-2 stages). Per-layer depth in/out pairs are
// reported through `shapes` when non-null.
template <typename T>
LogitVolume<T> net_forward(const Tensor4<T>& stack, const NetParams<T>& params,
                           ForwardCache<T>* cache = nullptr,
                           std::vector<LayerShape>* shapes = nullptr) {
  if (stack.depth != 24)
    throw ConfigError("net_forward: stack depth must be 24, got " + std::to_string(stack.depth));
  if (stack.height % 8 != 0 || stack.width % 8 != 0)
    throw ConfigError("net_forward: H and W must be divisible by 8 (got " +
                      std::to_string(stack.height) + "x" + std::to_string(stack.width) +
                      "); crop or pad to a multiple of 8");
  if (stack.channels != params.in_channels)
    throw ConfigError("net_forward: stack has " + std::to_string(stack.channels) +
                      " channels, params expect " + std::to_string(params.in_channels));

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.input = stack;

  auto block = [&](int i, const Tensor4<T>& in) {
    Tensor4<T> conv = conv3d(in, params.conv[i]);
    if (shapes) shapes->push_back({kNetConvs[i].name, in.depth, conv.depth});
    if (i < kNumLayerNorms) {
      c.conv_out[i] = std::move(conv);
      c.act[i] = relu(layer_norm(c.conv_out[i], params.ln[i]));
    } else {
      c.act[i] = std::move(conv);  // conv7_3 is linear
    }
  };

  block(0, c.input);
  for (int i = 1; i <= 9; ++i) block(i, c.act[i - 1]);

  c.up_in[0] = nn_upsample(concat_channels(c.act[6], c.act[9]));
  if (shapes) shapes->push_back({"nnup_5", c.act[9].depth, c.up_in[0].depth});
  block(10, c.up_in[0]);
  block(11, c.act[10]);
  block(12, c.act[11]);

  c.up_in[1] = nn_upsample(concat_channels(c.act[3], c.act[12]));
  if (shapes) shapes->push_back({"nnup_6", c.act[12].depth, c.up_in[1].depth});
  block(13, c.up_in[1]);
  block(14, c.act[13]);

  c.up_in[2] = nn_upsample(concat_channels(c.act[1], c.act[14]));
  if (shapes) shapes->push_back({"nnup_7", c.act[14].depth, c.up_in[2].depth});
  block(15, c.up_in[2]);
  block(16, c.act[15]);
  block(17, c.act[16]);

  c.valid = true;
  const Tensor4<T>& final_out = c.act[17];
  LogitVolume<T> logits(final_out.height, final_out.width, final_out.depth);
  for (std::size_t i = 0; i < logits.values.size(); ++i) logits.values[i] = final_out.data[i];
  return logits;
}

// Reverse-mode pass; returns parameter gradients shaped like NetParams.
template <typename T>
NetParams<T> net_backward(const LogitVolume<T>& logit_grad, const ForwardCache<T>& cache,
                          const NetParams<T>& params) {
  if (!cache.valid) throw ConfigError("net_backward: missing forward cache");
  NetParams<T> grads = NetParams<T>::make(params.in_channels);

  // block backward: gradient wrt block output -> gradient wrt block input
  auto block_back = [&](int i, const Tensor4<T>& gout) {
    Tensor4<T> gconv;
    if (i < kNumLayerNorms) {
      Tensor4<T> gl = relu_grad(gout, cache.act[i]);
      LayerNormGrads<T> lng = layer_norm_grad(gl, cache.conv_out[i], params.ln[i]);
      grads.ln[i].gain = std::move(lng.gain);
      grads.ln[i].offset = std::move(lng.offset);
      gconv = std::move(lng.input);
    } else {
      gconv = gout;
    }
    ConvGrads<T> cg = conv3d_grad(gconv, detail::conv_input(cache, i), params.conv[i]);
    grads.conv[i].weight = std::move(cg.weight);
    grads.conv[i].bias = std::move(cg.bias);
    return std::move(cg.input);
  };

  const Tensor4<T>& a17 = cache.act[17];
  Tensor4<T> g(a17.height, a17.width, a17.depth, 1);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = logit_grad.values[i];

  g = block_back(17, g);
  g = block_back(16, g);
  Tensor4<T> g_up2 = block_back(15, g);
  auto [g_a1_skip, g_a14] =
      split_channels(nn_upsample_grad(g_up2, cache.act[1].height, cache.act[1].width,
                                      cache.act[1].depth),
                     cache.act[1].channels);

  g = block_back(14, g_a14);
  Tensor4<T> g_up1 = block_back(13, g);
  auto [g_a3_skip, g_a12] =
      split_channels(nn_upsample_grad(g_up1, cache.act[3].height, cache.act[3].width,
                                      cache.act[3].depth),
                     cache.act[3].channels);

  g = block_back(12, g_a12);
  g = block_back(11, g);
  Tensor4<T> g_up0 = block_back(10, g);
  auto [g_a6_skip, g_a9] =
      split_channels(nn_upsample_grad(g_up0, cache.act[6].height, cache.act[6].width,
                                      cache.act[6].depth),
                     cache.act[6].channels);

  g = block_back(9, g_a9);
  g = block_back(8, g);
  Tensor4<T> g_a6 = block_back(7, g);
  for (std::size_t i = 0; i < g_a6.data.size(); ++i) g_a6.data[i] += g_a6_skip.data[i];

  g = block_back(6, g_a6);
  g = block_back(5, g);
  Tensor4<T> g_a3 = block_back(4, g);
  for (std::size_t i = 0; i < g_a3.data.size(); ++i) g_a3.data[i] += g_a3_skip.data[i];

  g = block_back(3, g_a3);
  Tensor4<T> g_a1 = block_back(2, g);
  for (std::size_t i = 0; i < g_a1.data.size(); ++i) g_a1.data[i] += g_a1_skip.data[i];

  g = block_back(1, g_a1);
  block_back(0, g);
  return grads;
}

// Convenience overload for stacks.
template <typename T>
LogitVolume<T> net_forward(const HypothesisStack& stack, const NetParams<T>& params,
                           ForwardCache<T>* cache = nullptr,
                           std::vector<LayerShape>* shapes = nullptr) {
  if constexpr (std::is_same_v<T, float>) {
    return net_forward(stack.data, params, cache, shapes);
  } else {
    Tensor4<T> cast = stack.data.template cast<T>();
    return net_forward(cast, params, cache, shapes);
  }
}

template <typename T>
void sgd_update(std::vector<T>& p, const std::vector<T>& g, T lr) {
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

// p <- p - lr * g. Non-finite gradients abort training.
template <typename T>
void sgd_step(NetParams<T>& params, const NetParams<T>& grads, T lr) {
  if (!(lr > T(0))) throw ConfigError("sgd_step: learning rate must be positive");
  for (int i = 0; i < kNumConvs; ++i) {
    if (!all_finite(grads.conv[i].weight) || !all_finite(grads.conv[i].bias))
      throw NumericError(std::string("sgd_step: non-finite gradient in ") + kNetConvs[i].name +
                         "; aborting training");
    if (i < kNumLayerNorms &&
        (!all_finite(grads.ln[i].gain) || !all_finite(grads.ln[i].offset)))
      throw NumericError(std::string("sgd_step: non-finite layer-norm gradient in ") +
                         kNetConvs[i].name + "; aborting training");
  }
  for (int i = 0; i < kNumConvs; ++i) {
    sgd_update(params.conv[i].weight, grads.conv[i].weight, lr);
    sgd_update(params.conv[i].bias, grads.conv[i].bias, lr);
    if (i < kNumLayerNorms) {
      sgd_update(params.ln[i].gain, grads.ln[i].gain, lr);
      sgd_update(params.ln[i].offset, grads.ln[i].offset, lr);
    }
  }
}

// ---- checkpoint: "NET3", u32 version, u32 entry count, then per entry
//      name (u32 len + bytes), shape (u32 ndim + u32 dims), f32 payload ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  const std::vector<float>* payload;  // save side
  std::vector<float>* target;         // load side
};

inline std::vector<CheckpointEntry> checkpoint_layout(NetParams<float>& p) {
  std::vector<CheckpointEntry> entries;
  for (int i = 0; i < kNumConvs; ++i) {
    std::string base = kNetConvs[i].name;
    entries.push_back({base + ".weight",
                       {3, 3, 3, static_cast<std::uint32_t>(p.conv[i].cin),
                        static_cast<std::uint32_t>(p.conv[i].cout)},
                       &p.conv[i].weight, &p.conv[i].weight});
    entries.push_back({base + ".bias", {static_cast<std::uint32_t>(p.conv[i].cout)},
                       &p.conv[i].bias, &p.conv[i].bias});
    if (i < kNumLayerNorms) {
      entries.push_back({base + ".ln_gain", {static_cast<std::uint32_t>(p.conv[i].cout)},
                         &p.ln[i].gain, &p.ln[i].gain});
      entries.push_back({base + ".ln_offset", {static_cast<std::uint32_t>(p.conv[i].cout)},
                         &p.ln[i].offset, &p.ln[i].offset});
    }
  }
  return entries;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& p, const NetParams<float>& params) {
  auto os = detail::open_out(p);
  os.write("NET3", 4);
  detail::write_u32_le(os, kCheckpointVersion);
  NetParams<float>& mut = const_cast<NetParams<float>&>(params);
  auto entries = detail::checkpoint_layout(mut);
  detail::write_u32_le(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::write_u32_le(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_u32_le(os, static_cast<std::uint32_t>(e.dims.size()));
    std::size_t count = 1;
    for (auto d : e.dims) {
      detail::write_u32_le(os, d);
      count *= d;
    }
    if (count != e.payload->size()) throw ConfigError("save_checkpoint: shape/payload mismatch");
    for (float v : *e.payload) detail::write_f32_le(os, v);
  }
  if (!os) throw DataError("write failed: " + p.string());
}

inline NetParams<float> load_checkpoint(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  detail::expect_magic(is, "NET3", "load_checkpoint");
  std::uint32_t version = detail::read_u32_le(is);
  if (version != kCheckpointVersion)
    throw DataError("load_checkpoint: version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  std::uint32_t count = detail::read_u32_le(is);

  // peek the first entry to learn the input channel count
  auto read_name = [&]() {
    std::uint32_t len = detail::read_u32_le(is);
    if (len > 256) throw DataError("load_checkpoint: implausible name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw DataError("load_checkpoint: truncated");
    return name;
  };
  auto read_dims = [&]() {
    std::uint32_t ndim = detail::read_u32_le(is);
    if (ndim > 8) throw DataError("load_checkpoint: implausible rank");
    std::vector<std::uint32_t> dims(ndim);
    for (auto& d : dims) d = detail::read_u32_le(is);
    return dims;
  };

  std::string first_name = read_name();
  auto first_dims = read_dims();
  if (first_name != "conv1_1.weight" || first_dims.size() != 5)
    throw DataError("load_checkpoint: unexpected leading entry '" + first_name + "'");
  int in_channels = static_cast<int>(first_dims[3]);
  if (in_channels < 1 || in_channels > 64)
    throw DataError("load_checkpoint: implausible input channel count");

  NetParams<float> params = NetParams<float>::make(in_channels);
  auto entries = detail::checkpoint_layout(params);
  if (count != entries.size())
    throw DataError("load_checkpoint: entry count " + std::to_string(count) + ", expected " +
                    std::to_string(entries.size()));

  for (std::size_t e = 0; e < entries.size(); ++e) {
    std::string name = e == 0 ? first_name : read_name();
    auto dims = e == 0 ? first_dims : read_dims();
    if (name != entries[e].name)
      throw DataError("load_checkpoint: entry '" + name + "', expected '" + entries[e].name + "'");
    if (dims != entries[e].dims)
      throw DataError("load_checkpoint: shape mismatch for '" + name + "'");
    for (auto& v : *entries[e].target) v = detail::read_f32_le(is);
  }
  return params;
}

}  // namespace defocus
