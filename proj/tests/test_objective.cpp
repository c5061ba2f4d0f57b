#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "defocus/objective.hpp"
#include "defocus/optics.hpp"

using namespace defocus;

namespace {

const std::filesystem::path kMaskA =
    std::filesystem::path(DEFOCUS_DATA_DIR) / "masks/asym_a.pgm";

LogitVolume<double> random_logits(int h, int w, int d, std::uint64_t seed, double scale = 1.0) {
  LogitVolume<double> l(h, w, d);
  Rng rng(seed);
  for (auto& v : l.values) v = scale * rng.uniform(-1.0, 1.0);
  return l;
}

Image<int> random_gt(int h, int w, int d, std::uint64_t seed) {
  Image<int> gt(h, w, 1);
  Rng rng(seed);
  for (auto& v : gt.data) v = static_cast<int>(rng.uniform_int(0, d - 1));
  return gt;
}

HypothesisStack small_stack(std::uint64_t seed) {
  auto mask = load_aperture_mask(kMaskA);
  auto bank = build_kernel_bank(mask, 3);
  Scene s = synth_scene(seed, 16, 16);
  return build_stack(s.image, bank, DeblurAlgo::wiener);
}

LogitVolume<double> permute_depth(const LogitVolume<double>& l, const DepthPermutation& perm) {
  LogitVolume<double> out(l.height, l.width, l.depth);
  for (int y = 0; y < l.height; ++y)
    for (int x = 0; x < l.width; ++x)
      for (int k = 0; k < l.depth; ++k) out.at(y, x, perm.perm[k]) = l.at(y, x, k);
  return out;
}

double rel_err(double got, double want) {
  double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

}  // namespace

TEST_CASE("depth permutation basics", "[objective]") {
  auto p = DepthPermutation::random(5);
  REQUIRE(p.valid());
  auto inv = p.inverse();
  for (int i = 0; i < 24; ++i) REQUIRE(inv.perm[p.perm[i]] == i);
  REQUIRE(DepthPermutation::random(5).perm == p.perm);
  REQUIRE(DepthPermutation::random(6).perm != p.perm);
}

TEST_CASE("random_shuffle moves slices, labels and gt together", "[objective]") {
  auto stack = small_stack(3);
  Image<int> gt = random_gt(16, 16, stack.n + 1, 4);

  SECTION("identity permutation changes nothing") {
    auto [s2, g2] = random_shuffle(stack, gt, DepthPermutation::identity());
    REQUIRE(s2.data.data == stack.data.data);
    REQUIRE(s2.slice_labels == stack.slice_labels);
    REQUIRE(g2.data == gt.data);
  }
  SECTION("shuffle then inverse shuffle is the identity") {
    auto perm = DepthPermutation::random(7);
    auto [s2, g2] = random_shuffle(stack, gt, perm);
    auto [s3, g3] = random_shuffle(s2, g2, perm.inverse());
    REQUIRE(s3.data.data == stack.data.data);
    REQUIRE(s3.slice_labels == stack.slice_labels);
    REQUIRE(g3.data == gt.data);
  }
  SECTION("a 0<->5 swap rewrites gt pixels accordingly (2x2 toy)") {
    DepthPermutation swap = DepthPermutation::identity();
    std::swap(swap.perm[0], swap.perm[5]);
    HypothesisStack toy = stack;  // content irrelevant for the gt mapping
    Image<int> toy_gt(2, 2, 1);
    toy_gt.at(0, 0) = 0;
    toy_gt.at(0, 1) = 5;
    toy_gt.at(1, 0) = 2;
    toy_gt.at(1, 1) = 0;
    // shrink stack to 2x2 spatially for the toy
    HypothesisStack small;
    small.n = toy.n;
    small.slice_labels = toy.slice_labels;
    small.data = Tensor4<float>(2, 2, 24, 1, 0.0f);
    auto [s2, g2] = random_shuffle(small, toy_gt, swap);
    REQUIRE(g2.at(0, 0) == 5);
    REQUIRE(g2.at(0, 1) == 0);
    REQUIRE(g2.at(1, 0) == 2);
    REQUIRE(g2.at(1, 1) == 5);
  }
  SECTION("slices relocate: data[k] comes from perm^-1(k)") {
    auto perm = DepthPermutation::random(8);
    auto [s2, g2] = random_shuffle(stack, gt, perm);
    auto inv = perm.inverse();
    for (int k = 0; k < 24; ++k) {
      REQUIRE(s2.slice_labels[k] == stack.slice_labels[inv.perm[k]]);
      REQUIRE(s2.data.at(3, 5, k, 0) == stack.data.at(3, 5, inv.perm[k], 0));
    }
  }
}

TEST_CASE("cross entropy values", "[objective]") {
  SECTION("saturated correct prediction has ~zero loss") {
    LogitVolume<double> l(4, 4, 24, 0.0);
    Image<int> gt(4, 4, 1, 7);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) l.at(y, x, 7) = 50.0;
    auto ce = cross_entropy(l, gt);
    REQUIRE(ce.value <= 1e-8);
  }
  SECTION("uniform logits give ln(24)") {
    LogitVolume<double> l(4, 4, 24, 0.37);
    Image<int> gt = random_gt(4, 4, 24, 9);
    auto ce = cross_entropy(l, gt);
    REQUIRE(ce.value == Catch::Approx(std::log(24.0)).epsilon(1e-12));
  }
  SECTION("out-of-range gt is rejected") {
    LogitVolume<double> l(2, 2, 8, 0.0);
    Image<int> gt(2, 2, 1, 8);
    REQUIRE_THROWS_AS(cross_entropy(l, gt), ConfigError);
  }
  SECTION("gradient matches finite differences") {
    auto l = random_logits(3, 3, 8, 10);
    auto gt = random_gt(3, 3, 8, 11);
    auto ce = cross_entropy(l, gt);
    const double h = 1e-6;
    Rng pick(12);
    for (int trial = 0; trial < 20; ++trial) {
      std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, l.values.size() - 1));
      auto lp = l, lm = l;
      lp.values[i] += h;
      lm.values[i] -= h;
      double fd = (cross_entropy(lp, gt).value - cross_entropy(lm, gt).value) / (2 * h);
      REQUIRE(rel_err(ce.grad.values[i], fd) < 1e-6);
    }
  }
  SECTION("exactly permutation-equivariant") {
    auto l = random_logits(4, 4, 24, 13);
    auto gt = random_gt(4, 4, 24, 14);
    double base = cross_entropy(l, gt).value;
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto perm = DepthPermutation::random(20 + s);
      auto lp = permute_depth(l, perm);
      Image<int> gp(4, 4, 1);
      for (std::size_t i = 0; i < gp.data.size(); ++i) gp.data[i] = perm.perm[gt.data[i]];
      REQUIRE(cross_entropy(lp, gp).value == base);
    }
  }
}

TEST_CASE("gumbel soft index", "[objective]") {
  SECTION("noise-free low temperature approaches the argmax") {
    LogitVolume<double> l(2, 2, 24, 0.0);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) l.at(y, x, 13) = 4.0;
    auto soft = gumbel_soft_index(l, 0.01, std::nullopt);
    for (auto v : soft.index.data) REQUIRE(v == Catch::Approx(13.0).margin(1e-6));
  }
  SECTION("uniform logits give the midpoint 11.5") {
    LogitVolume<double> l(3, 3, 24, 1.25);
    auto soft = gumbel_soft_index(l, 0.5, std::nullopt);
    for (auto v : soft.index.data) REQUIRE(v == Catch::Approx(11.5).epsilon(1e-12));
  }
  SECTION("index stays in [0, 23] and is invariant to constant shifts") {
    auto l = random_logits(4, 4, 24, 15, 3.0);
    auto soft = gumbel_soft_index(l, 0.5, std::nullopt);
    for (auto v : soft.index.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 23.0);
    }
    auto shifted = l;
    for (auto& v : shifted.values) v += 8.0;
    auto soft2 = gumbel_soft_index(shifted, 0.5, std::nullopt);
    for (std::size_t i = 0; i < soft.index.data.size(); ++i)
      REQUIRE(soft2.index.data[i] == Catch::Approx(soft.index.data[i]).margin(1e-12));
  }
  SECTION("noisy mode is deterministic per seed") {
    auto l = random_logits(4, 4, 24, 16);
    auto a = gumbel_soft_index(l, 0.5, std::uint64_t{42});
    auto b = gumbel_soft_index(l, 0.5, std::uint64_t{42});
    auto c = gumbel_soft_index(l, 0.5, std::uint64_t{43});
    REQUIRE(a.index.data == b.index.data);
    REQUIRE(a.index.data != c.index.data);
  }
  SECTION("non-positive temperature is rejected") {
    auto l = random_logits(2, 2, 8, 17);
    REQUIRE_THROWS_AS(gumbel_soft_index(l, 0.0, std::nullopt), ConfigError);
  }
  SECTION("gradient matches finite differences (noise-free)") {
    auto l = random_logits(3, 3, 8, 18);
    auto soft = gumbel_soft_index(l, 0.5, std::nullopt);
    Image<double> up(3, 3, 1);
    Rng rng(19);
    for (auto& v : up.data) v = rng.uniform(-1.0, 1.0);
    auto grad = soft_index_backward(soft, up);
    auto value = [&](const LogitVolume<double>& lv) {
      auto s = gumbel_soft_index(lv, 0.5, std::nullopt);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.index.data.size(); ++i) acc += up.data[i] * s.index.data[i];
      return acc;
    };
    const double h = 1e-6;
    Rng pick(20);
    for (int trial = 0; trial < 20; ++trial) {
      std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, l.values.size() - 1));
      auto lp = l, lm = l;
      lp.values[i] += h;
      lm.values[i] -= h;
      double fd = (value(lp) - value(lm)) / (2 * h);
      REQUIRE(rel_err(grad.values[i], fd) < 1e-6);
    }
  }
}

TEST_CASE("smoothness loss", "[objective]") {
  SECTION("constant map has zero loss") {
    Image<double> m(5, 7, 1, 3.3);
    auto s = smoothness_loss(m);
    REQUIRE(s.value == 0.0);
    for (auto v : s.grad.data) REQUIRE(v == 0.0);
  }
  SECTION("hand-evaluated 2x2 example gives 0.5") {
    Image<double> m(2, 2, 1);
    m.at(0, 0) = 0.0;
    m.at(0, 1) = 1.0;
    m.at(1, 0) = 0.0;
    m.at(1, 1) = 1.0;
    REQUIRE(smoothness_loss(m).value == Catch::Approx(0.5));
  }
  SECTION("non-negative, zero iff constant") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      Image<double> m(4, 4, 1);
      for (auto& v : m.data) v = rng.uniform(0.0, 23.0);
      auto s = smoothness_loss(m);
      REQUIRE(s.value > 0.0);
    }
  }
  SECTION("gradient matches finite differences at subgradient-safe points") {
    Image<double> m(4, 5, 1);
    Rng rng(22);
    for (auto& v : m.data) v = rng.uniform(0.0, 10.0);  // distinct values, |.| smooth here
    auto s = smoothness_loss(m);
    const double h = 1e-7;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      auto mp = m, mm = m;
      mp.data[i] += h;
      mm.data[i] -= h;
      double fd = (smoothness_loss(mp).value - smoothness_loss(mm).value) / (2 * h);
      REQUIRE(rel_err(s.grad.data[i], fd) < 1e-6);
    }
  }
  SECTION("too-small maps are rejected") {
    Image<double> m(1, 5, 1, 0.0);
    REQUIRE_THROWS_AS(smoothness_loss(m), ConfigError);
  }
}

TEST_CASE("total loss", "[objective]") {
  auto l = random_logits(8, 8, 24, 23, 2.0);
  auto gt = random_gt(8, 8, 24, 24);

  SECTION("lambda 0 reduces to cross entropy") {
    auto t = total_loss(l, gt, 0.5, 0.0, std::nullopt);
    auto ce = cross_entropy(l, gt);
    REQUIRE(t.report.total == ce.value);
    REQUIRE(t.report.ce == ce.value);
  }
  SECTION("report decomposes exactly") {
    auto t = total_loss(l, gt, 0.5, 0.1, std::uint64_t{31});
    REQUIRE(t.report.total == t.report.ce + 0.1 * t.report.smooth);
    REQUIRE(t.report.ce >= 0.0);
    REQUIRE(t.report.smooth >= 0.0);
  }
  SECTION("composite gradcheck, noise-free, [8,8,24]") {
    auto t = total_loss(l, gt, 0.5, 0.1, std::nullopt);
    auto value = [&](const LogitVolume<double>& lv) {
      return total_loss(lv, gt, 0.5, 0.1, std::nullopt).report.total;
    };
    const double h = 1e-5;
    Rng pick(32);
    double worst = 0.0;
    for (int trial = 0; trial < 24; ++trial) {
      std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, l.values.size() - 1));
      auto lp = l, lm = l;
      lp.values[i] += h;
      lm.values[i] -= h;
      double fd = (value(lp) - value(lm)) / (2 * h);
      worst = std::max(worst, rel_err(t.grad.values[i], fd));
    }
    REQUIRE(worst < 1e-4);
  }
}
