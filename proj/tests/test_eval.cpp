#include <catch2/catch_amalgamated.hpp>

#include "defocus/eval.hpp"
#include "defocus/objective.hpp"

using namespace defocus;

namespace {

// slice label layout for max_blur m in canonical order, dI slice after the
// deblurred ones, padding to 24
std::array<std::int8_t, 24> labels_for(int m) {
  std::array<std::int8_t, 24> sl;
  sl.fill(HypothesisStack::kPadSlice);
  int k = 0;
  for (int l = -m; l <= -2; ++l) sl[k++] = static_cast<std::int8_t>(l);
  for (int l = 2; l <= m; ++l) sl[k++] = static_cast<std::int8_t>(l);
  sl[k] = HypothesisStack::kDiSlice;
  return sl;
}

}  // namespace

TEST_CASE("decode basics", "[eval]") {
  auto sl = labels_for(7);  // n = 12, dI at 12

  SECTION("one-hot logits recover the labels everywhere") {
    LogitVolume<float> l(3, 3, 24, 0.0f);
    Image<std::int8_t> want(3, 3, 1);
    std::int8_t plan[] = {-7, -2, 0, 2, 7, 3, -4, 0, 5};
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        std::int8_t lab = plan[y * 3 + x];
        want.at(y, x) = lab;
        int slice = -1;
        for (int k = 0; k < 24; ++k) {
          if (lab == 0 && sl[k] == HypothesisStack::kDiSlice) slice = k;
          if (lab != 0 && sl[k] == lab) slice = k;
        }
        l.at(y, x, slice) = 10.0f;
      }
    auto pred = decode(l, sl);
    REQUIRE(pred.data == want.data);
  }
  SECTION("padding slices are excluded from the argmax") {
    LogitVolume<float> l(1, 1, 24, 0.0f);
    l.at(0, 0, 20) = 100.0f;  // padding position
    l.at(0, 0, 3) = 1.0f;     // best valid: label -4
    auto pred = decode(l, sl);
    REQUIRE(pred.at(0, 0) == -4);
  }
  SECTION("ties break toward the lowest depth index") {
    LogitVolume<float> l(1, 1, 24, 0.0f);
    l.at(0, 0, 3) = 5.0f;
    l.at(0, 0, 7) = 5.0f;
    auto pred = decode(l, sl);
    REQUIRE(pred.at(0, 0) == sl[3]);
  }
  SECTION("never emits a padding sentinel") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      LogitVolume<float> l(2, 2, 24);
      for (auto& v : l.values) v = static_cast<float>(rng.uniform(-5.0, 5.0));
      auto pred = decode(l, sl);
      for (auto p : pred.data) {
        REQUIRE(p != HypothesisStack::kPadSlice);
        REQUIRE((p == 0 || (std::abs(p) >= 2 && std::abs(p) <= 7)));
      }
    }
  }
  SECTION("decoding commutes with depth shuffles (tie-free logits)") {
    Rng rng(5);
    LogitVolume<float> l(4, 4, 24);
    for (auto& v : l.values) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    auto base = decode(l, sl);
    for (std::uint64_t s = 0; s < 6; ++s) {
      auto perm = DepthPermutation::random(100 + s);
      LogitVolume<float> lp(4, 4, 24);
      std::array<std::int8_t, 24> slp;
      for (int k = 0; k < 24; ++k) slp[perm.perm[k]] = sl[k];
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          for (int k = 0; k < 24; ++k) lp.at(y, x, perm.perm[k]) = l.at(y, x, k);
      auto pred = decode(lp, slp);
      REQUIRE(pred.data == base.data);
    }
  }
}

TEST_CASE("metrics N-1 and N-3", "[eval]") {
  auto order = canonical_label_order(7);

  SECTION("the +3 predicted as +2 example: N-3 yes, N-1 no") {
    Image<std::int8_t> gt(1, 1, 1, 3);
    Image<std::int8_t> pred(1, 1, 1, 2);
    auto r = metrics(pred, gt, order);
    REQUIRE(r.n1 == 0.0);
    REQUIRE(r.n3 == 100.0);
  }
  SECTION("perfect prediction is 100/100") {
    Image<std::int8_t> gt(4, 4, 1, -5);
    auto r = metrics(gt, gt, order);
    REQUIRE(r.n1 == 100.0);
    REQUIRE(r.n3 == 100.0);
  }
  SECTION("+2 predicted as -2 is wrong in both (not adjacent)") {
    Image<std::int8_t> gt(1, 1, 1, 2);
    Image<std::int8_t> pred(1, 1, 1, -2);
    auto r = metrics(pred, gt, order);
    REQUIRE(r.n1 == 0.0);
    REQUIRE(r.n3 == 0.0);
  }
  SECTION("0's neighbors are -2 and +2") {
    Image<std::int8_t> gt(1, 1, 1, 0);
    for (std::int8_t p : {-2, 2}) {
      Image<std::int8_t> pred(1, 1, 1, p);
      REQUIRE(metrics(pred, gt, order).n3 == 100.0);
    }
    Image<std::int8_t> pred3(1, 1, 1, 3);
    REQUIRE(metrics(pred3, gt, order).n3 == 0.0);
  }
  SECTION("labels outside the set are rejected") {
    Image<std::int8_t> gt(1, 1, 1, 1);  // 1 is not a label
    Image<std::int8_t> pred(1, 1, 1, 0);
    REQUIRE_THROWS_AS(metrics(pred, gt, order), ConfigError);
    REQUIRE_THROWS_AS(metrics(gt, pred, order), ConfigError);
  }
  SECTION("N-3 >= N-1 over random pairs, confusion counts total") {
    Rng rng(6);
    std::vector<int> set = order;
    for (int trial = 0; trial < 200; ++trial) {
      Image<std::int8_t> gt(5, 5, 1), pred(5, 5, 1);
      for (auto& v : gt.data)
        v = static_cast<std::int8_t>(set[static_cast<std::size_t>(rng.uniform_int(0, set.size() - 1))]);
      for (auto& v : pred.data)
        v = static_cast<std::int8_t>(set[static_cast<std::size_t>(rng.uniform_int(0, set.size() - 1))]);
      auto r = metrics(pred, gt, order);
      REQUIRE(r.n3 >= r.n1);
      long total = 0;
      for (auto& [k, c] : r.confusion) total += c;
      REQUIRE(total == 25);
    }
  }
}

TEST_CASE("crop_border", "[eval]") {
  Image<std::int8_t> img(10, 12, 1);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x) img.at(y, x) = static_cast<std::int8_t>(y * 12 + x);
  auto c = crop_border(img, 3);
  REQUIRE(c.height == 4);
  REQUIRE(c.width == 6);
  REQUIRE(c.at(0, 0) == img.at(3, 3));
  REQUIRE_THROWS_AS(crop_border(img, 5), ConfigError);
}

TEST_CASE("blur map rendering", "[eval]") {
  SECTION("all-zero labels give one uniform center color") {
    Image<std::int8_t> labels(6, 8, 1, 0);
    auto img = render_blur_map(labels, 4);
    REQUIRE(img.channels == 3);
    REQUIRE(img.height == 6 + 8);  // legend strip appended
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 3; ++c) REQUIRE(img.at(y, x, c) == img.at(0, 0, c));
  }
  SECTION("extreme labels map to colormap extremes") {
    Image<std::int8_t> neg(2, 2, 1, -4), pos(2, 2, 1, 4), zero(2, 2, 1, 0);
    auto in = render_blur_map(neg, 4);
    auto ip = render_blur_map(pos, 4);
    auto iz = render_blur_map(zero, 4);
    // negative: blue channel dominates; positive: red dominates; zero: white
    REQUIRE(in.at(0, 0, 2) > in.at(0, 0, 0));
    REQUIRE(ip.at(0, 0, 0) > ip.at(0, 0, 2));
    REQUIRE(iz.at(0, 0, 0) == 255);
    REQUIRE(iz.at(0, 0, 1) == 255);
    REQUIRE(iz.at(0, 0, 2) == 255);
  }
  SECTION("two-plane map renders two flat regions") {
    Image<std::int8_t> labels(4, 8, 1);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 8; ++x) labels.at(y, x) = x < 4 ? -3 : 2;
    auto img = render_blur_map(labels, 4);
    for (int y = 0; y < 4; ++y)
      for (int x = 1; x < 4; ++x)
        for (int c = 0; c < 3; ++c) {
          REQUIRE(img.at(y, x, c) == img.at(0, 0, c));
          REQUIRE(img.at(y, x + 4, c) == img.at(0, 4, c));
        }
    bool differ = false;
    for (int c = 0; c < 3; ++c) differ = differ || img.at(0, 0, c) != img.at(0, 4, c);
    REQUIRE(differ);
  }
  SECTION("labels outside the set are rejected") {
    Image<std::int8_t> labels(2, 2, 1, 9);
    REQUIRE_THROWS_AS(render_blur_map(labels, 4), ConfigError);
  }
}
