#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "defocus/pipeline.hpp"

using namespace defocus;
namespace fs = std::filesystem;

namespace {

const fs::path kMaskA = fs::path(DEFOCUS_DATA_DIR) / "masks/asym_a.pgm";

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "defocus_test_pipeline" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

GenConfig small_gen(const fs::path& out, std::uint64_t seed = 5) {
  GenConfig cfg;
  cfg.scenes = 6;
  cfg.focals = 2;
  cfg.height = 32;
  cfg.width = 32;
  cfg.max_blur = 3;
  cfg.mask_path = kMaskA;
  cfg.algo = DeblurAlgo::wiener;
  cfg.seed = seed;
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

TEST_CASE("split ratios reproduce the 936/108/156 partition", "[pipeline]") {
  auto splits = assign_splits(100, 3);
  int train = 0, val = 0, eval_count = 0;
  for (const auto& s : splits) {
    if (s == "train") ++train;
    if (s == "val") ++val;
    if (s == "eval") ++eval_count;
  }
  REQUIRE(train == 78);
  REQUIRE(val == 9);
  REQUIRE(eval_count == 13);
  // 12 focal variants per scene
  REQUIRE(train * 12 == 936);
  REQUIRE(val * 12 == 108);
  REQUIRE(eval_count * 12 == 156);
}

TEST_CASE("generate_dataset desk corpus", "[pipeline]") {
  fs::path out = fresh_dir("gen");
  GenConfig cfg = small_gen(out);
  cfg.scenes = 12;
  cfg.focals = 4;
  cfg.max_blur = 4;
  auto manifest = generate_dataset(cfg);

  SECTION("entry count and depth-7 slice structure") {
    REQUIRE(manifest.entries.size() == 48);
    auto stack = load_stack(out / manifest.entries[0].stack_path);
    REQUIRE(stack.n == 6);  // 2m-2
    int valid = 0;
    for (auto l : stack.slice_labels)
      if (l != HypothesisStack::kPadSlice) ++valid;
    REQUIRE(valid == 7);  // 2m-1
  }
  SECTION("splits are scene-disjoint and focal variants stay together") {
    std::map<std::string, std::set<std::string>> scene_splits;
    for (const auto& e : manifest.entries) scene_splits[e.scene_id].insert(e.split);
    for (const auto& [sid, splits] : scene_splits) REQUIRE(splits.size() == 1);
    std::set<std::string> train_scenes, other;
    for (const auto& e : manifest.entries)
      (e.split == "train" ? train_scenes : other).insert(e.scene_id);
    for (const auto& s : train_scenes) REQUIRE(other.count(s) == 0);
  }
  SECTION("every manifest path exists and parses with declared shapes") {
    for (const auto& e : manifest.entries) {
      auto img = read_pgm(out / e.image_path);
      auto lab = read_label_raster(out / e.label_path);
      auto stack = load_stack(out / e.stack_path);
      REQUIRE(img.height == 32);
      REQUIRE(img.width == 32);
      REQUIRE(lab.labels.height == 32);
      REQUIRE(lab.max_blur == 4);
      REQUIRE(stack.height() == 32);
      REQUIRE(stack.data.depth == 24);
      for (auto l : lab.labels.data)
        REQUIRE((l == 0 || (std::abs(l) >= 2 && std::abs(l) <= 4)));
    }
  }
  SECTION("manifest round trips through its text form") {
    auto loaded = load_manifest(out / "manifest.tsv");
    REQUIRE(loaded.entries.size() == manifest.entries.size());
    for (std::size_t i = 0; i < loaded.entries.size(); ++i) {
      REQUIRE(loaded.entries[i].scene_id == manifest.entries[i].scene_id);
      REQUIRE(loaded.entries[i].split == manifest.entries[i].split);
      REQUIRE(loaded.entries[i].lens.s1 == manifest.entries[i].lens.s1);
      REQUIRE(loaded.entries[i].lens.alpha == manifest.entries[i].lens.alpha);
      REQUIRE(loaded.entries[i].max_blur == manifest.entries[i].max_blur);
      REQUIRE(loaded.entries[i].algo == "wiener");
    }
  }
  SECTION("labels cover both orientations somewhere in the corpus") {
    bool any_neg = false, any_pos = false;
    for (const auto& e : manifest.entries) {
      auto lab = read_label_raster(out / e.label_path);
      for (auto l : lab.labels.data) {
        any_neg = any_neg || l < 0;
        any_pos = any_pos || l > 0;
      }
    }
    REQUIRE(any_neg);
    REQUIRE(any_pos);
  }
}

TEST_CASE("generate_dataset is deterministic", "[pipeline]") {
  fs::path a = fresh_dir("det_a");
  fs::path b = fresh_dir("det_b");
  GenConfig ca = small_gen(a, 11);
  GenConfig cb = small_gen(b, 11);
  ca.scenes = cb.scenes = 3;
  generate_dataset(ca);
  generate_dataset(cb);
  REQUIRE(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  auto ma = load_manifest(a / "manifest.tsv");
  for (const auto& e : ma.entries) {
    REQUIRE(slurp(a / e.image_path) == slurp(b / e.image_path));
    REQUIRE(slurp(a / e.stack_path) == slurp(b / e.stack_path));
  }
}

TEST_CASE("train for zero steps writes the init checkpoint", "[pipeline]") {
  fs::path out = fresh_dir("train0");
  GenConfig cfg = small_gen(out, 21);
  auto manifest = generate_dataset(cfg);
  TrainConfig tc;
  tc.steps = 0;
  tc.seed = 33;
  fs::path run = fresh_dir("train0_run");
  auto result = train(tc, manifest, run);
  auto loaded = load_checkpoint(run / "checkpoint.net3");
  auto expect = init_params<float>(33, 1);
  for (int i = 0; i < kNumConvs; ++i) {
    REQUIRE(loaded.conv[i].weight == expect.conv[i].weight);
    REQUIRE(loaded.conv[i].bias == expect.conv[i].bias);
  }
}

TEST_CASE("train smoke run logs every step and validates", "[pipeline]") {
  fs::path out = fresh_dir("train_smoke");
  GenConfig cfg = small_gen(out, 22);
  auto manifest = generate_dataset(cfg);
  TrainConfig tc;
  tc.steps = 4;
  tc.seed = 34;
  tc.val_every = 2;
  fs::path run = fresh_dir("train_smoke_run");
  auto result = train(tc, manifest, run);

  std::ifstream log(run / "train.log");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    ++lines;
    double ce, smooth, total;
    long step;
    REQUIRE(std::sscanf(line.c_str(), "%ld\t%lf\t%lf\t%lf", &step, &ce, &smooth, &total) == 4);
    // the log carries 9 significant digits, so the identity holds to ~1e-8
    REQUIRE(total == Catch::Approx(ce + 0.1 * smooth).margin(1e-7));
  }
  REQUIRE(lines == 4);
  REQUIRE(fs::exists(run / "val.log"));
  REQUIRE(result.best_n3 >= 0.0);  // val ran at least once
}

TEST_CASE("train rejects an empty train split", "[pipeline]") {
  fs::path out = fresh_dir("train_empty");
  GenConfig cfg = small_gen(out, 23);
  auto manifest = generate_dataset(cfg);
  for (auto& e : manifest.entries) e.split = "eval";
  TrainConfig tc;
  tc.steps = 1;
  REQUIRE_THROWS_AS(train(tc, manifest, fresh_dir("train_empty_run")), ConfigError);
}

TEST_CASE("evaluate_split runs on cached stacks and on rebuilt stacks", "[pipeline]") {
  fs::path out = fresh_dir("eval_split");
  GenConfig cfg = small_gen(out, 24);
  auto manifest = generate_dataset(cfg);
  auto params = init_params<float>(55, 1);
  auto r_cached = evaluate_split(params, manifest, "train");
  REQUIRE(r_cached.pixels > 0);
  REQUIRE(r_cached.n3 >= r_cached.n1);
  // swapping the algorithm rebuilds stacks from the stored defocused images
  auto r_swapped = evaluate_split(params, manifest, "train", DeblurAlgo::cg);
  REQUIRE(r_swapped.pixels == r_cached.pixels);
}
