// Dataset generation with scene-disjoint splits, the SGD training loop, and
// split evaluation. Everything is deterministic given (config, seed).
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "defocus/common.hpp"
#include "defocus/deconv.hpp"
#include "defocus/eval.hpp"
#include "defocus/io.hpp"
#include "defocus/net3d.hpp"
#include "defocus/objective.hpp"
#include "defocus/optics.hpp"

namespace defocus {

struct ManifestEntry {
  std::string scene_id;
  int focal_index = 0;
  std::string split;  // train | val | eval
  std::string image_path, label_path, stack_path;  // relative to manifest dir
  ThinLensConfig lens;
  int max_blur = 0;
  std::string aperture;
  std::string algo;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory holding the manifest

  std::vector<const ManifestEntry*> split_entries(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// One tab-separated record per line:
// scene_id  focal_index  split  image  labels  stack  s1  f1  d  pixel_scale  m  aperture  algo
inline void save_manifest(const std::filesystem::path& p, const DatasetManifest& m) {
  auto os = detail::open_out(p);
  for (const auto& e : m.entries) {
    os << e.scene_id << '\t' << e.focal_index << '\t' << e.split << '\t' << e.image_path << '\t'
       << e.label_path << '\t' << e.stack_path << '\t' << detail::format_double(e.lens.s1) << '\t'
       << detail::format_double(e.lens.f1) << '\t' << detail::format_double(e.lens.d) << '\t'
       << detail::format_double(e.lens.pixel_scale) << '\t' << e.max_blur << '\t' << e.aperture
       << '\t' << e.algo << '\n';
  }
  if (!os) throw DataError("write failed: " + p.string());
}

inline DatasetManifest load_manifest(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  DatasetManifest m;
  m.root = p.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 13)
      throw DataError("manifest line " + std::to_string(lineno) + ": expected 13 fields, got " +
                      std::to_string(fields.size()));
    ManifestEntry e;
    try {
      e.scene_id = fields[0];
      e.focal_index = std::stoi(fields[1]);
      e.split = fields[2];
      e.image_path = fields[3];
      e.label_path = fields[4];
      e.stack_path = fields[5];
      e.lens = ThinLensConfig(std::stod(fields[6]), std::stod(fields[7]), std::stod(fields[8]),
                              std::stod(fields[9]));
      e.max_blur = std::stoi(fields[10]);
      e.aperture = fields[11];
      e.algo = fields[12];
    } catch (const std::exception& ex) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (e.split != "train" && e.split != "val" && e.split != "eval")
      throw DataError("manifest line " + std::to_string(lineno) + ": unknown split " + e.split);
    m.entries.push_back(std::move(e));
  }
  return m;
}

// Scene-disjoint split with the 78/9/13 percent ratios (rounded): a scene's
// focal variants always land in the same subset.
inline std::vector<std::string> assign_splits(int num_scenes, std::uint64_t seed) {
  int n_train = static_cast<int>(std::lround(num_scenes * 0.78));
  int n_val = static_cast<int>(std::lround(num_scenes * 0.09));
  n_train = std::min(n_train, num_scenes);
  n_val = std::min(n_val, num_scenes - n_train);
  std::vector<int> order(num_scenes);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x59117ull));
  for (int i = num_scenes - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(0, i));
    std::swap(order[i], order[j]);
  }
  std::vector<std::string> split(num_scenes);
  for (int i = 0; i < num_scenes; ++i) {
    if (i < n_train)
      split[order[i]] = "train";
    else if (i < n_train + n_val)
      split[order[i]] = "val";
    else
      split[order[i]] = "eval";
  }
  return split;
}

struct GenConfig {
  int scenes = 12;
  int focals = 4;
  int height = 64;
  int width = 64;
  int max_blur = 4;
  std::filesystem::path mask_path;
  DeblurAlgo algo = DeblurAlgo::wiener;
  DeblurParams deblur;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;
  double alpha_headroom = 1.25;  // scales alpha so |coc| overshoots max_blur a little
  double noise_sigma = 0.0;
};

// Synthesizes scenes, sweeps the focal plane over per-scene depth quantiles,
// renders defocused samples with ground-truth labels, precomputes hypothesis
// stacks, and writes the manifest.
inline DatasetManifest generate_dataset(const GenConfig& cfg) {
  if (cfg.scenes < 1 || cfg.focals < 1) throw ConfigError("generate_dataset: empty sweep");
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  ApertureMask mask = load_aperture_mask(cfg.mask_path);
  KernelBank bank = build_kernel_bank(mask, cfg.max_blur);
  // keep a copy of the mask with the dataset so stacks can be rebuilt later
  write_pgm(cfg.out_dir / (mask.name + ".pgm"), mask.values, 16);

  DatasetManifest manifest;
  manifest.root = cfg.out_dir;
  std::vector<std::string> splits = assign_splits(cfg.scenes, cfg.seed);

  for (int si = 0; si < cfg.scenes; ++si) {
    char sid[32];
    std::snprintf(sid, sizeof(sid), "scene%03d", si);
    Scene scene = synth_scene(mix_seed(cfg.seed, 1000 + si), cfg.height, cfg.width);
    scene.scene_id = sid;
    write_pgm(cfg.out_dir / (std::string(sid) + "_sharp.pgm"), scene.image, 16);
    write_depth_raster(cfg.out_dir / (std::string(sid) + "_depth.dpth"), scene.depth);

    std::vector<double> sorted_depth(scene.depth.data);
    std::sort(sorted_depth.begin(), sorted_depth.end());
    for (int fi = 0; fi < cfg.focals; ++fi) {
      double q = (fi + 0.5) / cfg.focals;
      double s1 = sorted_depth[static_cast<std::size_t>(q * (sorted_depth.size() - 1))];
      double max_frac = 0.0;
      for (double x : scene.depth.data) max_frac = std::max(max_frac, std::abs(1.0 - s1 / x));
      if (!(max_frac > 0.0))
        throw ConfigError("generate_dataset: focal sweep outside depth range (flat depth?)");
      double alpha = cfg.alpha_headroom * cfg.max_blur / max_frac;
      ThinLensConfig lens = ThinLensConfig::for_alpha(s1, alpha);

      DefocusedSample sample = render_defocus(scene, lens, bank, fi, cfg.noise_sigma,
                                              mix_seed(cfg.seed, 7000 + si * 64 + fi));
      char base[64];
      std::snprintf(base, sizeof(base), "%s_f%02d", sid, fi);
      std::string image_rel = std::string(base) + ".pgm";
      std::string label_rel = std::string(base) + ".lbls";
      std::string stack_rel = std::string(base) + ".hstk";
      write_pgm(cfg.out_dir / image_rel, sample.image, 16);
      write_label_raster(cfg.out_dir / label_rel, sample.label_map, cfg.max_blur);

      // stacks are derived from the quantized on-disk image so downstream
      // consumers and cached stacks agree
      Image<double> stored = read_pgm(cfg.out_dir / image_rel);
      HypothesisStack stack = build_stack(stored, bank, cfg.algo, cfg.deblur);
      save_stack(cfg.out_dir / stack_rel, stack);

      ManifestEntry e;
      e.scene_id = sid;
      e.focal_index = fi;
      e.split = splits[si];
      e.image_path = image_rel;
      e.label_path = label_rel;
      e.stack_path = stack_rel;
      e.lens = lens;
      e.max_blur = cfg.max_blur;
      e.aperture = mask.name;
      e.algo = to_string(cfg.algo);
      manifest.entries.push_back(std::move(e));
    }
  }
  save_manifest(cfg.out_dir / "manifest.tsv", manifest);
  return manifest;
}

struct TrainConfig {
  double lr = 0.01;
  int batch = 1;  // the loop is defined for batch 1
  double lambda_s = 0.1;
  double tau = 0.5;
  long steps = 2000;
  std::uint64_t seed = 1;
  int val_every = 200;
};

struct TrainResult {
  NetParams<float> params;       // best by val N-3 (final params when no val ran)
  double best_n3 = -1.0;
  double best_n1 = 0.0;
  long best_step = 0;
  std::filesystem::path checkpoint_path;
};

namespace detail {

struct LoadedSample {
  HypothesisStack stack;
  Image<int> gt_index;          // canonical slice indices
  Image<std::int8_t> gt_labels; // signed labels (cropped)
  std::string id;
};

// Crops stack + labels to the largest multiple of 8 (the network's stride-8
// encoder requirement) and resolves labels to canonical slice indices.
inline LoadedSample make_sample(HypothesisStack stack, Image<std::int8_t> labels, std::string id) {
  LoadedSample s;
  s.id = std::move(id);
  int ch = stack.height() / 8 * 8, cw = stack.width() / 8 * 8;
  if (ch < 8 || cw < 8) throw DataError("sample too small to crop to a multiple of 8: " + s.id);
  if (labels.height != stack.height() || labels.width != stack.width())
    throw DataError("label raster does not match stack dims: " + s.id);
  if (ch != stack.height() || cw != stack.width()) {
    HypothesisStack cropped;
    cropped.n = stack.n;
    cropped.slice_labels = stack.slice_labels;
    cropped.data = Tensor4<float>(ch, cw, 24, stack.channels());
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        for (int k = 0; k < 24; ++k)
          for (int c = 0; c < stack.channels(); ++c)
            cropped.data.at(y, x, k, c) = stack.data.at(y, x, k, c);
    stack = std::move(cropped);
    Image<std::int8_t> labc(ch, cw, 1);
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) labc.at(y, x) = labels.at(y, x);
    labels = std::move(labc);
  }
  s.gt_labels = std::move(labels);
  s.gt_index = label_index_map(s.gt_labels, stack.slice_labels);
  s.stack = std::move(stack);
  return s;
}

inline LoadedSample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
  return make_sample(load_stack(m.root / e.stack_path),
                     read_label_raster(m.root / e.label_path).labels,
                     e.scene_id + "/f" + std::to_string(e.focal_index));
}

}  // namespace detail

// Evaluates a parameter set over manifest entries: noise-free decoding,
// metrics over a border-excluded region of width max_blur.
inline MetricsReport evaluate_entries(const NetParams<float>& params,
                                      const std::vector<detail::LoadedSample>& samples,
                                      int max_blur) {
  MetricsReport agg;
  for (const auto& s : samples) {
    LogitVolume<float> logits = net_forward(s.stack.data, params);
    Image<std::int8_t> pred = decode(logits, s.stack.slice_labels);
    MetricsReport r = metrics(crop_border(pred, max_blur), crop_border(s.gt_labels, max_blur),
                              canonical_label_order(max_blur));
    agg.accumulate(r);
  }
  agg.finalize(canonical_label_order(max_blur));
  return agg;
}

// SGD training loop, batch 1: per step draw the next training sample in a
// seeded epoch order, shuffle stack+labels along depth, forward, Eq. total
// loss, backward, update. Logs one line per step; validates every val_every
// steps and checkpoints at the best val N-3.
inline TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest,
                         const std::filesystem::path& out_dir) {
  if (cfg.batch != 1) throw ConfigError("train: batch size must be 1");
  if (!(cfg.lr > 0.0) || !(cfg.tau > 0.0)) throw ConfigError("train: lr and tau must be positive");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  auto train_ptrs = manifest.split_entries("train");
  auto val_ptrs = manifest.split_entries("val");
  if (train_ptrs.empty()) throw ConfigError("train: manifest train split is empty");

  std::vector<detail::LoadedSample> train_samples, val_samples;
  for (auto* e : train_ptrs) train_samples.push_back(detail::load_sample(manifest, *e));
  for (auto* e : val_ptrs) val_samples.push_back(detail::load_sample(manifest, *e));
  const int max_blur = manifest.entries.front().max_blur;

  TrainResult result;
  result.checkpoint_path = out_dir / "checkpoint.net3";
  NetParams<float> params = init_params<float>(cfg.seed, train_samples.front().stack.channels());
  result.params = params;
  save_checkpoint(result.checkpoint_path, params);  // 0 steps -> init params

  std::ofstream log(out_dir / "train.log");
  std::ofstream vlog(out_dir / "val.log");
  if (!log || !vlog) throw DataError("train: cannot open logs under " + out_dir.string());

  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t pos = order.size();  // forces a shuffle on the first step
  long epoch = 0;

  for (long step = 1; step <= cfg.steps; ++step) {
    if (pos >= order.size()) {
      Rng rng(mix_seed(cfg.seed, 0xE90000ull + static_cast<std::uint64_t>(epoch)));
      for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(order[i], order[j]);
      }
      pos = 0;
      ++epoch;
    }
    const detail::LoadedSample& sample = train_samples[order[pos++]];

    DepthPermutation perm =
        DepthPermutation::random(mix_seed(cfg.seed, 0x500000ull + static_cast<std::uint64_t>(step)));
    auto [stack, gt] = random_shuffle(sample.stack, sample.gt_index, perm);

    ForwardCache<float> cache;
    LogitVolume<float> logits = net_forward(stack.data, params, &cache);
    auto loss = total_loss(logits, gt, cfg.tau, cfg.lambda_s,
                           mix_seed(cfg.seed, 0x6B0000ull + static_cast<std::uint64_t>(step)));
    if (!std::isfinite(loss.report.total))
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + " on sample " +
                         sample.id);
    NetParams<float> grads = net_backward(loss.grad, cache, params);
    sgd_step(params, grads, static_cast<float>(cfg.lr));

    char line[128];
    std::snprintf(line, sizeof(line), "%ld\t%.9g\t%.9g\t%.9g\n", step, loss.report.ce,
                  loss.report.smooth, loss.report.total);
    log << line << std::flush;

    if (cfg.val_every > 0 && step % cfg.val_every == 0 && !val_samples.empty()) {
      MetricsReport r = evaluate_entries(params, val_samples, max_blur);
      std::snprintf(line, sizeof(line), "%ld\t%.6f\t%.6f\n", step, r.n1, r.n3);
      vlog << line << std::flush;
      if (r.n3 > result.best_n3) {
        result.best_n3 = r.n3;
        result.best_n1 = r.n1;
        result.best_step = step;
        result.params = params;
        save_checkpoint(result.checkpoint_path, params);
      }
    }
  }
  if (result.best_n3 < 0.0) {
    // no validation ever ran: keep the final parameters
    result.params = params;
    if (cfg.steps > 0) save_checkpoint(result.checkpoint_path, params);
  }
  return result;
}

// Evaluates a checkpoint over a manifest split. When algo_override names an
// algorithm other than the manifest's, stacks are rebuilt in memory from the
// stored defocused images instead of loading the cached ones.
inline MetricsReport evaluate_split(const NetParams<float>& params, const DatasetManifest& manifest,
                                    const std::string& split,
                                    std::optional<DeblurAlgo> algo_override = std::nullopt,
                                    const DeblurParams& deblur_params = {}) {
  auto ptrs = manifest.split_entries(split);
  if (ptrs.empty()) throw ConfigError("evaluate_split: split '" + split + "' is empty");
  const int max_blur = ptrs.front()->max_blur;

  std::vector<detail::LoadedSample> samples;
  if (algo_override && to_string(*algo_override) != ptrs.front()->algo) {
    ApertureMask mask;
    KernelBank bank;
    bool have_bank = false;
    for (auto* e : ptrs) {
      if (!have_bank) {
        // aperture file is not recorded in the manifest beyond its name; the
        // mask must sit next to the dataset as <aperture>.pgm or .png
        std::filesystem::path mp = manifest.root / (e->aperture + ".pgm");
        if (!std::filesystem::exists(mp)) mp = manifest.root / (e->aperture + ".png");
        if (!std::filesystem::exists(mp))
          throw DataError("evaluate_split: cannot rebuild stacks, mask file not found near " +
                          (manifest.root / e->aperture).string());
        mask = load_aperture_mask(mp);
        bank = build_kernel_bank(mask, max_blur);
        have_bank = true;
      }
      Image<double> img = read_pgm(manifest.root / e->image_path);
      HypothesisStack stack = build_stack(img, bank, *algo_override, deblur_params);
      LabelRaster lab = read_label_raster(manifest.root / e->label_path);
      samples.push_back(detail::make_sample(std::move(stack), std::move(lab.labels),
                                            e->scene_id + "/f" + std::to_string(e->focal_index)));
    }
  } else {
    for (auto* e : ptrs) samples.push_back(detail::load_sample(manifest, *e));
  }
  return evaluate_entries(params, samples, max_blur);
}

}  // namespace defocus
