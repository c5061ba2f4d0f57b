// Command-line interface: dataset generation, training, evaluation, single
// image prediction and single-hypothesis deblurring.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "defocus/pipeline.hpp"

namespace fs = std::filesystem;
using namespace defocus;

namespace {

void print_metrics(const MetricsReport& r, const std::string& split, int border, long images) {
  std::printf("split          : %s\n", split.c_str());
  std::printf("images         : %ld\n", images);
  std::printf("border excluded: %d px\n", border);
  std::printf("pixels scored  : %ld\n", r.pixels);
  std::printf("N-1 accuracy   : %.2f%%\n", r.n1);
  std::printf("N-3 accuracy   : %.2f%%\n", r.n3);
}

void write_metrics_file(const fs::path& path, const MetricsReport& r, const std::string& split,
                        int border, long images) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write metrics file: " + path.string());
  os << "split=" << split << "\n";
  os << "images=" << images << "\n";
  os << "border_exclude=" << border << "\n";
  os << "pixels=" << r.pixels << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "n1=%.6f\n", r.n1);
  os << buf;
  std::snprintf(buf, sizeof(buf), "n3=%.6f\n", r.n3);
  os << buf;
  for (const auto& [key, count] : r.confusion)
    os << "confusion_" << key.first << "_" << key.second << "=" << count << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"defocus blur scale and orientation estimation"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate a synthetic defocus dataset");
  GenConfig gen_cfg;
  std::string gen_algo = "wiener";
  gen->add_option("--scenes", gen_cfg.scenes, "number of synthetic scenes")->default_val(12);
  gen->add_option("--focals", gen_cfg.focals, "focal distances per scene")->default_val(4);
  gen->add_option("--height", gen_cfg.height, "scene height")->default_val(64);
  gen->add_option("--width", gen_cfg.width, "scene width")->default_val(64);
  gen->add_option("--max-blur", gen_cfg.max_blur, "maximum blur size in pixels")->default_val(4);
  gen->add_option("--mask", gen_cfg.mask_path, "aperture mask image (PGM/PNG)")->required();
  gen->add_option("--algo", gen_algo, "deblurring algorithm (wiener|cg)");
  gen->add_option("--seed", gen_cfg.seed, "RNG seed")->default_val(1);
  gen->add_option("--out", gen_cfg.out_dir, "output directory")->required();
  gen->add_option("--noise-sigma", gen_cfg.noise_sigma, "additive Gaussian sensor noise");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train the selector network");
  TrainConfig train_cfg;
  fs::path train_manifest, train_out;
  tr->add_option("--manifest", train_manifest, "dataset manifest path")->required();
  tr->add_option("--steps", train_cfg.steps, "SGD steps")->default_val(2000);
  tr->add_option("--seed", train_cfg.seed, "RNG seed")->default_val(1);
  tr->add_option("--lr", train_cfg.lr, "learning rate")->default_val(0.01);
  tr->add_option("--lambda-s", train_cfg.lambda_s, "smoothness weight")->default_val(0.1);
  tr->add_option("--tau", train_cfg.tau, "Gumbel-softmax temperature")->default_val(0.5);
  tr->add_option("--val-every", train_cfg.val_every, "validation cadence in steps")
      ->default_val(200);
  tr->add_option("--out", train_out, "run output directory")->required();

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  fs::path eval_ckpt, eval_manifest, eval_out = "metrics.txt";
  std::string eval_split = "eval";
  std::string eval_algo;
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--manifest", eval_manifest, "dataset manifest path")->required();
  ev->add_option("--split", eval_split, "split to evaluate (train|val|eval)");
  ev->add_option("--algo", eval_algo, "rebuild stacks with this algorithm (wiener|cg)");
  ev->add_option("--out", eval_out, "machine-readable metrics file");

  // ---- predict ----
  auto* pr = app.add_subcommand("predict", "predict a blur label map for one image");
  fs::path pr_ckpt, pr_image, pr_mask;
  int pr_max_blur = 4;
  std::string pr_algo = "wiener";
  std::string pr_prefix = "prediction";
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--image", pr_image, "defocused image (PGM/PNG)")->required();
  pr->add_option("--mask", pr_mask, "aperture mask image")->required();
  pr->add_option("--max-blur", pr_max_blur, "maximum blur size in pixels")->required();
  pr->add_option("--algo", pr_algo, "deblurring algorithm (wiener|cg)");
  pr->add_option("--out-prefix", pr_prefix, "output prefix for .lbls and _blurmap.png");

  // ---- deblur ----
  auto* db = app.add_subcommand("deblur", "deblur one image under a single PSF hypothesis");
  fs::path db_image, db_mask, db_out = "deblurred.pgm";
  int db_label = 0;
  std::string db_algo = "wiener";
  double db_nsr = 1e-3, db_lambda = 1e-3;
  db->add_option("--image", db_image, "defocused image (PGM/PNG)")->required();
  db->add_option("--mask", db_mask, "aperture mask image")->required();
  db->add_option("--label", db_label, "signed blur label (0 or |label| >= 2)")->required();
  db->add_option("--algo", db_algo, "deblurring algorithm (wiener|cg)");
  db->add_option("--nsr", db_nsr, "wiener noise-to-signal ratio");
  db->add_option("--lambda", db_lambda, "cg smoothness weight");
  db->add_option("--out", db_out, "output image path (PGM)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    gen_cfg.algo = deblur_algo_from_string(gen_algo);
    auto manifest = generate_dataset(gen_cfg);
    long train_count = 0, val_count = 0, eval_count = 0;
    for (const auto& e : manifest.entries) {
      if (e.split == "train") ++train_count;
      if (e.split == "val") ++val_count;
      if (e.split == "eval") ++eval_count;
    }
    std::printf("wrote %zu samples to %s (train/val/eval = %ld/%ld/%ld)\n",
                manifest.entries.size(), gen_cfg.out_dir.string().c_str(), train_count, val_count,
                eval_count);
    return 0;
  }

  if (tr->parsed()) {
    auto manifest = load_manifest(train_manifest);
    auto result = train(train_cfg, manifest, train_out);
    if (result.best_n3 >= 0.0)
      std::printf("best val N-3 %.2f%% (N-1 %.2f%%) at step %ld\n", result.best_n3, result.best_n1,
                  result.best_step);
    std::printf("checkpoint: %s\n", result.checkpoint_path.string().c_str());
    return 0;
  }

  if (ev->parsed()) {
    auto manifest = load_manifest(eval_manifest);
    auto params = load_checkpoint(eval_ckpt);
    std::optional<DeblurAlgo> algo;
    if (!eval_algo.empty()) algo = deblur_algo_from_string(eval_algo);
    auto r = evaluate_split(params, manifest, eval_split, algo);
    int border = manifest.entries.empty() ? 0 : manifest.entries.front().max_blur;
    long images = static_cast<long>(manifest.split_entries(eval_split).size());
    print_metrics(r, eval_split, border, images);
    write_metrics_file(eval_out, r, eval_split, border, images);
    std::printf("metrics written to %s\n", eval_out.string().c_str());
    return 0;
  }

  if (pr->parsed()) {
    auto params = load_checkpoint(pr_ckpt);
    auto mask = load_aperture_mask(pr_mask);
    auto bank = build_kernel_bank(mask, pr_max_blur);
    Image<double> image = read_gray_image(pr_image);
    int ch = image.height / 8 * 8, cw = image.width / 8 * 8;
    if (ch < 8 || cw < 8) throw DataError("image too small (must allow an 8x8 crop)");
    if (ch != image.height || cw != image.width) {
      Image<double> cropped(ch, cw, 1);
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) cropped.at(y, x) = image.at(y, x);
      image = std::move(cropped);
      std::fprintf(stderr, "note: cropped to %dx%d (multiple of 8)\n", ch, cw);
    }
    DeblurParams dp;
    auto stack = build_stack(image, bank, deblur_algo_from_string(pr_algo), dp);
    auto logits = net_forward(stack.data, params);
    auto pred = decode(logits, stack.slice_labels);
    fs::path lbl_path = pr_prefix + ".lbls";
    fs::path map_path = pr_prefix + "_blurmap.png";
    write_label_raster(lbl_path, pred, pr_max_blur);
    write_png_rgb8(map_path, render_blur_map(pred, pr_max_blur));
    std::printf("wrote %s and %s\n", lbl_path.string().c_str(), map_path.string().c_str());
    return 0;
  }

  if (db->parsed()) {
    auto mask = load_aperture_mask(db_mask);
    Image<double> image = read_gray_image(db_image);
    Image<double> out;
    if (db_label == 0) {
      out = image;
    } else {
      if (std::abs(db_label) < 2) throw ConfigError("label magnitude must be 0 or >= 2");
      auto bank = build_kernel_bank(mask, std::abs(db_label));
      const auto& psf = bank.kernel_for(db_label);
      if (db_algo == "wiener")
        out = wiener_deblur(image, psf, db_nsr);
      else
        out = cg_deblur(image, psf, db_lambda).x;
    }
    for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
    write_pgm(db_out, out, 16);
    std::printf("wrote %s\n", db_out.string().c_str());
    return 0;
  }

  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
