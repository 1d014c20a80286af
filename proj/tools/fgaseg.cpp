// Command-line front end: train, eval, infer, ablate, export-pseudomasks, gradcheck.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fgaseg/training.hpp"

using namespace fgaseg;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file");
    app->add_option("--set", sets, "override a config key, as key=value (repeatable)");
  }

  TrainConfig resolve(TrainConfig cfg = {}) const {
    if (!config_file.empty()) load_config_file(cfg, config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

// Binary P6 image scaled to [0, 1], as 1 x 3 x H x W.
Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::string magic;
  std::int64_t w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) throw InputError(path + ": expected an 8-bit P6 image");
  in.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw InputError(path + ": truncated");
  std::vector<double> v(raw.size());
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < w * h; ++i) v[static_cast<std::size_t>(c * w * h + i)] = raw[static_cast<std::size_t>(i * 3 + c)] / 255.0;
  }
  return Tensor::from_values({1, 3, h, w}, v);
}

std::vector<SyntheticScene> scenes_for(const TrainConfig& cfg) {
  const ToyVlm vlm(cfg.model.vlm);
  return make_training_scenes(cfg, world_palette(vlm, cfg.T));
}

void print_eval(const EvalResult& ev) {
  std::cout << "pixel_acc\t" << std::fixed << std::setprecision(4) << ev.pixel_acc << "\nmiou\t" << ev.miou
            << "\ninfer_ms\t" << std::setprecision(3) << ev.infer_ms << '\n';
}

int cmd_train(const TrainConfig& cfg, const std::string& out, int log_every) {
  const auto scenes = scenes_for(cfg);
  TrainState state = TrainState::make(cfg);
  const std::uint64_t before = state.model.vlm.checksum();
  const TrainResult tr = train(state, scenes, cfg, [&](std::int64_t it, const LossRecord& r) {
    if (log_every > 0 && ((it + 1) % log_every == 0 || it == 0)) {
      std::cerr << "iter " << it + 1 << " loss " << r.total << " ce " << r.ce << " align " << r.align << " auxi "
                << r.auxi << '\n';
    }
  });
  if (state.model.vlm.checksum() != before) throw std::logic_error("encoder weights changed during training");
  std::cout << "train_seconds\t" << std::fixed << std::setprecision(2) << tr.seconds << '\n';
  print_eval(evaluate(state.model, scenes));
  if (!out.empty()) {
    save_model(out, state.model, cfg);
    std::cout << "checkpoint\t" << out << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, std::int64_t top_k) {
  auto [cfg, model] = load_model(ckpt);
  const auto scenes = scenes_for(cfg);
  const bool prune = top_k > 0 || cfg.fast_mode;
  print_eval(evaluate(model, scenes, prune ? std::optional<std::int64_t>(top_k > 0 ? top_k : cfg.top_k) : std::nullopt));
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, std::int64_t scene_seed, const std::string& vocab_path,
              std::int64_t top_k, const std::string& out) {
  auto [cfg, model] = load_model(ckpt);
  Tensor img;
  if (!image.empty()) {
    img = read_ppm(image);
  } else {
    const ToyVlm vlm(cfg.model.vlm);
    SceneOptions opts;
    opts.patch = cfg.model.vlm.patch;
    img = gen_synthetic_scene(world_palette(vlm, cfg.T), static_cast<std::uint64_t>(scene_seed), cfg.T,
                              cfg.image_size, cfg.image_size, opts)
              .image;
  }
  Vocabulary vocab;
  if (!vocab_path.empty()) {
    vocab = read_vocabulary(vocab_path);
  } else {
    for (std::int64_t t = 0; t < cfg.T; ++t) vocab.emplace_back(t, "category_" + std::to_string(t));
  }
  std::vector<std::int64_t> ids;
  std::vector<std::string> names;
  for (const auto& [id, name] : vocab) {
    ids.push_back(id);
    names.push_back(name);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const InferResult r = infer(model, img, ids, top_k > 0 ? std::optional<std::int64_t>(top_k) : std::nullopt);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  write_label_map(out, r.labels, img.dim(3), img.dim(2), names);
  std::cout << "labels\t" << out << "\ninfer_ms\t" << std::fixed << std::setprecision(3) << ms << '\n';
  return 0;
}

int cmd_ablate(TrainConfig cfg, const std::string& axis, std::int64_t iters, const std::string& out) {
  if (iters > 0) cfg.iters = iters;
  const ResultsTable table = run_experiment(cfg, axis, [](const std::string& s) { std::cerr << s << '\n'; });
  if (out.empty()) {
    std::cout << table.to_tsv();
  } else {
    std::ofstream(out) << table.to_tsv();
    std::cout << "table\t" << out << '\n';
  }
  return 0;
}

int cmd_export(const std::string& ckpt, const std::string& out, std::int64_t heldout, std::int64_t scene_seed) {
  auto [cfg, model] = load_model(ckpt);
  std::vector<SyntheticScene> scenes;
  if (heldout >= 0) {
    // Vocabulary 0..heldout with the held-out category forced into the image.
    const ToyVlm vlm(cfg.model.vlm);
    SceneOptions opts;
    opts.patch = cfg.model.vlm.patch;
    opts.required = heldout;
    scenes.push_back(gen_synthetic_scene(world_palette(vlm, heldout + 1), static_cast<std::uint64_t>(scene_seed),
                                         heldout + 1, cfg.image_size, cfg.image_size, opts));
    std::filesystem::create_directories(out);
    write_label_map(std::filesystem::path(out) / "ground_truth.pgm", scenes[0].mask, scenes[0].width,
                    scenes[0].height, {});
  } else {
    scenes = scenes_for(cfg);
  }
  const auto paths = export_pseudomasks(model, scenes, out);
  std::cout << "written\t" << paths.size() << "\ndir\t" << out << '\n';
  return 0;
}

int cmd_gradcheck(const TrainConfig& base, std::uint64_t seed, double eps, double tol) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.tolerance = tol;
  opt.seed = seed;
  const GradReport rep = model_grad_check(base, seed, opt);
  std::cout << "param\tmax_rel_error\tcoords\n";
  for (const auto& p : rep.params) std::cout << p.name << '\t' << std::scientific << p.max_rel_error << '\t' << p.coords_checked << '\n';
  std::cout << "max_rel_error\t" << rep.max_rel_error << "\npass\t" << (rep.pass ? "yes" : "no") << '\n';
  if (!rep.failure.empty()) std::cout << "failure\t" << rep.failure << '\n';
  return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary segmentation on synthetic scenes"};
  app.require_subcommand(1);

  Common c_train, c_ablate, c_grad;
  std::string train_out;
  int log_every = 25;
  auto* train_cmd = app.add_subcommand("train", "train on the seeded synthetic scenes");
  c_train.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "checkpoint directory");
  train_cmd->add_option("--log-every", log_every, "print losses every N iterations (0 = quiet)");

  std::string ckpt;
  std::int64_t top_k = 0;
  auto* eval_cmd = app.add_subcommand("eval", "pixel accuracy and mIoU of a checkpoint on its training scenes");
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--top-k", top_k, "prune to k categories per image (0 = off)");

  std::string image, vocab_path, infer_out = "labels.pgm";
  std::int64_t scene_seed = 1000;
  auto* infer_cmd = app.add_subcommand("infer", "label map for one image");
  infer_cmd->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  infer_cmd->add_option("--image", image, "8-bit binary PPM; a synthetic scene is generated when omitted");
  infer_cmd->add_option("--scene-seed", scene_seed, "seed of the generated scene");
  infer_cmd->add_option("--vocab", vocab_path, "vocabulary file, one id<TAB>name per line");
  infer_cmd->add_option("--top-k", top_k, "prune to k categories (0 = off)");
  infer_cmd->add_option("--out", infer_out, "output label graymap; legend is written next to it");

  std::string axis, ablate_out;
  std::int64_t ablate_iters = 0;
  auto* ablate_cmd = app.add_subcommand("ablate", "sweep one axis and print a TSV table");
  c_ablate.attach(ablate_cmd);
  ablate_cmd->add_option("axis", axis, "none, kernel_size, top_n, gamma, lambda_align, p2t_layers, kernel_norm, decoder")
      ->required();
  ablate_cmd->add_option("--iters", ablate_iters, "override the iteration count");
  ablate_cmd->add_option("--out", ablate_out, "write the table here instead of stdout");

  std::string export_out = "pseudomasks";
  std::int64_t heldout = -1;
  auto* export_cmd = app.add_subcommand("export-pseudomasks", "write GCS/LCS graymaps per image and category");
  export_cmd->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  export_cmd->add_option("--out", export_out, "output directory");
  export_cmd->add_option("--heldout", heldout, "export one scene containing this unseen category id");
  export_cmd->add_option("--scene-seed", scene_seed, "seed of the held-out scene");

  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-3, gc_tol = 1e-3;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every trainable parameter");
  c_grad.attach(grad_cmd);
  grad_cmd->add_option("--seed", gc_seed, "seed");
  grad_cmd->add_option("--eps", gc_eps, "finite-difference step");
  grad_cmd->add_option("--tolerance", gc_tol, "max relative error");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(c_train.resolve(), train_out, log_every);
    if (*eval_cmd) return cmd_eval(ckpt, top_k);
    if (*infer_cmd) return cmd_infer(ckpt, image, scene_seed, vocab_path, top_k, infer_out);
    if (*ablate_cmd) return cmd_ablate(c_ablate.resolve(), axis, ablate_iters, ablate_out);
    if (*export_cmd) return cmd_export(ckpt, export_out, heldout, scene_seed);
    if (*grad_cmd) return cmd_gradcheck(c_grad.resolve(), gc_seed, gc_eps, gc_tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
