#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fgaseg/training.hpp"
#include "test_util.hpp"

using namespace fgaseg;
using namespace fgaseg::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.T = 3;
  cfg.scenes = 2;
  cfg.image_size = 16;
  cfg.iters = 4;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("fgaseg_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<std::vector<float>> snapshot(const ParamList& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& p : ps) out.push_back(p.tensor.to_floats());
  return out;
}

}  // namespace

TEST_CASE("config: file, overrides, round trip") {
  const fs::path dir = scratch_dir("config");
  {
    std::ofstream f(dir / "a.cfg");
    f << "# comment line\n\nlambda_align = 0.5   # trailing comment\nK=5\nmerge_mode = add\ngamma = 0.5\n";
  }
  TrainConfig cfg;
  load_config_file(cfg, dir / "a.cfg");
  CHECK(cfg.lambda_align == 0.5);
  CHECK(cfg.model.kernel_size == 5);
  CHECK(cfg.model.merge_mode == MergeMode::Add);
  CHECK(!cfg.model.gamma_trainable);
  CHECK(cfg.model.gamma == 0.5);
  apply_setting(cfg, "K", "7");
  CHECK(cfg.model.kernel_size == 7);

  TrainConfig back;
  {
    std::ofstream f(dir / "b.cfg");
    f << config_to_string(cfg);
  }
  load_config_file(back, dir / "b.cfg");
  CHECK(config_to_string(back) == config_to_string(cfg));
  for (const auto& k : config_keys()) CHECK(config_to_string(cfg).find(k + " = ") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("config: defaults and errors") {
  TrainConfig cfg;
  CHECK(cfg.lambda_align == 0.02);
  CHECK(cfg.lambda_auxi == 0.2);
  CHECK(cfg.lr == 0.0002);
  CHECK(cfg.model.p2t_layers == 1);
  CHECK(cfg.model.decoder_stages == 3);
  CHECK(cfg.model.kernel_size == 3);
  try {
    apply_setting(cfg, "lamda_align", "1");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lamda_align") != std::string::npos);
    CHECK(msg.find("lambda_align") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_setting(cfg, "K", "three"), ConfigError);
  cfg.lambda_auxi = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.model.kernel_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("gen_synthetic_scene: labels, determinism, errors") {
  ToyVlm vlm;
  const auto palette = world_palette(vlm, 6);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticScene s = gen_synthetic_scene(palette, seed, 6, 64, 64);
    CHECK(s.image.shape() == Shape{1, 3, 64, 64});
    CHECK(s.vocabulary == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
    int fg = 0;
    for (int l : s.mask) {
      CHECK(l >= 0);
      CHECK(l < 6);
      fg += l != 0;
    }
    CHECK(fg > 0);
    SyntheticScene again = gen_synthetic_scene(palette, seed, 6, 64, 64);
    CHECK(again.mask == s.mask);
    CHECK(again.image.to_vector() == s.image.to_vector());
  }
  SceneOptions req;
  req.required = 4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticScene s = gen_synthetic_scene(palette, seed, 6, 64, 64, req);
    CHECK(std::count(s.mask.begin(), s.mask.end(), 4) > 0);
  }
  CHECK_THROWS_AS(gen_synthetic_scene(palette, 0, 1, 64, 64), ConfigError);
  CHECK_THROWS_AS(gen_synthetic_scene(palette, 0, 6, 62, 64), ConfigError);
}

TEST_CASE("gen_synthetic_scene: pixel noise stays mild") {
  ToyVlm vlm;
  const auto palette = world_palette(vlm, 6);
  double dev = 0;
  std::int64_t n = 0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    SyntheticScene s = gen_synthetic_scene(palette, seed, 6, 64, 64);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 64 * 64; ++i) {
        const double clean = palette[static_cast<std::size_t>(s.mask[static_cast<std::size_t>(i)])].rgb[static_cast<std::size_t>(c)];
        dev += std::abs(s.image.at(c * 64 * 64 + i) - clean);
        ++n;
      }
  }
  CHECK(dev / static_cast<double>(n) <= 0.05);
  CHECK(dev / static_cast<double>(n) > 0.0);
}

TEST_CASE("aligned palette: distinct colors, each closest to its own text") {
  ToyVlm vlm;
  const auto palette = aligned_palette(vlm, 8);
  REQUIRE(palette.size() == 8);
  for (std::size_t a = 0; a < palette.size(); ++a)
    for (std::size_t b = a + 1; b < palette.size(); ++b) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) d2 += std::pow(palette[a].rgb[static_cast<std::size_t>(c)] - palette[b].rgb[static_cast<std::size_t>(c)], 2);
      CHECK(std::sqrt(d2) >= 0.25 - 1e-12);
    }
  // world_palette never recolors categories when T grows.
  const auto w6 = world_palette(vlm, 6), w7 = world_palette(vlm, 7);
  for (std::size_t i = 0; i < 6; ++i) CHECK(w6[i].rgb == w7[i].rgb);
}

TEST_CASE("miou: hand cases and oracle") {
  CHECK(miou({0, 1, 1, 2}, {0, 1, 1, 2}, 3).mean == 1.0);
  CHECK(miou({1, 1}, {0, 0}, 2).mean == 0.0);
  MiouResult r = miou({0, 0, 1, 1}, {0, 1, 1, 1}, 3);
  CHECK(r.iou[0] == doctest::Approx(0.5));
  CHECK(r.iou[1] == doctest::Approx(2.0 / 3));
  CHECK(std::isnan(r.iou[2]));
  CHECK(r.mean == doctest::Approx(7.0 / 12));
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<int> a(25), b(25);
    for (auto& v : a) v = static_cast<int>(g() % 4);
    for (auto& v : b) v = static_cast<int>(g() % 4);
    CHECK(std::abs(miou(a, b, 4).mean - miou_oracle(a, b, 4)) <= 1e-12);
  }
  CHECK(pixel_accuracy({0, 1, 2, 2}, {0, 1, 1, 2}) == 0.75);
  CHECK_THROWS_AS(miou({0}, {0, 1}, 2), DimensionError);
}

TEST_CASE("overall_loss: zero weights, recombination, oracle") {
  std::mt19937_64 g(7);
  Tensor Y = random_tensor({1, 3, 2, 2}, g, -2, 2);
  Tensor Ya = random_tensor({1, 3, 2, 2}, g, -2, 2);
  Tensor O = random_tensor({1, 3, 2, 2}, g);
  std::vector<int> M{0, 2, 1, 1};
  LossBreakdown zero = overall_loss(Y, Ya, O, M, 0.0, 0.0);
  CHECK(zero.total.item() == cross_entropy(Y, M).item());

  LossBreakdown def = overall_loss(Y, Ya, O, M, 0.02, 0.2);
  CHECK(def.total.item() == doctest::Approx(def.ce + 0.02 * def.align + 0.2 * def.auxi).epsilon(1e-6));
  const double ref = cross_entropy_oracle(Y.to_vector(), M, 1, 3, 4) + 0.02 * onehot_mse_oracle(O.to_vector(), M, 1, 3, 4) +
                     0.2 * cross_entropy_oracle(Ya.to_vector(), M, 1, 3, 4);
  CHECK(std::abs(def.total.item() - ref) <= 1e-6);
  CHECK(def.ce >= 0);
  CHECK(def.align >= 0);
  CHECK(def.auxi >= 0);
}

TEST_CASE("train_step: 50 steps on one scene lower the loss, for both optimizers") {
  for (const char* opt : {"adam", "sgd"}) {
    TrainConfig cfg = tiny_config();
    cfg.optimizer = opt;
    cfg.image_size = 32;
    TrainState st = TrainState::make(cfg);
    const auto scenes = make_training_scenes(cfg, world_palette(st.model.vlm, cfg.T));
    std::vector<LossRecord> trace;
    for (int i = 0; i < 50; ++i) {
      trace.push_back(train_step(st, scenes[0], cfg));
      CHECK(trace.back().ce >= 0);
      CHECK(trace.back().align >= 0);
      CHECK(trace.back().auxi >= 0);
    }
    INFO(opt);
    CHECK(trace.back().total < trace.front().total);
  }
}

TEST_CASE("train: identical seeds give bit-identical traces") {
  TrainConfig cfg = tiny_config();
  cfg.iters = 6;
  auto run = [&] {
    TrainState st = TrainState::make(cfg);
    const auto scenes = make_training_scenes(cfg, world_palette(st.model.vlm, cfg.T));
    std::vector<double> out;
    for (const auto& r : train(st, scenes, cfg).trace) out.insert(out.end(), {r.total, r.ce, r.align, r.auxi});
    return std::make_pair(out, snapshot(st.params));
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("train_step: lr 0 leaves parameters unchanged") {
  for (const char* opt : {"adam", "sgd"}) {
    TrainConfig cfg = tiny_config();
    cfg.optimizer = opt;
    cfg.lr = 0.0;
    TrainState st = TrainState::make(cfg);
    const auto before = snapshot(st.params);
    const auto scenes = make_training_scenes(cfg, world_palette(st.model.vlm, cfg.T));
    train(st, scenes, cfg);
    CHECK(snapshot(st.params) == before);
  }
}

TEST_CASE("train_step: non-finite values abort with the offending op") {
  TrainConfig cfg = tiny_config();
  TrainState st = TrainState::make(cfg);
  const auto scenes = make_training_scenes(cfg, world_palette(st.model.vlm, cfg.T));
  Tensor w = st.model.fusion.proj.weight;
  w.set(0, NAN);
  try {
    train_step(st, scenes[0], cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    MESSAGE(msg);
    CHECK(msg.find("non-finite") != std::string::npos);
  }
}

TEST_CASE("run_experiment: axis none and unknown axes") {
  TrainConfig cfg = tiny_config();
  cfg.iters = 2;
  cfg.scenes = 1;
  ResultsTable t = run_experiment(cfg, "none");
  CHECK(t.header == std::vector<std::string>{"axis", "value", "miou", "pixel_acc", "train_s", "infer_ms"});
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "none");
  const std::string tsv = t.to_tsv();
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 2);
  CHECK(std::count(tsv.begin(), tsv.end(), '\t') == 10);
  try {
    run_experiment(cfg, "learning_rate");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& a : ablation_axes()) CHECK(msg.find(a) != std::string::npos);
  }
}

TEST_CASE("graymaps: round trip, normalization, label legend") {
  const fs::path dir = scratch_dir("pgm");
  GrayImage img{3, 2, {0, 10, 255, 7, 128, 3}};
  write_pgm(dir / "a.pgm", img);
  GrayImage back = read_pgm(dir / "a.pgm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.pixels == img.pixels);

  GrayImage n = normalized_gray({-1.0, 0.0, 1.0, 0.5}, 2, 2);
  CHECK(n.pixels == std::vector<unsigned char>{0, 128, 255, 191});
  CHECK(normalized_gray({2.0, 2.0}, 2, 1).pixels == std::vector<unsigned char>{0, 0});

  write_label_map(dir / "labels.pgm", {0, 1, 2, 1}, 2, 2, {"bg", "red", "blue"});
  CHECK(read_pgm(dir / "labels.pgm").pixels == std::vector<unsigned char>{0, 1, 2, 1});
  std::ifstream legend(dir / "labels.txt");
  std::string line;
  std::getline(legend, line);
  CHECK(line == "0\tbg");
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), InputError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip restores identical predictions") {
  const fs::path dir = scratch_dir("ckpt");
  TrainConfig cfg = tiny_config();
  cfg.model.kernel_size = 5;
  TrainState st = TrainState::make(cfg);
  const auto scenes = make_training_scenes(cfg, world_palette(st.model.vlm, cfg.T));
  train(st, scenes, cfg);
  save_model(dir, st.model, cfg);
  auto [cfg2, model2] = load_model(dir);
  CHECK(config_to_string(cfg2) == config_to_string(cfg));
  CHECK(snapshot(model2.parameters()) == snapshot(st.params));
  CHECK(infer(model2, scenes[0].image, scenes[0].vocabulary).labels ==
        infer(st.model, scenes[0].image, scenes[0].vocabulary).labels);
  fs::remove_all(dir);
}

TEST_CASE("export_pseudomasks: one graymap per image, category and kind") {
  const fs::path dir = scratch_dir("export");
  TrainConfig cfg = tiny_config();
  Model m = Model::make(cfg.model);
  const auto scenes = make_training_scenes(cfg, world_palette(m.vlm, cfg.T));
  const auto paths = export_pseudomasks(m, scenes, dir);
  CHECK(paths.size() == 2 * scenes.size() * 3);
  CHECK(fs::exists(dir / "gcs_000_00.pgm"));
  CHECK(fs::exists(dir / "lcs_001_02.pgm"));
  GrayImage g = read_pgm(dir / "gcs_001_01.pgm");
  CHECK(g.width == 16);
  CHECK(g.height == 16);
  fs::remove_all(dir);
}

TEST_CASE("top_decile_iou: exact and disjoint cases") {
  std::vector<double> plane(20, 0.0);
  std::vector<int> mask(20, 0);
  plane[3] = plane[7] = 1.0;
  mask[3] = mask[7] = 5;
  CHECK(top_decile_iou(plane, mask, 5) == 1.0);
  CHECK(top_decile_iou(plane, mask, 4) == 0.0);
  mask[9] = 5;
  CHECK(top_decile_iou(plane, mask, 5) == doctest::Approx(2.0 / 3));
}
