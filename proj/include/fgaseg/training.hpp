#pragma once

// Objective, optimizer loop, synthetic scenes, metrics, experiment sweeps
// and the file formats around them.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fgaseg/model.hpp"

namespace fgaseg {

struct TrainConfig {
  ModelConfig model;
  double lambda_align = 0.02;
  double lambda_auxi = 0.2;
  double lr = 2e-4;
  double momentum = 0.9;
  std::string optimizer = "adam";  // adam | sgd (momentum)
  std::int64_t iters = 300;
  std::uint64_t seed = 0;
  std::int64_t T = 6;
  std::int64_t scenes = 8;
  std::int64_t image_size = 64;
  std::int64_t top_k = 1;
  bool fast_mode = false;

  void validate() const;
};

/// Applies one "key = value" setting; unknown keys raise ConfigError.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Reads a line-based "key = value" file ('#' starts a comment).
void load_config_file(TrainConfig& cfg, const std::filesystem::path& path);
/// Every addressable field, one "key = value" per line.
std::string config_to_string(const TrainConfig& cfg);
std::vector<std::string> config_keys();

enum class ShapeKind { Rect, Ellipse };

struct CategoryStyle {
  ShapeKind shape = ShapeKind::Rect;
  std::array<double, 3> rgb{};
};

/// Colors chosen so each category's uniform patch is, under the toy
/// encoders, closer to its own text embedding than to the other `count - 1`.
/// Colors come from an 8-level RGB grid, pairwise at least min_dist apart.
std::vector<CategoryStyle> aligned_palette(const ToyVlm& vlm, std::int64_t count, double min_dist = 0.25);

/// Styles of the synthetic world: an aligned palette over ids
/// 0..max(8, T)-1, so adding a held-out category never recolors the others.
std::vector<CategoryStyle> world_palette(const ToyVlm& vlm, std::int64_t T);

struct SceneOptions {
  std::int64_t patch = 4;
  double noise = 0.02;
  std::int64_t min_size = 12;
  std::int64_t max_size = 28;
  // Vocabulary index that must appear as an object, or -1.
  std::int64_t required = -1;
};

struct SyntheticScene {
  Tensor image;                         // 1 x 3 x H x W
  std::vector<int> mask;                // H x W vocabulary indices
  std::vector<std::int64_t> vocabulary;  // category ids
  std::int64_t height = 0;
  std::int64_t width = 0;
};

/// 1-4 non-overlapping patch-aligned rectangles/ellipses on a category-0
/// background; vocabulary is ids 0..T-1 and palette[id] gives each style.
SyntheticScene gen_synthetic_scene(const std::vector<CategoryStyle>& palette, std::uint64_t seed, std::int64_t T,
                                   std::int64_t H, std::int64_t W, const SceneOptions& opts = {});

/// The seeded training set for a config.
std::vector<SyntheticScene> make_training_scenes(const TrainConfig& cfg, const std::vector<CategoryStyle>& palette);

struct LossBreakdown {
  Tensor total;
  double ce = 0;
  double align = 0;
  double auxi = 0;
};

/// L_ce + lambda_align * L_align + lambda_auxi * L_auxi.
LossBreakdown overall_loss(const Tensor& Y, const Tensor& Y_auxi, const Tensor& O_align, const std::vector<int>& labels,
                           double lambda_align, double lambda_auxi);

struct LossRecord {
  double total = 0;
  double ce = 0;
  double align = 0;
  double auxi = 0;
};

class Optimizer {
 public:
  Optimizer(ParamList params, const TrainConfig& cfg);
  void step();
  void zero_grad();

 private:
  ParamList params_;
  std::string kind_;
  double lr_, momentum_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct TrainState {
  Model model;
  ParamList params;
  Optimizer opt;

  static TrainState make(const TrainConfig& cfg);
};

LossRecord train_step(TrainState& state, const SyntheticScene& scene, const TrainConfig& cfg);

struct TrainResult {
  std::vector<LossRecord> trace;
  double seconds = 0;
};

TrainResult train(TrainState& state, const std::vector<SyntheticScene>& scenes, const TrainConfig& cfg,
                  const std::function<void(std::int64_t, const LossRecord&)>& on_step = {});

/// grad_check of L_overall over every trainable parameter of a reduced model
/// (T=3, 16x16 image, C=d=d_f=8) built with init seed `seed` on one scene.
GradReport model_grad_check(const TrainConfig& base, std::uint64_t seed, const GradCheckOptions& opts);

struct MiouResult {
  std::vector<double> iou;  // NaN for classes absent from both maps
  double mean = 0;
};

MiouResult miou(const std::vector<int>& pred, const std::vector<int>& gt, std::int64_t T);
double pixel_accuracy(const std::vector<int>& pred, const std::vector<int>& gt);

struct EvalResult {
  double pixel_acc = 0;
  double miou = 0;
  double infer_ms = 0;  // mean per image
  std::vector<std::vector<int>> predictions;
};

/// Labels each scene with `vocabulary` (or the scene's own when empty).
EvalResult evaluate(const Model& model, const std::vector<SyntheticScene>& scenes,
                    std::optional<std::int64_t> top_k = std::nullopt,
                    const std::vector<std::int64_t>& vocabulary = {});

struct ResultsTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_tsv() const;
};

std::vector<std::string> ablation_axes();

/// Sweeps one axis over its grid, training every configuration on the same
/// seeded scenes. Axis "none" is a single run.
ResultsTable run_experiment(const TrainConfig& cfg, const std::string& axis,
                            const std::function<void(const std::string&)>& log = {});

void save_model(const std::filesystem::path& dir, const Model& model, const TrainConfig& cfg);
/// Restores the config and parameters written by save_model.
std::pair<TrainConfig, Model> load_model(const std::filesystem::path& dir);

struct GrayImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<unsigned char> pixels;
};

void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);
/// Min-max normalizes a plane to 0..255 (a constant plane maps to 0).
GrayImage normalized_gray(const std::vector<double>& plane, std::int64_t width, std::int64_t height);
/// Label-index graymap plus "index<TAB>name" legend next to it.
void write_label_map(const std::filesystem::path& pgm, const std::vector<int>& labels, std::int64_t width,
                     std::int64_t height, const std::vector<std::string>& names);

/// Writes gcs_<image>_<category>.pgm and lcs_<image>_<category>.pgm for
/// every scene and vocabulary entry, resized to image resolution.
/// Returns the written paths.
std::vector<std::filesystem::path> export_pseudomasks(const Model& model, const std::vector<SyntheticScene>& scenes,
                                                      const std::filesystem::path& dir);

/// Intersection over union between the top-decile pixels of `plane` and the
/// pixels where mask == label.
double top_decile_iou(const std::vector<double>& plane, const std::vector<int>& mask, int label);

}  // namespace fgaseg
