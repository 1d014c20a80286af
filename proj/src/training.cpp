#include "fgaseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "fgaseg/tensor_io.hpp"

namespace fgaseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects on/off, got '" + v + "'");
}

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

std::string fixed(double x, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (lambda_align < 0 || lambda_auxi < 0) throw ConfigError("loss weights must be >= 0");
  if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
  if (optimizer != "sgd" && optimizer != "adam") throw ConfigError("optimizer must be sgd or adam");
  if (T < 2) throw ConfigError("T must be >= 2");
  if (scenes < 1 || iters < 0) throw ConfigError("scenes must be >= 1 and iters >= 0");
  if (image_size % model.vlm.patch != 0) throw ConfigError("image_size must be a multiple of patch");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
}

void apply_setting(TrainConfig& cfg, const std::string& key0, const std::string& value0) {
  const std::string key = trim(key0), v = trim(value0);
  auto& m = cfg.model;
  if (key == "lambda_align") cfg.lambda_align = parse_double(key, v);
  else if (key == "lambda_auxi") cfg.lambda_auxi = parse_double(key, v);
  else if (key == "lr") cfg.lr = parse_double(key, v);
  else if (key == "momentum") cfg.momentum = parse_double(key, v);
  else if (key == "optimizer") cfg.optimizer = v;
  else if (key == "iters") cfg.iters = parse_int(key, v);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "init_seed") m.init_seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "vlm_seed") m.vlm.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "T") cfg.T = parse_int(key, v);
  else if (key == "scenes") cfg.scenes = parse_int(key, v);
  else if (key == "image_size") cfg.image_size = parse_int(key, v);
  else if (key == "top_k") cfg.top_k = parse_int(key, v);
  else if (key == "fast_mode") cfg.fast_mode = parse_bool(key, v);
  else if (key == "C") m.vlm.C = m.vlm.d = parse_int(key, v);
  else if (key == "patch") m.vlm.patch = parse_int(key, v);
  else if (key == "tau") m.vlm.tau = parse_double(key, v);
  else if (key == "N") m.p2t_layers = parse_int(key, v);
  else if (key == "heads") m.p2t_heads = parse_int(key, v);
  else if (key == "gamma") {
    if (v == "trainable") {
      m.gamma_trainable = true;
    } else {
      m.gamma_trainable = false;
      m.gamma = parse_double(key, v);
    }
  } else if (key == "gamma_init") m.gamma = parse_double(key, v);
  else if (key == "t2p_kernel") m.t2p_kernel = parse_int(key, v);
  else if (key == "K") m.kernel_size = parse_int(key, v);
  else if (key == "kernel_norm") m.kernel_norm = parse_bool(key, v);
  else if (key == "d_f") m.d_f = parse_int(key, v);
  else if (key == "agg_heads") m.agg_heads = parse_int(key, v);
  else if (key == "window") m.window = parse_int(key, v);
  else if (key == "N_d") m.decoder_stages = parse_int(key, v);
  else if (key == "guidance_channels") m.guidance_channels = parse_int(key, v);
  else if (key == "aux_hidden") m.aux_hidden = parse_int(key, v);
  else if (key == "merge_mode") m.merge_mode = parse_merge_mode(v);
  else {
    std::string all;
    for (const auto& k : config_keys()) all += (all.empty() ? "" : ", ") + k;
    throw ConfigError("config: unknown key '" + key + "' (valid: " + all + ")");
  }
}

std::vector<std::string> config_keys() {
  return {"lambda_align", "lambda_auxi", "lr",         "momentum", "optimizer",  "iters",   "seed",
          "init_seed",    "vlm_seed",    "T",          "scenes",   "image_size", "top_k",   "fast_mode",
          "C",            "patch",       "tau",        "N",        "heads",      "gamma",   "gamma_init",
          "t2p_kernel",   "K",           "kernel_norm", "d_f",     "agg_heads",  "window",  "N_d",
          "guidance_channels", "aux_hidden", "merge_mode"};
}

void load_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
}

std::string config_to_string(const TrainConfig& cfg) {
  const auto& m = cfg.model;
  std::ostringstream os;
  os << "lambda_align = " << fmt(cfg.lambda_align) << '\n'
     << "lambda_auxi = " << fmt(cfg.lambda_auxi) << '\n'
     << "lr = " << fmt(cfg.lr) << '\n'
     << "momentum = " << fmt(cfg.momentum) << '\n'
     << "optimizer = " << cfg.optimizer << '\n'
     << "iters = " << cfg.iters << '\n'
     << "seed = " << cfg.seed << '\n'
     << "init_seed = " << m.init_seed << '\n'
     << "vlm_seed = " << m.vlm.seed << '\n'
     << "T = " << cfg.T << '\n'
     << "scenes = " << cfg.scenes << '\n'
     << "image_size = " << cfg.image_size << '\n'
     << "top_k = " << cfg.top_k << '\n'
     << "fast_mode = " << (cfg.fast_mode ? "on" : "off") << '\n'
     << "C = " << m.vlm.C << '\n'
     << "patch = " << m.vlm.patch << '\n'
     << "tau = " << fmt(m.vlm.tau) << '\n'
     << "N = " << m.p2t_layers << '\n'
     << "heads = " << m.p2t_heads << '\n'
     << "gamma = " << (m.gamma_trainable ? std::string("trainable") : fmt(m.gamma)) << '\n'
     << "gamma_init = " << fmt(m.gamma) << '\n'
     << "t2p_kernel = " << m.t2p_kernel << '\n'
     << "K = " << m.kernel_size << '\n'
     << "kernel_norm = " << (m.kernel_norm ? "on" : "off") << '\n'
     << "d_f = " << m.d_f << '\n'
     << "agg_heads = " << m.agg_heads << '\n'
     << "window = " << m.window << '\n'
     << "N_d = " << m.decoder_stages << '\n'
     << "guidance_channels = " << m.guidance_channels << '\n'
     << "aux_hidden = " << m.aux_hidden << '\n'
     << "merge_mode = " << merge_mode_name(m.merge_mode) << '\n';
  return os.str();
}

std::vector<CategoryStyle> aligned_palette(const ToyVlm& vlm, std::int64_t count, double min_dist) {
  if (count < 1) throw ConfigError("aligned_palette: count must be positive");
  constexpr int kLevels = 8;
  constexpr int kCandidates = kLevels * kLevels * kLevels;
  const std::int64_t p = vlm.config().patch;
  std::vector<std::array<double, 3>> colors(kCandidates);
  std::vector<double> pix(static_cast<std::size_t>(kCandidates * 3 * p * p));
  for (int i = 0; i < kCandidates; ++i) {
    colors[static_cast<std::size_t>(i)] = {(i / 64) / 7.0, ((i / 8) % 8) / 7.0, (i % 8) / 7.0};
    for (int c = 0; c < 3; ++c) {
      std::fill_n(pix.begin() + (i * 3 + c) * p * p, p * p, colors[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
    }
  }
  NoGradGuard no_grad;
  const auto feats = vlm.encode_image(Tensor::from_values({kCandidates, 3, p, p}, pix)).final.to_vector();
  const std::int64_t C = vlm.config().C;
  std::vector<std::vector<double>> text;
  for (std::int64_t id = 0; id < count; ++id) text.push_back(hash_text_embedding(id, vlm.config().seed, C));

  std::vector<std::vector<double>> cosine(kCandidates, std::vector<double>(static_cast<std::size_t>(count)));
  for (int i = 0; i < kCandidates; ++i) {
    const double* f = feats.data() + i * C;
    double nf = 0;
    for (std::int64_t c = 0; c < C; ++c) nf += f[c] * f[c];
    nf = std::max(std::sqrt(nf), 1e-8);
    for (std::int64_t id = 0; id < count; ++id) {
      double dot = 0;
      for (std::int64_t c = 0; c < C; ++c) dot += f[c] * text[static_cast<std::size_t>(id)][static_cast<std::size_t>(c)];
      cosine[static_cast<std::size_t>(i)][static_cast<std::size_t>(id)] = dot / nf;
    }
  }

  std::vector<CategoryStyle> out;
  for (std::int64_t id = 0; id < count; ++id) {
    int best = -1;
    double best_margin = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < kCandidates; ++i) {
      const auto& col = colors[static_cast<std::size_t>(i)];
      bool far = true;
      for (const auto& s : out) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) d2 += (col[static_cast<std::size_t>(c)] - s.rgb[static_cast<std::size_t>(c)]) *
                                          (col[static_cast<std::size_t>(c)] - s.rgb[static_cast<std::size_t>(c)]);
        far = far && std::sqrt(d2) >= min_dist;
      }
      if (!far) continue;
      const auto& row = cosine[static_cast<std::size_t>(i)];
      double rival = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < count; ++j) {
        if (j != id) rival = std::max(rival, row[static_cast<std::size_t>(j)]);
      }
      const double margin = count > 1 ? row[static_cast<std::size_t>(id)] - rival : row[static_cast<std::size_t>(id)];
      if (margin > best_margin) {
        best_margin = margin;
        best = i;
      }
    }
    if (best < 0) throw ConfigError("aligned_palette: ran out of distinct colors at id " + std::to_string(id));
    out.push_back({id % 2 == 1 ? ShapeKind::Ellipse : ShapeKind::Rect, colors[static_cast<std::size_t>(best)]});
  }
  return out;
}

std::vector<CategoryStyle> world_palette(const ToyVlm& vlm, std::int64_t T) {
  return aligned_palette(vlm, std::max<std::int64_t>(8, T));
}

namespace {

struct Box {
  std::int64_t x0, y0, w, h;
  int label;
};

bool overlaps(const Box& a, const Box& b) {
  return a.x0 < b.x0 + b.w && b.x0 < a.x0 + a.w && a.y0 < b.y0 + b.h && b.y0 < a.y0 + a.h;
}

bool inside(const Box& b, ShapeKind kind, std::int64_t x, std::int64_t y) {
  if (x < b.x0 || x >= b.x0 + b.w || y < b.y0 || y >= b.y0 + b.h) return false;
  if (kind == ShapeKind::Rect) return true;
  const double rx = b.w / 2.0, ry = b.h / 2.0;
  const double dx = (x + 0.5 - b.x0 - rx) / rx, dy = (y + 0.5 - b.y0 - ry) / ry;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace

SyntheticScene gen_synthetic_scene(const std::vector<CategoryStyle>& palette, std::uint64_t seed, std::int64_t T,
                                   std::int64_t H, std::int64_t W, const SceneOptions& opts) {
  if (T < 2) throw ConfigError("gen_synthetic_scene: T must be >= 2");
  if (static_cast<std::int64_t>(palette.size()) < T) throw ConfigError("gen_synthetic_scene: palette smaller than T");
  if (H % opts.patch != 0 || W % opts.patch != 0) {
    throw ConfigError("gen_synthetic_scene: image sides must be multiples of the patch size");
  }
  if (opts.required >= T) throw ConfigError("gen_synthetic_scene: required category outside vocabulary");
  const std::int64_t p = opts.patch;
  std::vector<std::int64_t> sizes;
  for (std::int64_t s = (opts.min_size + p - 1) / p * p; s <= opts.max_size; s += p) {
    if (s <= H && s <= W) sizes.push_back(s);
  }
  if (sizes.empty()) throw ConfigError("gen_synthetic_scene: no object size fits the image");

  std::vector<Box> boxes;
  std::uint64_t sub = 0;
  for (;; ++sub) {
    Rng rng(splitmix64(seed) + sub);
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 4);
    boxes.clear();
    for (int attempt = 0; attempt < 100 && static_cast<std::int64_t>(boxes.size()) < n; ++attempt) {
      const bool first_required = boxes.empty() && opts.required > 0;
      const int label = first_required ? static_cast<int>(opts.required)
                                       : 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(T - 1));
      std::vector<std::int64_t> allowed = sizes;
      if (first_required) {
        std::erase_if(allowed, [](std::int64_t s) { return s < 20; });
        if (allowed.empty()) allowed = sizes;
      }
      const std::int64_t w = allowed[rng() % allowed.size()], h = allowed[rng() % allowed.size()];
      const std::int64_t x0 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>((W - w) / p + 1)) * p;
      const std::int64_t y0 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>((H - h) / p + 1)) * p;
      const Box b{x0, y0, w, h, label};
      if (std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) { return overlaps(b, o); })) boxes.push_back(b);
    }
    if (static_cast<std::int64_t>(boxes.size()) == n) break;
  }

  SyntheticScene s;
  s.height = H;
  s.width = W;
  for (std::int64_t t = 0; t < T; ++t) s.vocabulary.push_back(t);
  s.mask.assign(static_cast<std::size_t>(H * W), 0);
  for (const auto& b : boxes) {
    const ShapeKind kind = palette[static_cast<std::size_t>(b.label)].shape;
    for (std::int64_t y = b.y0; y < b.y0 + b.h; ++y) {
      for (std::int64_t x = b.x0; x < b.x0 + b.w; ++x) {
        if (inside(b, kind, x, y)) s.mask[static_cast<std::size_t>(y * W + x)] = b.label;
      }
    }
  }
  Rng noise_rng(splitmix64(seed ^ 0x5DEECE66DULL) + sub);
  std::normal_distribution<double> noise(0.0, opts.noise);
  std::vector<double> img(static_cast<std::size_t>(3 * H * W));
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < H * W; ++i) {
      const double base = palette[static_cast<std::size_t>(s.mask[static_cast<std::size_t>(i)])].rgb[static_cast<std::size_t>(c)];
      img[static_cast<std::size_t>(c * H * W + i)] = std::clamp(base + noise(noise_rng), 0.0, 1.0);
    }
  }
  s.image = Tensor::from_values({1, 3, H, W}, img);
  return s;
}

std::vector<SyntheticScene> make_training_scenes(const TrainConfig& cfg, const std::vector<CategoryStyle>& palette) {
  std::vector<SyntheticScene> out;
  SceneOptions opts;
  opts.patch = cfg.model.vlm.patch;
  for (std::int64_t i = 0; i < cfg.scenes; ++i) {
    out.push_back(gen_synthetic_scene(palette, splitmix64(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i)),
                                      cfg.T, cfg.image_size, cfg.image_size, opts));
  }
  return out;
}

LossBreakdown overall_loss(const Tensor& Y, const Tensor& Y_auxi, const Tensor& O_align, const std::vector<int>& labels,
                           double lambda_align, double lambda_auxi) {
  Tensor ce = cross_entropy(Y, labels);
  Tensor align = t2p_loss(O_align, labels);
  Tensor auxi = aux_loss(Y_auxi, labels);
  LossBreakdown out;
  out.total = add(add(ce, scale(align, lambda_align)), scale(auxi, lambda_auxi));
  out.ce = ce.item();
  out.align = align.item();
  out.auxi = auxi.item();
  return out;
}

Optimizer::Optimizer(ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)), kind_(cfg.optimizer), lr_(cfg.lr), momentum_(cfg.momentum) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    if (kind_ == "adam") v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
}

void Optimizer::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void Optimizer::step() {
  ++t_;
  const double b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(momentum_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor t = params_[i].tensor;
    if (!t.has_grad()) continue;
    if (t.dtype() != DType::F32) throw std::logic_error("optimizer: parameters must be 32-bit");
    auto w = t.span<float>();
    const float* g = t.raw().grad.data<float>();
    auto& m = m_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (kind_ == "adam") {
        auto& v = v_[i];
        m[j] = static_cast<float>(momentum_ * m[j] + (1.0 - momentum_) * g[j]);
        v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * g[j] * g[j]);
        w[j] -= static_cast<float>(lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps));
      } else {
        m[j] = static_cast<float>(momentum_ * m[j] + g[j]);
        w[j] -= static_cast<float>(lr_ * m[j]);
      }
    }
  }
}

TrainState TrainState::make(const TrainConfig& cfg) {
  cfg.validate();
  Model model = Model::make(cfg.model);
  ParamList params = model.parameters();
  Optimizer opt(params, cfg);
  return {std::move(model), std::move(params), std::move(opt)};
}

LossRecord train_step(TrainState& state, const SyntheticScene& scene, const TrainConfig& cfg) {
  state.opt.zero_grad();
  ForwardResult r = forward(state.model, scene.image, scene.vocabulary, scene.height, scene.width);
  LossBreakdown loss = overall_loss(r.Y, r.Y_auxi, r.align.O_align, scene.mask, cfg.lambda_align, cfg.lambda_auxi);
  const double total = loss.total.item();
  if (!std::isfinite(total)) throw NumericError("train_step: non-finite total loss");
  loss.total.backward();
  state.opt.step();
  return {total, loss.ce, loss.align, loss.auxi};
}

TrainResult train(TrainState& state, const std::vector<SyntheticScene>& scenes, const TrainConfig& cfg,
                  const std::function<void(std::int64_t, const LossRecord&)>& on_step) {
  if (scenes.empty()) throw InputError("train: no scenes");
  TrainResult res;
  const auto start = std::chrono::steady_clock::now();
  for (std::int64_t it = 0; it < cfg.iters; ++it) {
    const auto& scene = scenes[static_cast<std::size_t>(it) % scenes.size()];
    res.trace.push_back(train_step(state, scene, cfg));
    if (on_step) on_step(it, res.trace.back());
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

GradReport model_grad_check(const TrainConfig& base, std::uint64_t seed, const GradCheckOptions& opts) {
  TrainConfig cfg = base;
  cfg.T = 3;
  cfg.image_size = 16;
  cfg.model.vlm.C = cfg.model.vlm.d = 8;
  cfg.model.d_f = 8;
  cfg.model.init_seed = seed;
  cfg.validate();
  const Model model = Model::make(cfg.model);
  SceneOptions so;
  so.min_size = 4;
  so.max_size = 8;
  const SyntheticScene scene = gen_synthetic_scene(world_palette(model.vlm, cfg.T), seed, cfg.T, 16, 16, so);
  auto loss_fn = [&] {
    ForwardResult r = forward(model, scene.image, scene.vocabulary, 16, 16);
    return overall_loss(r.Y, r.Y_auxi, r.align.O_align, scene.mask, cfg.lambda_align, cfg.lambda_auxi).total;
  };
  return grad_check(loss_fn, model.parameters(), opts);
}

MiouResult miou(const std::vector<int>& pred, const std::vector<int>& gt, std::int64_t T) {
  if (pred.size() != gt.size()) throw DimensionError("miou: prediction and ground truth sizes differ");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(T), 0), uni(static_cast<std::size_t>(T), 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int a = pred[i], b = gt[i];
    if (a == b && a >= 0 && a < T) {
      ++inter[static_cast<std::size_t>(a)];
      ++uni[static_cast<std::size_t>(a)];
      continue;
    }
    if (a >= 0 && a < T) ++uni[static_cast<std::size_t>(a)];
    if (b >= 0 && b < T) ++uni[static_cast<std::size_t>(b)];
  }
  MiouResult r;
  double total = 0;
  int counted = 0;
  for (std::int64_t t = 0; t < T; ++t) {
    if (uni[static_cast<std::size_t>(t)] == 0) {
      r.iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double v = static_cast<double>(inter[static_cast<std::size_t>(t)]) / static_cast<double>(uni[static_cast<std::size_t>(t)]);
    r.iou.push_back(v);
    total += v;
    ++counted;
  }
  r.mean = counted ? total / counted : 0.0;
  return r;
}

double pixel_accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("pixel_accuracy: sizes differ");
  if (gt.empty()) return 0.0;
  std::int64_t ok = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) ok += pred[i] == gt[i];
  return static_cast<double>(ok) / static_cast<double>(gt.size());
}

EvalResult evaluate(const Model& model, const std::vector<SyntheticScene>& scenes, std::optional<std::int64_t> top_k,
                    const std::vector<std::int64_t>& vocabulary) {
  EvalResult r;
  std::vector<int> all_pred, all_gt;
  std::int64_t T = 0;
  double ms = 0;
  for (const auto& s : scenes) {
    const auto& vocab = vocabulary.empty() ? s.vocabulary : vocabulary;
    T = std::max<std::int64_t>(T, static_cast<std::int64_t>(vocab.size()));
    const auto t0 = std::chrono::steady_clock::now();
    InferResult out = infer(model, s.image, vocab, top_k);
    ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    all_pred.insert(all_pred.end(), out.labels.begin(), out.labels.end());
    all_gt.insert(all_gt.end(), s.mask.begin(), s.mask.end());
    r.predictions.push_back(std::move(out.labels));
  }
  r.pixel_acc = pixel_accuracy(all_pred, all_gt);
  r.miou = miou(all_pred, all_gt, T).mean;
  r.infer_ms = scenes.empty() ? 0.0 : ms / static_cast<double>(scenes.size());
  return r;
}

std::string ResultsTable::to_tsv() const {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "\t" : "") << cells[i];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

std::vector<std::string> ablation_axes() {
  return {"none", "kernel_size", "top_n", "gamma", "lambda_align", "p2t_layers", "kernel_norm", "decoder"};
}

namespace {

struct Variant {
  std::string label;
  std::vector<std::pair<std::string, std::string>> settings;
};

std::vector<Variant> axis_grid(const std::string& axis) {
  std::vector<Variant> g;
  auto single = [&](const std::string& key, const std::vector<std::string>& values) {
    for (const auto& v : values) g.push_back({v, {{key, v}}});
  };
  if (axis == "none") g.push_back({"default", {}});
  else if (axis == "kernel_size") single("K", {"1", "3", "5", "7", "9", "11", "13", "15"});
  else if (axis == "gamma") single("gamma", {"trainable", "0.01", "0.1", "0.5", "1", "5"});
  else if (axis == "lambda_align") single("lambda_align", {"0.002", "0.005", "0.02", "0.2", "0.5", "1", "5"});
  else if (axis == "p2t_layers") single("N", {"1", "2", "3", "4", "5", "6", "7"});
  else if (axis == "kernel_norm") single("kernel_norm", {"off", "on"});
  else if (axis == "decoder") {
    g.push_back({"Fast+Cat", {{"fast_mode", "on"}, {"merge_mode", "cat"}}});
    g.push_back({"Fast+Add", {{"fast_mode", "on"}, {"merge_mode", "add"}}});
    g.push_back({"NoFast+Cat", {{"fast_mode", "off"}, {"merge_mode", "cat"}}});
    g.push_back({"NoFast+Add", {{"fast_mode", "off"}, {"merge_mode", "add"}}});
  } else if (axis == "top_n") {
    single("top_k", {"1", "4", "8", "16", "32"});
  } else {
    std::string all;
    for (const auto& a : ablation_axes()) all += (all.empty() ? "" : ", ") + a;
    throw ConfigError("unknown ablation axis '" + axis + "' (valid: " + all + ")");
  }
  return g;
}

}  // namespace

ResultsTable run_experiment(const TrainConfig& base, const std::string& axis,
                            const std::function<void(const std::string&)>& log) {
  const auto grid = axis_grid(axis);
  base.validate();
  ResultsTable table;
  table.header = {"axis", "value", "miou", "pixel_acc", "train_s", "infer_ms"};
  const ToyVlm vlm(base.model.vlm);
  const auto palette = world_palette(vlm, base.T);
  const auto scenes = make_training_scenes(base, palette);

  if (axis == "top_n") {
    // One model; the vocabulary is widened with unseen ids up to the largest k.
    TrainState state = TrainState::make(base);
    const TrainResult tr = train(state, scenes, base);
    std::vector<std::int64_t> vocab;
    for (std::int64_t id = 0; id < std::max<std::int64_t>(32, base.T); ++id) vocab.push_back(id);
    for (const auto& v : grid) {
      const std::int64_t k = std::stoll(v.label);
      const EvalResult ev = evaluate(state.model, scenes, k, vocab);
      table.rows.push_back({axis, v.label, fixed(ev.miou, 4), fixed(ev.pixel_acc, 4), fixed(tr.seconds, 2),
                            fixed(ev.infer_ms, 3)});
      if (log) log(axis + "=" + v.label + " miou=" + fixed(ev.miou, 4) + " infer_ms=" + fixed(ev.infer_ms, 3));
    }
    return table;
  }

  for (const auto& v : grid) {
    TrainConfig cfg = base;
    for (const auto& [k, val] : v.settings) apply_setting(cfg, k, val);
    TrainState state = TrainState::make(cfg);
    const TrainResult tr = train(state, scenes, cfg);
    const EvalResult ev =
        evaluate(state.model, scenes, cfg.fast_mode ? std::optional<std::int64_t>(cfg.top_k) : std::nullopt);
    table.rows.push_back({axis, v.label, fixed(ev.miou, 4), fixed(ev.pixel_acc, 4), fixed(tr.seconds, 2),
                          fixed(ev.infer_ms, 3)});
    if (log) log(axis + "=" + v.label + " miou=" + fixed(ev.miou, 4) + " train_s=" + fixed(tr.seconds, 2));
  }
  return table;
}

void save_model(const std::filesystem::path& dir, const Model& model, const TrainConfig& cfg) {
  save_checkpoint(dir, model.parameters());
  std::ofstream out(dir / "config.txt");
  if (!out) throw InputError("save_model: cannot write " + (dir / "config.txt").string());
  out << config_to_string(cfg);
}

std::pair<TrainConfig, Model> load_model(const std::filesystem::path& dir) {
  TrainConfig cfg;
  load_config_file(cfg, dir / "config.txt");
  Model model = Model::make(cfg.model);
  const auto stored = load_checkpoint(dir);
  std::map<std::string, Tensor> by_name;
  for (const auto& nt : stored) by_name[nt.name] = nt.tensor;
  for (const auto& p : model.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw InputError("load_model: checkpoint lacks " + p.name);
    if (it->second.shape() != p.tensor.shape()) {
      throw InputError("load_model: shape mismatch for " + p.name + ": " + shape_str(it->second.shape()) + " vs " +
                       shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    t.copy_from(it->second);
  }
  return {cfg, std::move(model)};
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("write_pgm: cannot open " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("read_pgm: cannot open " + path.string());
  std::string magic;
  GrayImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || img.width <= 0 || img.height <= 0) {
    throw InputError("read_pgm: unsupported graymap " + path.string());
  }
  in.get();
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw InputError("read_pgm: truncated " + path.string());
  return img;
}

GrayImage normalized_gray(const std::vector<double>& plane, std::int64_t width, std::int64_t height) {
  GrayImage img{width, height, std::vector<unsigned char>(plane.size(), 0)};
  if (plane.empty()) return img;
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double span = *hi - *lo;
  if (span <= 0) return img;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    img.pixels[i] = static_cast<unsigned char>(std::lround(255.0 * (plane[i] - *lo) / span));
  }
  return img;
}

void write_label_map(const std::filesystem::path& pgm, const std::vector<int>& labels, std::int64_t width,
                     std::int64_t height, const std::vector<std::string>& names) {
  GrayImage img{width, height, {}};
  for (int l : labels) {
    if (l < 0 || l > 255) throw InputError("write_label_map: label outside 0..255");
    img.pixels.push_back(static_cast<unsigned char>(l));
  }
  write_pgm(pgm, img);
  std::filesystem::path legend = pgm;
  legend.replace_extension(".txt");
  std::ofstream out(legend);
  for (std::size_t i = 0; i < names.size(); ++i) out << i << '\t' << names[i] << '\n';
}

std::vector<std::filesystem::path> export_pseudomasks(const Model& model, const std::vector<SyntheticScene>& scenes,
                                                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    const Features f = compute_features(model, s.image, s.vocabulary);
    const std::pair<const char*, Tensor> kinds[] = {{"gcs", f.S_g}, {"lcs", f.S_l}};
    for (const auto& [name, vol] : kinds) {
      const std::vector<double> v = bilinear_resize(vol, s.height, s.width).to_vector();
      const std::int64_t plane = s.height * s.width;
      for (std::size_t t = 0; t < s.vocabulary.size(); ++t) {
        std::vector<double> slice_v(v.begin() + static_cast<std::int64_t>(t) * plane,
                                    v.begin() + static_cast<std::int64_t>(t + 1) * plane);
        std::ostringstream fn;
        fn << name << '_' << std::setw(3) << std::setfill('0') << i << '_' << std::setw(2) << t << ".pgm";
        write_pgm(dir / fn.str(), normalized_gray(slice_v, s.width, s.height));
        written.push_back(dir / fn.str());
      }
    }
  }
  return written;
}

double top_decile_iou(const std::vector<double>& plane, const std::vector<int>& mask, int label) {
  if (plane.size() != mask.size() || plane.empty()) throw DimensionError("top_decile_iou: size mismatch");
  const std::size_t n_top = (plane.size() + 9) / 10;
  std::vector<std::size_t> order(plane.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return plane[a] > plane[b]; });
  std::vector<bool> top(plane.size(), false);
  for (std::size_t i = 0; i < n_top; ++i) top[order[i]] = true;
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const bool g = mask[i] == label;
    inter += top[i] && g;
    uni += top[i] || g;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace fgaseg
