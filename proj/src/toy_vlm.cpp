#include "fgaseg/toy_vlm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace fgaseg {

void ToyVlmConfig::validate() const {
  if (C < 1 || patch < 1) throw ConfigError("toy_vlm: C and patch must be positive");
  if (d != C) throw ConfigError("toy_vlm: text dim d must equal C");
  if (!(tau > 0)) throw ConfigError("toy_vlm: tau must be positive");
  for (int g : guidance_layers) {
    if (g < 1 || g >= ToyVlm::kStages) throw ConfigError("toy_vlm: guidance layers must be 1 or 2");
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<double> hash_text_embedding(std::int64_t id, std::uint64_t seed, std::int64_t d) {
  const std::uint64_t key = seed ^ splitmix64(static_cast<std::uint64_t>(id));
  std::vector<double> v(static_cast<std::size_t>(d));
  double norm = 0;
  for (std::int64_t j = 0; j < d; ++j) {
    const double u = static_cast<double>(splitmix64(key + static_cast<std::uint64_t>(j)) >> 11) * 0x1p-53;
    v[static_cast<std::size_t>(j)] = 2.0 * u - 1.0;
    norm += v[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

ToyVlm::ToyVlm(ToyVlmConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  std::int64_t in = 3 * cfg_.patch * cfg_.patch;
  for (auto& s : stages_) {
    s.weight = normal_param({in, cfg_.C}, 4.0 / std::sqrt(static_cast<double>(in)), rng);
    s.bias = normal_param({cfg_.C}, 0.1, rng);
    s.weight.set_requires_grad(false);
    s.bias.set_requires_grad(false);
    in = cfg_.C;
  }
}

VisionFeatures ToyVlm::encode_image(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw DimensionError("encode_image: expected B x 3 x H x W, got " + shape_str(images.shape()));
  }
  const std::int64_t B = images.dim(0), p = cfg_.patch;
  if (images.dim(2) % p != 0 || images.dim(3) % p != 0) {
    throw ConfigError("encode_image: image " + shape_str(images.shape()) + " not divisible by patch " +
                      std::to_string(p));
  }
  const std::int64_t H = images.dim(2) / p, W = images.dim(3) / p;
  NoGradGuard no_grad;
  // Pixels in [0, 1] are centered before the patch projection.
  Tensor x = reshape(add_scalar(images.detach(), -0.5), {B, 3, H, p, W, p});
  x = reshape(permute(x, {0, 2, 4, 1, 3, 5}), {B, H, W, 3 * p * p});
  std::array<Tensor, kStages> outs;
  for (int s = 0; s < kStages; ++s) {
    x = tanh(stages_[static_cast<std::size_t>(s)](x));
    outs[static_cast<std::size_t>(s)] = permute(x, {0, 3, 1, 2});
  }
  VisionFeatures f;
  f.final = outs[kStages - 1];
  for (std::size_t g = 0; g < 2; ++g) {
    f.guidance[g] = outs[static_cast<std::size_t>(cfg_.guidance_layers[g] - 1)];
  }
  return f;
}

TextFeatures ToyVlm::encode_text(const std::vector<std::int64_t>& ids, std::int64_t batch) const {
  if (batch < 1) throw InputError("encode_text: batch must be positive");
  std::set<std::int64_t> seen;
  for (auto id : ids) {
    if (id < 0) throw InputError("encode_text: negative category id " + std::to_string(id));
    if (!seen.insert(id).second) throw InputError("encode_text: duplicate category id " + std::to_string(id));
  }
  const auto T = static_cast<std::int64_t>(ids.size());
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(batch * T * cfg_.d));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (auto id : ids) {
      auto v = hash_text_embedding(id, cfg_.seed, cfg_.d);
      rows.insert(rows.end(), v.begin(), v.end());
    }
  }
  return {Tensor::from_values({batch, T, cfg_.d}, rows)};
}

std::uint64_t ToyVlm::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Tensor& t) {
    for (float f : t.to_floats()) {
      unsigned char bytes[sizeof(float)];
      std::memcpy(bytes, &f, sizeof(float));
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& s : stages_) {
    mix(s.weight);
    mix(s.bias);
  }
  return h;
}

Tensor contrastive_loss(const Tensor& sim, double tau) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) {
    throw DimensionError("contrastive_loss: expected a square matrix, got " + shape_str(sim.shape()));
  }
  if (!(tau > 0)) throw ConfigError("contrastive_loss: tau must be positive");
  const std::int64_t N = sim.dim(0);
  Tensor e = exp(scale(sim, 1.0 / tau));
  Tensor den = add(sum(e, 1), sum(e, 0));
  std::vector<std::int64_t> diag_idx(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) diag_idx[static_cast<std::size_t>(i)] = i * N + i;
  Tensor diag = index_select(reshape(sim, {N * N}), 0, diag_idx);
  Tensor terms = sub(scale(diag, 1.0 / tau), log(den));
  return scale(mean(terms), -1.0);
}

Vocabulary read_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_vocabulary: cannot open " + path);
  Vocabulary vocab;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InputError(path + ":" + std::to_string(lineno) + ": expected id<TAB>name");
    }
    std::int64_t id = 0;
    try {
      id = std::stoll(line.substr(0, tab));
    } catch (const std::exception&) {
      throw InputError(path + ":" + std::to_string(lineno) + ": bad category id");
    }
    vocab.emplace_back(id, line.substr(tab + 1));
  }
  return vocab;
}

void write_vocabulary(const std::string& path, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw InputError("write_vocabulary: cannot open " + path);
  for (const auto& [id, name] : vocab) out << id << '\t' << name << '\n';
}

}  // namespace fgaseg
