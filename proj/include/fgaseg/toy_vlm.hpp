#pragma once

// Frozen stand-ins for the image and text towers of a vision-language model.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fgaseg/nn.hpp"

namespace fgaseg {

struct ToyVlmConfig {
  std::uint64_t seed = 0;
  std::int64_t C = 32;
  std::int64_t patch = 4;
  std::int64_t d = 32;
  double tau = 0.07;
  // Encoder stages whose outputs double as vision guidance.
  std::array<int, 2> guidance_layers{1, 2};

  void validate() const;
};

struct VisionFeatures {
  Tensor final;                    // B x C x H x W
  std::array<Tensor, 2> guidance;  // B x C x H x W each
};

struct TextFeatures {
  Tensor embeddings;  // B x T x d
};

std::uint64_t splitmix64(std::uint64_t x);

/// Unit-norm text vector for one category id:
/// u_j = (splitmix64((seed ^ splitmix64(id)) + j) >> 11) * 2^-53, v_j = 2 u_j - 1,
/// then v / ||v||.
std::vector<double> hash_text_embedding(std::int64_t id, std::uint64_t seed, std::int64_t d);

class ToyVlm {
 public:
  static constexpr int kStages = 3;

  explicit ToyVlm(ToyVlmConfig cfg = {});

  const ToyVlmConfig& config() const { return cfg_; }
  /// images B x 3 x H_img x W_img; sides must be multiples of the patch size.
  VisionFeatures encode_image(const Tensor& images) const;
  /// Ids must be unique and non-negative. Rows repeat over the batch.
  TextFeatures encode_text(const std::vector<std::int64_t>& ids, std::int64_t batch) const;
  const std::array<Linear, kStages>& stages() const { return stages_; }
  /// FNV-1a over the encoder weights.
  std::uint64_t checksum() const;

 private:
  ToyVlmConfig cfg_;
  std::array<Linear, kStages> stages_;
};

/// Verbatim VLM contrastive objective over an N x N similarity matrix:
/// -(1/N) sum_i log( e^{S_ii/tau} / (sum_j e^{S_ij/tau} + sum_j e^{S_ji/tau}) ).
/// The diagonal term appears in both the row and the column sum.
Tensor contrastive_loss(const Tensor& sim, double tau);

using Vocabulary = std::vector<std::pair<std::int64_t, std::string>>;

/// Plain text, one "id<TAB>name" per line.
Vocabulary read_vocabulary(const std::string& path);
void write_vocabulary(const std::string& path, const Vocabulary& vocab);

}  // namespace fgaseg
