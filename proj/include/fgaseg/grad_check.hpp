#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fgaseg/tensor.hpp"

namespace fgaseg {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-3;
  // Coordinates sampled per parameter; tensors this small or smaller are
  // checked exhaustively.
  int max_coords = 16;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error, so exact-zero gradients
  // compare on an absolute scale.
  double abs_floor = 1e-5;
};

struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t coords_checked = 0;
};

struct GradReport {
  double max_rel_error = 0.0;
  double eps = 0.0;
  bool pass = false;
  std::vector<ParamGradError> params;
  std::string failure;
};

/// Compares reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / 2eps. The loss and parameters are evaluated in
/// 64-bit for the duration of the check and restored afterwards. Parameters
/// that do not require grad are skipped and get no report entry.
GradReport grad_check(const std::function<Tensor()>& loss_fn, const std::vector<NamedTensor>& params,
                      const GradCheckOptions& opts = {});

}  // namespace fgaseg
