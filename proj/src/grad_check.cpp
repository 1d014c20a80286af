#include "fgaseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace fgaseg {

namespace {

// Casts parameters to F64 and restores their original precision on exit.
class PromoteParams {
 public:
  explicit PromoteParams(const std::vector<NamedTensor>& params) : params_(params) {
    for (const auto& p : params_) {
      saved_.push_back(p.tensor.dtype());
      Tensor t = p.tensor;
      t.cast_(DType::F64);
    }
  }
  ~PromoteParams() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].tensor;
      t.zero_grad();
      t.cast_(saved_[i]);
    }
  }
  PromoteParams(const PromoteParams&) = delete;
  PromoteParams& operator=(const PromoteParams&) = delete;

 private:
  const std::vector<NamedTensor>& params_;
  std::vector<DType> saved_;
};

}  // namespace

GradReport grad_check(const std::function<Tensor()>& loss_fn, const std::vector<NamedTensor>& params,
                      const GradCheckOptions& opts) {
  if (!(opts.eps > 0)) throw ConfigError("grad_check: eps must be positive");
  GradReport report;
  report.eps = opts.eps;

  PrecisionScope precision(DType::F64);
  PromoteParams promote(params);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }

  Tensor loss;
  try {
    loss = loss_fn();
  } catch (const NumericError& e) {
    report.failure = std::string("non-finite loss at the unperturbed point: ") + e.what();
    return report;
  }
  loss.backward();

  std::mt19937_64 rng(opts.seed);
  double worst = 0.0;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.requires_grad()) continue;
    const std::int64_t n = t.numel();
    const std::vector<double> analytic = t.has_grad() ? t.grad().to_vector() : std::vector<double>(static_cast<std::size_t>(n), 0.0);

    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > opts.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opts.max_coords));
      std::sort(coords.begin(), coords.end());
    }

    ParamGradError entry{p.name, 0.0, 0};
    NoGradGuard no_grad;
    for (auto i : coords) {
      const double orig = t.at(i);
      double up = NAN, down = NAN;
      try {
        t.set(i, orig + opts.eps);
        up = loss_fn().item();
        t.set(i, orig - opts.eps);
        down = loss_fn().item();
      } catch (const NumericError&) {
      }
      t.set(i, orig);
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.failure = "non-finite loss perturbing " + p.name + "[" + std::to_string(i) + "]";
        report.params.push_back(entry);
        return report;
      }
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = analytic[static_cast<std::size_t>(i)];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      ++entry.coords_checked;
    }
    worst = std::max(worst, entry.max_rel_error);
    report.params.push_back(entry);
  }
  report.max_rel_error = worst;
  report.pass = worst <= opts.tolerance;
  return report;
}

}  // namespace fgaseg
