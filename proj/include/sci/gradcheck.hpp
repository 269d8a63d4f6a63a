#ifndef SCI_GRADCHECK_HPP
#define SCI_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sci/nn.hpp"

namespace sci {

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_tensor;
  std::int64_t worst_index = -1;
  double worst_analytic = 0, worst_numeric = 0;
  std::int64_t coordinates = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per tensor; -1 checks every coordinate.
  std::int64_t max_coords_per_tensor = -1;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, so coordinates whose true
  /// derivative vanishes are judged by absolute error.
  double denom_floor = 1e-6;
};

/// Compares tape gradients of a scalar objective against central differences.
///
/// `objective` is re-evaluated for every perturbed coordinate; it must build
/// its graph from the current values of `inputs` each time it is called.
template <class F>
GradCheckReport grad_check(F&& objective, const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                           const GradCheckOptions& opt = {}) {
  if (opt.eps < 1e-5 || opt.eps > 1e-3) throw UsageError("grad_check step must lie in [1e-5, 1e-3]");
  for (const auto& [name, t] : inputs) {
    auto copy = t;
    copy.zero_grad();
  }
  {
    Tape tape;
    Tensor<double> loss = objective();
    if (loss.numel() != 1) throw UsageError("grad_check needs a scalar objective, got " + shape_str(loss.shape()));
    tape.backward(loss);
  }
  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (const auto& [name, t] : inputs) {
    auto handle = t;
    const std::vector<double> analytic =
        handle.has_grad() ? std::vector<double>(handle.grad().begin(), handle.grad().end())
                          : std::vector<double>(static_cast<std::size_t>(handle.numel()), 0.0);
    std::vector<std::int64_t> coords(static_cast<std::size_t>(handle.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.max_coords_per_tensor >= 0 && static_cast<std::int64_t>(coords.size()) > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_tensor));
      std::sort(coords.begin(), coords.end());
    }
    auto values = handle.mutable_data();
    for (auto k : coords) {
      const auto ku = static_cast<std::size_t>(k);
      const double saved = values[ku];
      double fp = 0, fm = 0;
      {
        NoGradGuard guard;
        values[ku] = saved + opt.eps;
        fp = objective().item();
        values[ku] = saved - opt.eps;
        fm = objective().item();
        values[ku] = saved;
      }
      const double numeric = (fp - fm) / (2 * opt.eps);
      const double a = analytic[ku];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      ++report.coordinates;
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = rel;
        report.worst_tensor = name;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

/// Convenience overload over every entry of a parameter set.
template <class F>
GradCheckReport grad_check(F&& objective, const ParamSet<double>& params, const GradCheckOptions& opt = {}) {
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  for (const auto& e : params.entries()) inputs.emplace_back(e.name, e.tensor);
  return grad_check(std::forward<F>(objective), inputs, opt);
}

}  // namespace sci

#endif
