#ifndef SCI_UNFOLDING_HPP
#define SCI_UNFOLDING_HPP

#include <functional>
#include <vector>

#include "sci/cassi.hpp"
#include "sci/nn.hpp"

// Generalized alternating projection. Estimates live in the cube domain
// [B,L,H,W]; measurements are [B,1,H~,W].

namespace sci {

/// x = v + A^T (AA^T)^{-1} (y - A v).
template <class S>
HsiCube<S> project(const HsiCube<S>& v, const Measurement<S>& y, const SensingOperator<S>& op);
template <class S>
Tensor<S> project(const SensingOperator<S>& op, const Tensor<S>& v, const Tensor<S>& y);

/// Learned correction of the projection residual r: r + dsc2(gelu(dsc1(r))).
/// dsc2's pointwise layer starts at zero, so the correction starts as r itself.
template <class S>
struct GradientCorrection {
  DscBlock<S> first, second;

  GradientCorrection() = default;
  GradientCorrection(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t bands);
  Tensor<S> operator()(const Tensor<S>& residual) const;
};

/// x = v + GC(A^T (AA^T)^{-1} (y - A v)).
template <class S>
Tensor<S> project_gc(const SensingOperator<S>& op, const Tensor<S>& v, const Tensor<S>& y,
                     const GradientCorrection<S>& gc);

/// Stage denoiser: (x_k, stage index from 0) -> v_{k+1}.
template <class S>
using StageDenoiser = std::function<Tensor<S>(const Tensor<S>&, int)>;

/// K stages of project_gc + denoiser starting from v0 = y_norm. Returns the
/// unclamped final estimate so gradients stay alive.
template <class S>
Tensor<S> run_unfolding(const SensingOperator<S>& op, const Tensor<S>& y,
                        const std::vector<GradientCorrection<S>>& stages, const StageDenoiser<S>& denoiser);

/// Clamps into [0,1] for emitted cubes.
template <class S>
HsiCube<S> clamp_unit(HsiCube<S> x);

/// min_x 0.5||x - f||^2 + weight * TV(x) per band, isotropic TV, by
/// Chambolle's dual projection with a fixed number of iterations.
template <class S>
HsiCube<S> tv_denoise(const HsiCube<S>& f, S weight, int iterations);

struct GapTvOptions {
  int iterations = 50;
  double tv_weight = 0.05;
  int tv_iterations = 10;
  /// Feed the measurement residual back into the projection target
  /// (y_k+1 = y_k + y - A v_k), the usual GAP-TV acceleration.
  bool accelerated = false;
};

/// Classical GAP-TV from v0 = y_norm. `on_iterate` (optional) sees every
/// denoised iterate.
template <class S>
HsiCube<S> gap_tv(const Measurement<S>& y, const SensingOperator<S>& op, const GapTvOptions& opt,
                  const std::function<void(int, const HsiCube<S>&)>& on_iterate = {});

}  // namespace sci

#endif
