#include "sci/unfolding.hpp"

#include <algorithm>
#include <cmath>

namespace sci {

using i64 = std::int64_t;

template <class S>
HsiCube<S> project(const HsiCube<S>& v, const Measurement<S>& y, const SensingOperator<S>& op) {
  if (v.size() != op.cube_size() || y.values.size() != op.measurement_size())
    throw DimensionError("project: cube " + shape_str(Shape{v.width, v.height, v.bands}) + " / measurement " +
                         shape_str(Shape{y.width, y.height}) + " do not fit the operator");
  Vec<S> r = y.values - op.apply(v.values);
  Vec<S> q(r.size());
  op.divide_phi(r.data(), q.data());
  HsiCube<S> x = v;
  x.values += op.apply_adjoint(q);
  return x;
}

template <class S>
Tensor<S> project(const SensingOperator<S>& op, const Tensor<S>& v, const Tensor<S>& y) {
  return add(v, sense_adjoint(op, divide_phi(op, sub(y, sense(op, v)))));
}

template <class S>
GradientCorrection<S>::GradientCorrection(ParamSet<S>& params, const std::string& name, Initializer& init,
                                          i64 bands)
    : first(params, name + ".dsc1", init, bands), second(params, name + ".dsc2", init, bands, InitMode::zero) {}

template <class S>
Tensor<S> GradientCorrection<S>::operator()(const Tensor<S>& residual) const {
  return add(residual, second(gelu(first(residual))));
}

template <class S>
Tensor<S> project_gc(const SensingOperator<S>& op, const Tensor<S>& v, const Tensor<S>& y,
                     const GradientCorrection<S>& gc) {
  return add(v, gc(sense_adjoint(op, divide_phi(op, sub(y, sense(op, v))))));
}

template <class S>
Tensor<S> run_unfolding(const SensingOperator<S>& op, const Tensor<S>& y,
                        const std::vector<GradientCorrection<S>>& stages, const StageDenoiser<S>& denoiser) {
  if (stages.empty()) throw UsageError("unfolding needs at least one stage");
  Tensor<S> v = sense_adjoint(op, divide_phi(op, y));
  for (std::size_t k = 0; k < stages.size(); ++k) {
    Tensor<S> x = project_gc(op, v, y, stages[k]);
    v = denoiser ? denoiser(x, static_cast<int>(k)) : x;
  }
  return v;
}

template <class S>
HsiCube<S> clamp_unit(HsiCube<S> x) {
  x.values = x.values.cwiseMax(S(0)).cwiseMin(S(1));
  return x;
}

template <class S>
HsiCube<S> tv_denoise(const HsiCube<S>& f, S weight, int iterations) {
  if (weight <= S(0) || iterations < 1) return f;
  const i64 W = f.width, H = f.height, n = W * H;
  constexpr S tau = S(0.125);
  HsiCube<S> out = f;
  std::vector<S> px(n), py(n), div(n), gx(n), gy(n);
  for (i64 l = 0; l < f.bands; ++l) {
    const S* fb = f.values.data() + l * n;
    std::fill(px.begin(), px.end(), S(0));
    std::fill(py.begin(), py.end(), S(0));
    auto divergence = [&] {
      for (i64 r = 0; r < H; ++r)
        for (i64 c = 0; c < W; ++c) {
          const i64 i = r * W + c;
          S d = 0;
          if (c < W - 1) d += px[i];
          if (c > 0) d -= px[i - 1];
          if (r < H - 1) d += py[i];
          if (r > 0) d -= py[i - W];
          div[i] = d;
        }
    };
    for (int it = 0; it < iterations; ++it) {
      divergence();
      // u = div p - f / weight; step p along grad u and renormalise.
      for (i64 i = 0; i < n; ++i) div[i] -= fb[i] / weight;
      for (i64 r = 0; r < H; ++r)
        for (i64 c = 0; c < W; ++c) {
          const i64 i = r * W + c;
          gx[i] = c < W - 1 ? div[i + 1] - div[i] : S(0);
          gy[i] = r < H - 1 ? div[i + W] - div[i] : S(0);
        }
      for (i64 i = 0; i < n; ++i) {
        const S norm = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
        const S denom = S(1) + tau * norm;
        px[i] = (px[i] + tau * gx[i]) / denom;
        py[i] = (py[i] + tau * gy[i]) / denom;
      }
    }
    divergence();
    S* ob = out.values.data() + l * n;
    for (i64 i = 0; i < n; ++i) ob[i] = fb[i] - weight * div[i];
  }
  return out;
}

template <class S>
HsiCube<S> gap_tv(const Measurement<S>& y, const SensingOperator<S>& op, const GapTvOptions& opt,
                  const std::function<void(int, const HsiCube<S>&)>& on_iterate) {
  if (opt.iterations < 1) throw UsageError("gap_tv needs at least one iteration");
  HsiCube<S> v = normalize_measurement(y, op);
  Measurement<S> target = y;
  for (int k = 0; k < opt.iterations; ++k) {
    if (opt.accelerated && k > 0) target.values += y.values - op.apply(v.values);
    v = tv_denoise(project(v, target, op), static_cast<S>(opt.tv_weight), opt.tv_iterations);
    if (on_iterate) on_iterate(k, v);
  }
  return v;
}

#define SCI_INSTANTIATE_UNFOLDING(S)                                                                         \
  template HsiCube<S> project(const HsiCube<S>&, const Measurement<S>&, const SensingOperator<S>&);         \
  template Tensor<S> project(const SensingOperator<S>&, const Tensor<S>&, const Tensor<S>&);                 \
  template struct GradientCorrection<S>;                                                                     \
  template Tensor<S> project_gc(const SensingOperator<S>&, const Tensor<S>&, const Tensor<S>&,               \
                                const GradientCorrection<S>&);                                               \
  template Tensor<S> run_unfolding(const SensingOperator<S>&, const Tensor<S>&,                              \
                                   const std::vector<GradientCorrection<S>>&, const StageDenoiser<S>&);      \
  template HsiCube<S> clamp_unit(HsiCube<S>);                                                                \
  template HsiCube<S> tv_denoise(const HsiCube<S>&, S, int);                                                 \
  template HsiCube<S> gap_tv(const Measurement<S>&, const SensingOperator<S>&, const GapTvOptions&,          \
                             const std::function<void(int, const HsiCube<S>&)>&);

SCI_INSTANTIATE_UNFOLDING(float)
SCI_INSTANTIATE_UNFOLDING(double)

}  // namespace sci
