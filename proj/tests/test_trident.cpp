#include <doctest.h>

#include <algorithm>

#include "loop_oracle.hpp"
#include "sci/gradcheck.hpp"
#include "sci/trident.hpp"

using namespace sci;
using oracle::max_abs_diff;
using oracle::random_tensor;
using T = Tensor<double>;

namespace {

void randomize(ParamSet<double>& ps, std::uint64_t seed, double range = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-range, range);
  for (auto& e : ps.entries())
    for (auto& v : e.tensor.mutable_data()) v = u(rng);
}

std::vector<std::pair<std::string, T>> inputs_of(const ParamSet<double>& ps) {
  std::vector<std::pair<std::string, T>> in;
  for (const auto& e : ps.entries()) in.emplace_back(e.name, e.tensor);
  return in;
}

bool same_bits(const T& a, const T& b) { return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data()); }

void check_rows_sum_to_one(const T& attention) {
  const auto n = attention.dim(-1);
  for (std::int64_t r = 0; r < attention.numel() / n; ++r) {
    double s = 0;
    for (std::int64_t j = 0; j < n; ++j) s += attention[r * n + j];
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

}  // namespace

TEST_CASE("prior pyramid") {
  ParamSet<double> ps;
  Initializer init(1);
  PriorPyramidBuilder<double> builder(ps, "prior", init, 4);
  auto z = random_tensor({2, 16, 4}, 3);
  auto p = builder(z);
  CHECK(p.levels[1].shape() == Shape{2, 8, 8});
  CHECK(p.levels[2].shape() == Shape{2, 4, 16});
  // Identity start: merged token is the concatenation of its pair.
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t t = 0; t < 8; ++t)
      for (std::int64_t ch = 0; ch < 8; ++ch)
        CHECK(p.levels[1][(b * 8 + t) * 8 + ch] == z[(b * 16 + 2 * t + ch / 4) * 4 + ch % 4]);
  CHECK(std::ranges::equal(p.levels[2].data(), z.data()));
  CHECK_THROWS_AS(builder(random_tensor({1, 5, 4}, 1)), DimensionError);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    randomize(ps, seed);
    auto zi = random_tensor({1, 8, 4}, seed + 10).set_requires_grad(true);
    auto in = inputs_of(ps);
    in.emplace_back("z", zi);
    auto w = random_tensor({1, 2, 16}, seed + 20);
    auto report = grad_check([&] { return sum(mul(gelu(builder(zi).levels[2]), w)); }, in);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("spatial flow") {
  ParamSet<double> ps;
  Initializer init(2);
  SpatialFlow<double> flow(ps, "sf", init, 4, 2, 4);
  auto zero = flow(T::zeros({1, 4, 4, 4}));
  CHECK(std::ranges::all_of(zero.feature.data(), [](double v) { return v == 0.0; }));
  CHECK(std::ranges::all_of(zero.gate_qk.data(), [](double v) { return v == 0.0; }));
  CHECK(std::ranges::all_of(zero.gate_v.data(), [](double v) { return v == 0.0; }));
  CHECK(zero.gate_qk.shape() == Shape{1, 8});

  // Zeroed projection makes each MBlock the identity.
  auto x = random_tensor({1, 4, 4, 4}, 5);
  ParamSet<double> ps2;
  MBlock<double> mb(ps2, "mb", init, 4, 4);
  randomize(ps2, 1);
  std::ranges::fill(mb.project.weight.mutable_data(), 0.0);
  std::ranges::fill(mb.project.bias.mutable_data(), 0.0);
  CHECK(same_bits(mb(x), x));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    randomize(ps, seed + 30);
    auto xi = random_tensor({1, 4, 4, 4}, seed).set_requires_grad(true);
    auto in = inputs_of(ps);
    in.emplace_back("x", xi);
    auto w1 = random_tensor({1, 4, 4, 4}, seed + 1), w2 = random_tensor({1, 8}, seed + 2);
    auto report = grad_check(
        [&] {
          auto o = flow(xi);
          return sum(mul(o.feature, w1)) + sum(mul(o.gate_qk, w2)) + sum(mul(o.gate_v, o.gate_v));
        },
        in);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("spectral attention against the loop reference") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamSet<double> ps;
    Initializer init(seed);
    AcsAttention<double> acs(ps, "acs", init, 4, 2);
    randomize(ps, seed + 7);
    auto x = random_tensor({1, 4, 4, 4}, seed + 1);
    auto gqk = random_tensor({1, 8}, seed + 2, 0.5, 1.5);
    auto gv = random_tensor({1, 4, 4, 4}, seed + 3);
    auto o = acs(x, gqk, gv);
    CHECK(o.out.shape() == Shape{1, 4, 4, 4});
    CHECK(o.query.shape() == Shape{1, 8, 2, 2});
    CHECK(o.value.shape() == Shape{1, 8, 4, 4});
    CHECK(o.attention.shape() == Shape{1, 2, 4, 4});
    CHECK(max_abs_diff(o.out.data(), oracle::acs_reference(acs, x, gqk, gv)) <= 1e-5);
    check_rows_sum_to_one(o.attention);

    // Uniform attention: every mixed channel is the mean of its head's V channels.
    acs.uniform_attention = true;
    auto u = acs(x, gqk, gv);
    CHECK(max_abs_diff(u.out.data(), oracle::acs_reference(acs, x, gqk, gv)) <= 1e-5);
    std::vector<double> means(static_cast<std::size_t>(8 * 16));
    for (int t = 0; t < 8; ++t)
      for (int p = 0; p < 16; ++p) {
        const int h = t / 4;
        double m = 0;
        for (int j = 0; j < 4; ++j) m += u.value[(h * 4 + j) * 16 + p];
        means[static_cast<std::size_t>(t * 16 + p)] = m / 4;
      }
    auto expect = oracle::conv_reference(means, Shape{1, 8, 4, 4}, acs.project.weight, {});
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] *= gv[static_cast<std::int64_t>(i)];
    CHECK(max_abs_diff(u.out.data(), expect) <= 1e-12);
    for (double a : u.attention.data()) CHECK(a == doctest::Approx(0.25).epsilon(1e-15));
  }
  ParamSet<double> ps;
  Initializer init(1);
  AcsAttention<double> acs(ps, "acs", init, 4, 2);
  CHECK_THROWS_AS(acs(T::zeros({1, 4, 3, 4}), T::zeros({1, 8}), T::zeros({1, 4, 3, 4})), DimensionError);
  CHECK_THROWS_AS(AcsAttention<double>(ps, "bad", init, 4, 3), UsageError);
}

TEST_CASE("prior cross-attention") {
  ParamSet<double> ps;
  Initializer init(4);
  CpfAttention<double> cpf(ps, "cpf", init, 4, 6, 2, false);
  randomize(ps, 9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto src = random_tensor({1, 8, 4, 4}, seed);
    auto z = random_tensor({1, 4, 6}, seed + 100);
    auto o = cpf(src, z);
    CHECK(o.out.shape() == Shape{1, 4, 4, 4});
    CHECK(max_abs_diff(o.out.data(), oracle::cpf_reference(cpf, src, z)) <= 1e-5);
    check_rows_sum_to_one(o.attention);
  }

  // One prior token: every pixel receives project(value(token)).
  auto src = random_tensor({1, 8, 4, 4}, 1);
  auto one = random_tensor({1, 1, 6}, 2);
  auto single = cpf(src, one);
  auto vz = cpf.value(one);  // [1,1,4]
  std::vector<double> broadcast(64);
  for (int ch = 0; ch < 4; ++ch)
    for (int p = 0; p < 16; ++p) broadcast[static_cast<std::size_t>(ch * 16 + p)] = vz[ch];
  auto expect = oracle::conv_reference(broadcast, Shape{1, 4, 4, 4}, cpf.project.weight, {}, cpf.project.bias);
  CHECK(max_abs_diff(single.out.data(), expect) <= 1e-12);
  auto two = cpf(src, concat<double>({one, one}, 1));
  CHECK(max_abs_diff(two.out.data(), single.out.data()) <= 1e-12);

  // Compressed-query variant keeps the image shape.
  ParamSet<double> ps2;
  CpfAttention<double> half(ps2, "half", init, 4, 6, 2, true);
  auto hq = half(random_tensor({1, 8, 2, 2}, 3), random_tensor({1, 4, 6}, 4));
  CHECK(hq.out.shape() == Shape{1, 4, 4, 4});

  CHECK_THROWS_AS(cpf(src, random_tensor({1, 4, 5}, 1)), DimensionError);
  CHECK_THROWS_AS(cpf(src, random_tensor({2, 4, 6}, 1)), DimensionError);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (bool compressed : {false, true}) {
      ParamSet<double> pg;
      Initializer gi(seed);
      CpfAttention<double> g(pg, "g", gi, 4, 6, 2, compressed);
      randomize(pg, seed + 40);
      const std::int64_t s = compressed ? 2 : 4;
      auto x = random_tensor({1, 8, s, s}, seed).set_requires_grad(true);
      auto z = random_tensor({1, 4, 6}, seed + 1).set_requires_grad(true);
      auto in = inputs_of(pg);
      in.emplace_back("source", x);
      in.emplace_back("prior", z);
      auto w = random_tensor({1, 4, 4, 4}, seed + 2);
      auto report = grad_check([&] { return sum(mul(g(x, z).out, w)); }, in);
      CHECK(report.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("spectral attention gradients") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamSet<double> ps;
    Initializer init(seed);
    AcsAttention<double> acs(ps, "acs", init, 4, 2);
    randomize(ps, seed + 11);
    auto x = random_tensor({1, 4, 4, 4}, seed).set_requires_grad(true);
    auto gqk = random_tensor({1, 8}, seed + 1).set_requires_grad(true);
    auto gv = random_tensor({1, 4, 4, 4}, seed + 2).set_requires_grad(true);
    auto in = inputs_of(ps);
    in.emplace_back("x", x);
    in.emplace_back("gate_qk", gqk);
    in.emplace_back("gate_v", gv);
    auto w = random_tensor({1, 4, 4, 4}, seed + 3);
    auto report = grad_check([&] { return sum(mul(acs(x, gqk, gv).out, w)); }, in);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("trident block") {
  TridentConfig cfg;
  ParamSet<double> ps;
  Initializer init(3);
  TridentBlock<double> tt(ps, "tt", init, 16, 8, 4, cfg);
  auto x = random_tensor({2, 16, 8, 8}, 1);
  auto z = random_tensor({2, 16, 8}, 2);
  CHECK(tt(x, z).shape() == Shape{2, 16, 8, 8});
  // Zero prior tokens: the prior branch reduces to its biases, block still runs.
  auto zero_prior = tt(x, T::zeros({2, 16, 8}));
  CHECK(zero_prior.shape() == Shape{2, 16, 8, 8});
  CHECK(std::ranges::all_of(zero_prior.data(), [](double v) { return std::isfinite(v); }));
  CHECK_THROWS_AS(tt(random_tensor({1, 8, 8, 8}, 1), z), DimensionError);

  // Channel split / concat round trip.
  auto halves = concat<double>({slice(x, 1, 0, 8), slice(x, 1, 8, 8)}, 1);
  CHECK(same_bits(halves, x));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamSet<double> pg;
    Initializer gi(seed);
    TridentBlock<double> g(pg, "g", gi, 8, 4, 2, cfg);
    randomize(pg, seed + 60, 0.25);
    auto xi = random_tensor({1, 8, 4, 4}, seed).set_requires_grad(true);
    auto zi = random_tensor({1, 4, 4}, seed + 1).set_requires_grad(true);
    auto in = inputs_of(pg);
    in.emplace_back("x", xi);
    in.emplace_back("z", zi);
    auto w = random_tensor({1, 8, 4, 4}, seed + 2);
    GradCheckOptions opt;
    opt.seed = seed;
    opt.max_coords_per_tensor = 12;
    opt.eps = 1e-4;
    auto report = grad_check([&] { return sum(mul(g(xi, zi), w)); }, in, opt);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("denoiser") {
  TridentConfig cfg;
  cfg.channels = 8;
  cfg.prior_channels = 8;
  cfg.heads = 2;
  ParamSet<double> ps;
  Initializer init(4);
  Denoiser<double> den(ps, "den", init, 8, cfg);
  PriorPyramidBuilder<double> builder(ps, "prior", init, 8);
  auto x = random_tensor({1, 8, 32, 32}, 1, 0, 1);
  auto pyr = builder(random_tensor({1, 16, 8}, 2));
  auto out = den(x, pyr);
  CHECK(out.shape() == Shape{1, 8, 32, 32});
  CHECK(same_bits(out, x));
  CHECK_THROWS_AS(den(random_tensor({1, 8, 12, 16}, 1), pyr), DimensionError);
  CHECK_THROWS_AS(den(random_tensor({1, 7, 16, 16}, 1), pyr), DimensionError);

  TridentConfig tiny;
  tiny.channels = 4;
  tiny.prior_channels = 2;
  tiny.heads = 1;
  tiny.spatial_depth = 1;
  tiny.expansion = 2;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamSet<double> pg;
    Initializer gi(seed);
    Denoiser<double> d(pg, "d", gi, 2, tiny);
    PriorPyramidBuilder<double> b(pg, "p", gi, 2);
    randomize(pg, seed + 80, 0.25);
    auto xi = random_tensor({1, 2, 8, 8}, seed).set_requires_grad(true);
    auto zi = random_tensor({1, 4, 2}, seed + 1).set_requires_grad(true);
    auto in = inputs_of(pg);
    in.emplace_back("x", xi);
    in.emplace_back("z", zi);
    auto w = random_tensor({1, 2, 8, 8}, seed + 2);
    GradCheckOptions opt;
    opt.seed = seed;
    opt.max_coords_per_tensor = 4;
    opt.eps = 1e-4;
    auto report = grad_check([&] { return sum(mul(d(xi, b(zi)), w)); }, in, opt);
    CHECK(report.max_rel_error <= 1e-4);
  }
}
