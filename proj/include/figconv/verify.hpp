#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figconv/trainer.hpp"

namespace figconv {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;  // worst deviation, ratio or count, depending on the check
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  /// Test hook: add a small offset to one entry of every expanded (Hankel)
  /// kernel used by the equivalence checks.
  bool perturb_hankel = false;
};

namespace verify_detail {

template <typename T>
FactorizedGridSet<T> random_grids(Rng& rng, std::size_t C, std::size_t r, std::size_t max_res) {
  const int axis = static_cast<int>(rng.below(3));
  std::array<std::size_t, 3> res{};
  for (int a = 0; a < 3; ++a) res[a] = a == axis ? r : 1 + rng.below(max_res);
  std::vector<GridLayout> ls{GridLayout(res, axis)};
  auto g = FactorizedGridSet<T>::zeros(ls, Box{}, C);
  for (auto& v : g.grids[0].storage()) v = static_cast<T>(rng.uniform(-1, 1));
  return g;
}

/// Reparameterized path through explicit flatten / conv2d / unflatten so the
/// expanded kernel can be perturbed.
template <typename T>
FactorizedGridSet<T> reparam_path(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& ks, bool perturb) {
  auto out = FactorizedGridSet<T>::zeros(grids.layouts, grids.bounds, ks[0].out_channels());
  for (std::size_t m = 0; m < grids.size(); ++m) {
    auto [x, k2] = reparam_flatten(grids.grids[m], grids.layouts[m], ks[m]);
    if (perturb) {
      for (std::size_t i = 0; i < k2.size(); ++i)
        if (k2[i] != T{0}) {
          k2[i] += static_cast<T>(1e-2);
          break;
        }
    }
    Graph<T> g;
    const std::size_t K = ks[m].size();
    Conv2dParams p;
    p.pad = {(K - 1) / 2, (K - 1) / 2};
    out.grids[m] = reparam_unflatten(conv2d(g.constant(x), g.constant(k2), p).value(), grids.layouts[m]);
  }
  return out;
}

template <typename T>
double equivalence_worst(std::size_t n, std::uint64_t seed, bool perturb) {
  Rng rng(seed);
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = 1 + rng.below(4);
    const std::size_t K = rng.below(2) ? 2 * r - 1 : 2 * r + 1;
    const std::size_t ci = 1 + rng.below(4), co = 1 + rng.below(4);
    auto grids = random_grids<T>(rng, ci, r, 16);
    std::vector<FigKernel<T>> ks{FigKernel<T>(uniform_tensor<T>({co, ci, K, K, K}, 1.0, rng))};
    const auto a = fig_conv_naive(grids, ks);
    const auto b = reparam_path(grids, ks, perturb);
    worst = std::max(worst, static_cast<double>(max_abs_diff(a.grids[0], b.grids[0])));
  }
  return worst;
}

}  // namespace verify_detail

inline CheckResult check_reparam_equivalence(const VerifyOptions& o) {
  const double d64 = verify_detail::equivalence_worst<double>(o.instances, o.seed, o.perturb_hankel);
  const double d32 = verify_detail::equivalence_worst<float>(o.instances, o.seed + 1, o.perturb_hankel);
  CheckResult r{"reparam_equivalence", d64 < 1e-10 && d32 < 1e-5, d64,
                detail::cat("max |naive - reparam| float64 ", d64, ", float32 ", d32)};
  return r;
}

inline CheckResult check_hankel(const VerifyOptions& o) {
  Rng rng(o.seed + 7);
  double worst = 0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t r = 1 + rng.below(6), K = 2 * r - 1;
    std::vector<double> w(K), x(r);
    for (auto& v : w) v = rng.uniform(-1, 1);
    for (auto& v : x) v = rng.uniform(-1, 1);
    Tensor<double> h = hankel_reparam_1d<double>(w, r);
    if (o.perturb_hankel) h[0] += 1e-2;
    for (std::size_t a = 0; a < r; ++a) {
      double y = 0, ref = 0;
      for (std::size_t k = 0; k < r; ++k) y += h.at(a, k) * x[k];
      // zero-padded sweep (pad r-1 below), read back in reverse
      const std::size_t j = r - 1 - a;
      for (std::size_t t = 0; t < K; ++t) {
        const long src = static_cast<long>(j + t) - static_cast<long>(r - 1);
        if (src >= 0 && src < static_cast<long>(r)) ref += w[t] * x[static_cast<std::size_t>(src)];
      }
      worst = std::max(worst, std::abs(y - ref));
    }
  }
  return {"hankel_identity", worst == 0, worst, detail::cat("max deviation from band oracle ", worst)};
}

inline CheckResult check_radius_search(const VerifyOptions& o) {
  Rng rng(o.seed + 11);
  std::size_t mismatches = 0, total = 0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t N = 1 + rng.below(2000), Q = 1 + rng.below(200);
    std::vector<Vec3> pts(N), qs(Q);
    for (auto& p : pts) p = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (auto& q : qs) q = {rng.uniform(), rng.uniform(), rng.uniform()};
    const auto spec = rng.below(2) ? NeighborSpec::sphere(rng.uniform(0.02, 0.2))
                                   : NeighborSpec::ellipsoid(diag3(std::pow(rng.uniform(0.02, 0.2), 2),
                                                                   std::pow(rng.uniform(0.02, 0.2), 2),
                                                                   std::pow(rng.uniform(0.02, 0.2), 2)));
    auto got = radius_query(build_hash_grid(pts, spec), qs, spec, 1);
    got.sort_ranges();
    mismatches += got == brute_force_radius(pts, qs, spec) ? 0 : 1;
    ++total;
  }
  return {"radius_search_equivalence", mismatches == 0, static_cast<double>(mismatches),
          detail::cat(mismatches, " of ", total, " instances differ from brute force")};
}

inline CheckResult check_gradients(const VerifyOptions& o) {
  Rng rng(o.seed + 13);
  double worst = 0;
  std::string worst_op = "none";
  auto note = [&](const char* op, double e) {
    if (e > worst) worst = e, worst_op = op;
  };
  for (std::size_t i = 0; i < std::max<std::size_t>(3, o.instances / 5); ++i) {
    Conv2dParams p;
    p.pad = {1, 0};
    p.stride = {1 + rng.below(2), 1};
    note("conv2d", gradient_check<double>([&](Graph<double>&, std::vector<Var<double>>& v) {
           return sum(square(conv2d(v[0], v[1], p)));
         }, {uniform_tensor<double>({1, 2, 5, 4}, 1, rng), uniform_tensor<double>({2, 2, 3, 2}, 1, rng)}));
    note("conv3d", gradient_check<double>([&](Graph<double>&, std::vector<Var<double>>& v) {
           return sum(square(conv3d_direct(v[0], v[1], Pad3{{1, 0, 1}, {0, 1, 1}})));
         }, {uniform_tensor<double>({1, 2, 3, 3, 3}, 1, rng), uniform_tensor<double>({2, 2, 2, 2, 3}, 1, rng)}));
    GridLayout lay({3, 2, 4}, 1);
    std::vector<Vec3> pts(5);
    for (auto& q : pts) q = {rng.uniform(), rng.uniform(), rng.uniform()};
    auto st = trilinear_stencil<double>(lay, Box{}, pts);
    note("trilinear", gradient_check<double>([&](Graph<double>&, std::vector<Var<double>>& v) {
           return sum(square(interp(v[0], 2, st)));
         }, {uniform_tensor<double>({2, lay.voxels()}, 1, rng)}));
    auto grids = FactorizedGridSet<double>::zeros({GridLayout({2, 3, 3}, 0), GridLayout({3, 2, 3}, 1)}, Box{}, 2);
    FusionPlan<double> plan(grids.layouts, grids.bounds);
    std::vector<FusionLayer<double>> layers(2);
    for (auto& l : layers) l.weight = uniform_tensor<double>({2, 2}, 1, rng);
    note("fusion", gradient_check<double>([&](Graph<double>& g, std::vector<Var<double>>& v) {
           Binder<double> b(g, false);
           auto out = fuse_vars(b, {v[0], v[1]}, 2, layers, plan);
           return add(sum(square(out[0])), sum(square(out[1])));
         }, {uniform_tensor<double>({2, 2, 3, 3}, 1, rng), uniform_tensor<double>({2, 3, 2, 3}, 1, rng)}));
    note("joint_loss", gradient_check<double>([&](Graph<double>&, std::vector<Var<double>>& v) {
           return joint_loss(v[0], v[1], v[2], v[3]);
         }, {uniform_tensor<double>({1, 1}, 1, rng), uniform_tensor<double>({1}, 1, rng),
             uniform_tensor<double>({4, 1}, 1, rng), uniform_tensor<double>({4, 1}, 1, rng)}));
  }
  return {"gradient_checks", worst < 1e-5, worst,
          detail::cat("worst relative error ", worst, " (", worst_op, ")")};
}

inline CheckResult check_flop_scaling(const VerifyOptions&) {
  const GridLayout small({2, 32, 32}, 0), big({2, 64, 64}, 0);
  const double fig = static_cast<double>(fig_conv_macs(big, 4, 4, 3).dense) /
                     static_cast<double>(fig_conv_macs(small, 4, 4, 3).dense);
  const auto c3 = [](std::size_t n) {
    return conv3d_macs(1, 4, {n, n, n}, 4, {3, 3, 3}, Pad3::same(3)).dense;
  };
  const double explicit3d = static_cast<double>(c3(32)) / static_cast<double>(c3(16));
  return {"flop_scaling", fig == 4.0 && explicit3d == 8.0, fig,
          detail::cat("fig path ratio ", std::fixed, std::setprecision(1), fig, ", explicit conv3d ratio ", explicit3d)};
}

inline std::vector<CheckResult> run_verify(const VerifyOptions& o) {
  return {check_reparam_equivalence(o), check_hankel(o), check_radius_search(o), check_gradients(o),
          check_flop_scaling(o)};
}

// ---------------------------------------------------------------------------
// Benchmarks

template <typename Fn>
double median_seconds(std::size_t runs, Fn&& fn) {
  std::vector<double> t;
  for (std::size_t i = 0; i < runs; ++i) {
    const auto a = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

struct RadiusBench {
  std::size_t n = 0;
  double radius = 0;
  double hash_seconds = 0, brute_seconds = 0;
  std::uint64_t pairs = 0;
  double speedup() const { return brute_seconds / hash_seconds; }
};

/// N points and N queries uniform in the unit cube; radius chosen for about
/// 20 neighbors per query. The hash timing includes building the grid.
inline RadiusBench bench_radius(std::size_t n, std::size_t runs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec3> pts(n), qs(n);
  for (auto& p : pts) p = {rng.uniform(), rng.uniform(), rng.uniform()};
  for (auto& q : qs) q = {rng.uniform(), rng.uniform(), rng.uniform()};
  RadiusBench b;
  b.n = n;
  b.radius = std::cbrt(20.0 / (static_cast<double>(n) * 4.0 / 3.0 * std::numbers::pi));
  const auto spec = NeighborSpec::sphere(b.radius);
  CsrNeighbors h;
  b.hash_seconds = median_seconds(runs, [&] { h = radius_query(build_hash_grid(pts, spec), qs, spec, 1); });
  CsrNeighbors bf;
  b.brute_seconds = median_seconds(runs, [&] { bf = brute_force_radius(pts, qs, spec); });
  h.sort_ranges();
  if (!(h == bf)) throw Error("bench: hash and brute-force neighbor lists differ");
  b.pairs = bf.indices.size();
  return b;
}

struct ConvBench {
  std::size_t plane = 0;
  double reparam_seconds = 0, naive_seconds = 0;
  std::uint64_t reparam_macs = 0, naive_macs = 0;
};

/// One grid [C, r, n, n] convolved through both paths.
inline ConvBench bench_conv(std::size_t plane, std::size_t channels, std::size_t rank, std::size_t kernel,
                            std::size_t runs, std::uint64_t seed, bool with_naive = true) {
  Rng rng(seed);
  const GridLayout lay({rank, plane, plane}, 0);
  auto grids = FactorizedGridSet<float>::zeros({lay}, Box{}, channels);
  for (auto& v : grids.grids[0].storage()) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<FigKernel<float>> ks{
      FigKernel<float>(uniform_tensor<float>({channels, channels, kernel, kernel, kernel}, 0.1, rng))};
  ConvBench b;
  b.plane = plane;
  b.reparam_seconds = median_seconds(runs, [&] { (void)fig_conv_reparam(grids, ks); });
  b.reparam_macs = fig_conv_macs(lay, channels, channels, kernel).dense;
  if (with_naive) {
    b.naive_seconds = median_seconds(runs, [&] { (void)fig_conv_naive(grids, ks); });
    b.naive_macs = fig_conv_naive_macs(lay, channels, channels, kernel).dense;
  }
  return b;
}

}  // namespace figconv
