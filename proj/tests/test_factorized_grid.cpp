#include <gtest/gtest.h>

#include "figconv/factorized_grid.hpp"

using namespace figconv;

namespace {

FactorizedGridSet<double> random_set(Rng& rng, const std::vector<GridLayout>& ls, std::size_t C, const Box& b = {}) {
  auto g = FactorizedGridSet<double>::zeros(ls, b, C);
  for (auto& t : g.grids)
    for (auto& v : t.storage()) v = rng.uniform(-1, 1);
  return g;
}

// one-layer MLP whose output is the feature slice (bias 0)
Mlp<double> passthrough(std::size_t C, std::size_t E) {
  Mlp<double> m;
  Tensor<double> w({C + E, C});
  for (std::size_t c = 0; c < C; ++c) w.at(c, c) = 1;
  m.weights.push_back(w);
  m.biases.push_back(Tensor<double>({C}));
  return m;
}

// one-layer MLP with zero weights and bias `b`
Mlp<double> constant_mlp(std::size_t in, std::size_t C, double b) {
  Mlp<double> m;
  m.weights.push_back(Tensor<double>({in, C}));
  m.biases.push_back(Tensor<double>({C}, b));
  return m;
}

double grid_value(const Tensor<double>& g, const GridLayout& l, std::size_t c, std::array<std::size_t, 3> ijk) {
  return g[c * l.voxels() + l.voxel_index(ijk)];
}

}  // namespace

TEST(Cardinality, MillionCubeExample) {
  GridSpec s;
  s.max_resolution = {1000, 1000, 1000};
  s.ranks = {5, 4, 3};
  const auto c = cardinality(s);
  EXPECT_EQ(c.per_grid, (std::array<std::uint64_t, 3>{5'000'000, 4'000'000, 3'000'000}));
  EXPECT_EQ(c.total, 12'000'000u);
  EXPECT_EQ(c.explicit_grid, 1'000'000'000u);
}

TEST(Cardinality, FullRankGivesNoReduction) {
  GridSpec s;
  s.max_resolution = {2, 2, 2};
  s.ranks = {2, 2, 2};
  const auto c = cardinality(s);
  EXPECT_EQ(c.per_grid, (std::array<std::uint64_t, 3>{8, 8, 8}));
  EXPECT_EQ(c.total, 24u);
  EXPECT_EQ(c.explicit_grid, 8u);
}

TEST(Cardinality, DefaultModelGrids) {
  GridSpec s;
  s.max_resolution = {250, 150, 100};
  s.ranks = {5, 3, 2};
  const auto c = cardinality(s);
  EXPECT_EQ(c.per_grid, (std::array<std::uint64_t, 3>{75000, 75000, 75000}));
  EXPECT_EQ(c.total, 225000u);
  EXPECT_EQ(c.explicit_grid, 3'750'000u);
  // 225000 / 3750000 is exactly 6%: the memory ratio is at most 6%
  EXPECT_LE(c.total * 100, c.explicit_grid * 6);
}

TEST(Cardinality, RejectsBadRanks) {
  GridSpec s;
  s.max_resolution = {4, 4, 4};
  s.ranks = {0, 1, 1};
  EXPECT_THROW(cardinality(s), Error);
  s.ranks = {5, 1, 1};
  EXPECT_THROW(cardinality(s), Error);
}

TEST(Layout, VoxelIndexRoundTrip) {
  for (int ax = 0; ax < 3; ++ax) {
    GridLayout l({3, 4, 5}, ax);
    for (std::size_t v = 0; v < l.voxels(); ++v) EXPECT_EQ(l.voxel_index(l.voxel_coords(v)), v);
    EXPECT_EQ(l.rank() * l.plane0() * l.plane1(), l.voxels());
  }
  EXPECT_EQ(GridLayout::from_resolution({250, 3, 100}).rank_axis, 1);
}

TEST(Layout, VoxelCenters) {
  Box b{{-1, 0, 2}, {1, 4, 3}};
  GridLayout l({2, 4, 1}, 2);
  const Vec3 c = voxel_center(l, b, l.voxel_index({1, 2, 0}));
  EXPECT_DOUBLE_EQ(c[0], -1 + 1.5 * 1.0);
  EXPECT_DOUBLE_EQ(c[1], 0 + 2.5 * 1.0);
  EXPECT_DOUBLE_EQ(c[2], 2.5);
}

TEST(Trilinear, ExactAtVoxelCenters) {
  Rng rng(1);
  GridLayout l({3, 4, 2}, 2);
  Box b;
  auto g = random_set(rng, {l}, 2, b);
  for (std::size_t v = 0; v < l.voxels(); ++v) {
    const auto f = trilinear_sample(g.grids[0], l, b, voxel_center(l, b, v));
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(f[c], g.grids[0][c * l.voxels() + v], 1e-14);
  }
}

TEST(Trilinear, ConstantGridAndPartitionOfUnity) {
  Rng rng(2);
  GridLayout l({5, 2, 7}, 1);
  Box b{{-0.1, -0.3, 0}, {1.3, 0.3, 0.5}};
  Tensor<double> g({1, 5 * 2 * 7}, 3.25);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 v{rng.uniform(-0.2, 1.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.1, 0.6)};
    double s = 0;
    for (const auto& [idx, w] : trilinear_taps(l, b, v)) {
      EXPECT_LT(idx, l.voxels());
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_LT(std::abs(s - 1.0), 1e-12);
    EXPECT_NEAR(trilinear_sample(g, l, b, v)[0], 3.25, 1e-12);
  }
}

TEST(Trilinear, Midpoint) {
  GridLayout l({2, 1, 1}, 1);
  Box b{{0, 0, 0}, {2, 1, 1}};
  Tensor<double> g({1, 2}, std::vector<double>{0, 2});
  EXPECT_NEAR(trilinear_sample(g, l, b, {1.0, 0.5, 0.5})[0], 1.0, 1e-15);
}

TEST(Trilinear, MatchesIndependentFormula) {
  Rng rng(3);
  GridLayout l({4, 3, 5}, 1);
  Box b{{0, 0, 0}, {2, 3, 1}};
  auto g = random_set(rng, {l}, 1, b).grids[0];
  for (int it = 0; it < 200; ++it) {
    const Vec3 v{rng.uniform(0, 2), rng.uniform(0, 3), rng.uniform(0, 1)};
    // continuous index u = (v - lo) / h - 0.5, clamped to [0, n-1]
    std::array<std::size_t, 3> i0{};
    std::array<double, 3> t{};
    for (int a = 0; a < 3; ++a) {
      const double n = double(l.resolution[a]);
      double u = (v[a] - b.lo[a]) / (b.extent()[a] / n) - 0.5;
      u = std::clamp(u, 0.0, n - 1);
      i0[a] = std::min<std::size_t>(std::size_t(std::floor(u)), l.resolution[a] > 1 ? l.resolution[a] - 2 : 0);
      t[a] = l.resolution[a] > 1 ? u - double(i0[a]) : 0;
    }
    double ref = 0;
    for (int c = 0; c < 8; ++c) {
      std::array<std::size_t, 3> ijk{};
      double w = 1;
      for (int a = 0; a < 3; ++a) {
        const int bit = (c >> a) & 1;
        ijk[a] = std::min(i0[a] + bit, l.resolution[a] - 1);
        w *= bit ? t[a] : 1 - t[a];
      }
      ref += w * grid_value(g, l, 0, ijk);
    }
    EXPECT_NEAR(trilinear_sample(g, l, b, v)[0], ref, 1e-12);
  }
}

TEST(Decode, ProductOfOnes) {
  Rng rng(4);
  std::vector<GridLayout> ls{GridLayout({2, 4, 4}, 0), GridLayout({4, 2, 4}, 1), GridLayout({4, 4, 2}, 2)};
  auto g = random_set(rng, ls, 3);
  std::vector<Mlp<double>> dec(3, constant_mlp(3 + 3, 2, 1.0));
  for (int it = 0; it < 10; ++it) {
    const auto out = decode_point<double>({rng.uniform(), rng.uniform(), rng.uniform()}, g, dec, Combine::Product);
    ASSERT_EQ(out.size(), 2u);
    for (double v : out) EXPECT_EQ(v, 1.0);
  }
}

TEST(Decode, RankOneGridsAreWellDefined) {
  Rng rng(5);
  std::vector<GridLayout> ls{GridLayout({1, 4, 4}, 0), GridLayout({4, 1, 4}, 1), GridLayout({4, 4, 1}, 2)};
  auto g = random_set(rng, ls, 2);
  std::vector<Mlp<double>> dec(3, passthrough(2, 3));
  const auto out = decode_point<double>({0.3, 0.7, 0.1}, g, dec, Combine::Sum);
  ASSERT_EQ(out.size(), 2u);
  for (double v : out) EXPECT_TRUE(std::isfinite(v));
}

TEST(Decode, SumWithZeroedGrid) {
  Rng rng(6);
  std::vector<GridLayout> ls{GridLayout({2, 4, 4}, 0), GridLayout({4, 2, 4}, 1)};
  auto g = random_set(rng, ls, 2);
  g.grids[1].fill(0);
  // bias-free passthrough decoders map a zero grid to zero
  std::vector<Mlp<double>> dec(2, passthrough(2, 3));
  auto single = FactorizedGridSet<double>::zeros({ls[0]}, g.bounds, 2);
  single.grids[0] = g.grids[0];
  for (int it = 0; it < 10; ++it) {
    const Vec3 v{rng.uniform(), rng.uniform(), rng.uniform()};
    const auto both = decode_point(v, g, dec, Combine::Sum);
    const auto one = decode_point(v, single, {dec[0]}, Combine::Sum);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(both[c], one[c], 1e-14);
  }
}

TEST(Decode, SumPassthroughEqualsTrilinear) {
  Rng rng(8);
  std::vector<GridLayout> ls{GridLayout({3, 5, 4}, 0), GridLayout({5, 3, 4}, 1)};
  auto g = random_set(rng, ls, 2);
  std::vector<Mlp<double>> dec(2, passthrough(2, 3));
  for (int it = 0; it < 20; ++it) {
    const Vec3 v{rng.uniform(), rng.uniform(), rng.uniform()};
    const auto out = decode_point(v, g, dec, Combine::Sum);
    const auto a = trilinear_sample(g.grids[0], ls[0], g.bounds, v), b = trilinear_sample(g.grids[1], ls[1], g.bounds, v);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[c], a[c] + b[c], 1e-12);
  }
}

TEST(Decode, ContinuousAcrossCellFaces) {
  Rng rng(9);
  std::vector<GridLayout> ls{GridLayout({2, 6, 6}, 0), GridLayout({6, 2, 6}, 1), GridLayout({6, 6, 2}, 2)};
  auto g = random_set(rng, ls, 3);
  Rng wr(10);
  std::vector<Mlp<double>> dec;
  for (int m = 0; m < 3; ++m) dec.emplace_back(std::vector<std::size_t>{6, 8, 3}, wr);
  // the face between voxel centers 2 and 3 along y sits at y = 3/6
  for (double x : {0.1, 0.45, 0.8}) {
    const Vec3 v{x, 0.5, 0.37};
    const Vec3 w{x, 0.5 + 1e-6, 0.37};
    const auto a = decode_point(v, g, dec, Combine::Sum), b = decode_point(w, g, dec, Combine::Sum);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_LT(std::abs(a[c] - b[c]), 1e-4);
  }
}

TEST(Fuse, SingleGridUnchanged) {
  Rng rng(11);
  auto g = random_set(rng, {GridLayout({2, 3, 3}, 0)}, 2);
  EXPECT_EQ(fuse(g, {FusionLayer<double>{}}).grids[0], g.grids[0]);
}

TEST(Fuse, ZeroOthersIdentityLayer) {
  Rng rng(12);
  std::vector<GridLayout> ls{GridLayout({2, 3, 4}, 0), GridLayout({3, 2, 4}, 1)};
  auto g = random_set(rng, ls, 2);
  g.grids[1].fill(0);
  const auto f = fuse(g, std::vector<FusionLayer<double>>(2));
  EXPECT_EQ(f.grids[0], g.grids[0]);
}

TEST(Fuse, ConstantGrids) {
  std::vector<GridLayout> ls{GridLayout({2, 3, 4}, 0), GridLayout({3, 2, 4}, 1)};
  auto g = FactorizedGridSet<double>::zeros(ls, Box{}, 1);
  g.grids[0].fill(1.5);
  g.grids[1].fill(-0.25);
  const auto f = fuse(g, std::vector<FusionLayer<double>>(2));
  for (double v : f.grids[0].storage()) EXPECT_NEAR(v, 1.25, 1e-14);
  for (double v : f.grids[1].storage()) EXPECT_NEAR(v, 1.25, 1e-14);
}

TEST(Fuse, MatchesDirectSampling) {
  Rng rng(13);
  std::vector<GridLayout> ls{GridLayout({2, 4, 3}, 0), GridLayout({4, 2, 3}, 1), GridLayout({4, 3, 2}, 2)};
  auto g = random_set(rng, ls, 2);
  std::vector<FusionLayer<double>> layers(3);
  for (auto& l : layers) l.weight = uniform_tensor<double>({2, 2}, 1, rng);
  const auto f = fuse(g, layers);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t v = 0; v < ls[m].voxels(); ++v) {
      const Vec3 c = voxel_center(ls[m], g.bounds, v);
      std::array<double, 2> s{};
      for (std::size_t o = 0; o < 3; ++o) {
        if (o == m) continue;
        const auto smp = trilinear_sample(g.grids[o], ls[o], g.bounds, c);
        s[0] += smp[0];
        s[1] += smp[1];
      }
      for (std::size_t k = 0; k < 2; ++k) {
        const double want = g.grids[m][k * ls[m].voxels() + v] + layers[m].weight.at(k, std::size_t(0)) * s[0] +
                            layers[m].weight.at(k, std::size_t(1)) * s[1];
        EXPECT_NEAR(f.grids[m][k * ls[m].voxels() + v], want, 1e-12);
      }
    }
}

TEST(Fuse, PermutingGridsPermutesOutputs) {
  Rng rng(14);
  std::vector<GridLayout> ls{GridLayout({2, 4, 3}, 0), GridLayout({4, 2, 3}, 1), GridLayout({4, 3, 2}, 2)};
  auto g = random_set(rng, ls, 2);
  std::vector<FusionLayer<double>> layers(3);
  for (auto& l : layers) l.weight = uniform_tensor<double>({2, 2}, 1, rng);
  const auto f = fuse(g, layers);
  const std::array<std::size_t, 3> perm{2, 0, 1};
  auto gp = FactorizedGridSet<double>::zeros({ls[2], ls[0], ls[1]}, g.bounds, 2);
  std::vector<FusionLayer<double>> lp(3);
  for (std::size_t i = 0; i < 3; ++i) {
    gp.grids[i] = g.grids[perm[i]];
    lp[i] = layers[perm[i]];
  }
  const auto fp = fuse(gp, lp);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_abs_diff(fp.grids[i], f.grids[perm[i]]), 1e-14);
}

TEST(Fuse, GradientCheck) {
  Rng rng(15);
  std::vector<GridLayout> ls{GridLayout({2, 3, 3}, 0), GridLayout({3, 2, 3}, 1)};
  FusionPlan<double> plan(ls, Box{});
  const double e = gradient_check<double>(
      [&](Graph<double>& g, std::vector<Var<double>>& v) {
        Binder<double> b(g, false);
        std::vector<FusionLayer<double>> layers(2);
        // mixing weights enter as graph inputs so their gradient is checked too
        auto out0 = add(v[0], reshape(matmul(v[2], interp(v[1], 2, plan.tables[0][1])), v[0].shape()));
        auto out1 = fuse_vars(b, {v[0], v[1]}, 2, layers, plan)[1];
        return add(sum(square(out0)), sum(mul(out1, out1)));
      },
      {uniform_tensor<double>({2, 2, 3, 3}, 1, rng), uniform_tensor<double>({2, 3, 2, 3}, 1, rng),
       uniform_tensor<double>({2, 2}, 1, rng)});
  EXPECT_LT(e, 1e-5);
}
