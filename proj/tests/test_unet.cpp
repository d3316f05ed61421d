#include <gtest/gtest.h>

#include <cmath>

#include "figconv/unet.hpp"

using namespace figconv;

namespace {

struct Cloud {
  std::vector<Vec3> points, normals;
};

Cloud random_cloud(Rng& rng, std::size_t n, const Box& b) {
  Cloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.push_back({rng.uniform(b.lo[0], b.hi[0]), rng.uniform(b.lo[1], b.hi[1]), rng.uniform(b.lo[2], b.hi[2])});
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    c.normals.push_back(d * (1.0 / norm(d)));
  }
  return c;
}

ModelConfig tiny(std::size_t levels = 1) {
  ModelConfig cfg;
  cfg.num_levels = levels;
  cfg.kernel_size = 3;
  cfg.hidden_channels.assign(levels + 1, 0);
  for (std::size_t l = 0; l <= levels; ++l) cfg.hidden_channels[l] = 4 * (l + 1);
  cfg.num_down_blocks.assign(levels, 1);
  cfg.num_up_blocks.assign(levels, 1);
  cfg.resolution_memory_format_pairs = {{2, 8, 6}, {8, 2, 6}, {8, 6, 2}};
  cfg.mlp_hidden = 8;
  return cfg;
}

template <typename T>
PreparedSample<T> prep(const Model<T>& m, const Cloud& c, std::optional<double> v = {}) {
  return prepare(m, std::span<const Vec3>(c.points), std::span<const Vec3>(c.normals), v);
}

}  // namespace

TEST(BuildModel, AppendixDefaultForwardShapes) {
  ModelConfig cfg;
  ASSERT_EQ(cfg.num_levels, 2u);
  ASSERT_EQ(cfg.kernel_size, 5u);
  ASSERT_EQ(cfg.hidden_channels, (std::vector<std::size_t>{16, 32, 48}));
  auto m = build_model<float>(cfg);
  EXPECT_GT(m.parameter_count(), 0u);
  Rng rng(1);
  const auto c = random_cloud(rng, 1000, cfg.bounds);
  const auto p = forward(m, prep(m, c));
  EXPECT_EQ(p.pressure.size(), 1000u);
  EXPECT_TRUE(std::isfinite(p.drag));
  for (float v : p.pressure) ASSERT_TRUE(std::isfinite(v));
}

TEST(BuildModel, SameSeedSameParameters) {
  auto a = build_model<float>(tiny(2));
  auto b = build_model<float>(tiny(2));
  auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
  }
  auto cfg = tiny(2);
  cfg.seed = 1;
  auto c = build_model<float>(cfg);
  EXPECT_NE(*c.parameters()[0].tensor, *pa[0].tensor);
}

TEST(BuildModel, MinimalModel) {
  ModelConfig cfg;
  cfg.num_levels = 1;
  cfg.hidden_channels = {4, 8};
  cfg.num_down_blocks = {1};
  cfg.num_up_blocks = {1};
  cfg.kernel_size = 3;
  cfg.resolution_memory_format_pairs = {{2, 16, 8}, {16, 2, 8}, {16, 8, 2}};
  auto m = build_model<double>(cfg);
  Rng rng(2);
  const auto c = random_cloud(rng, 64, cfg.bounds);
  const auto p = forward(m, prep(m, c));
  EXPECT_EQ(p.pressure.size(), 64u);
  EXPECT_EQ(m.layouts[1][0].resolution, (std::array<std::size_t, 3>{2, 8, 4}));
}

TEST(BuildModel, ValidationNamesField) {
  auto expect_field = [](ModelConfig cfg, const std::string& field) {
    try {
      build_model<float>(cfg);
      ADD_FAILURE() << field;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  auto c = tiny();
  c.hidden_channels = {4, 8, 16};
  expect_field(c, "hidden_channels");
  c = tiny();
  c.num_down_blocks = {1, 1};
  expect_field(c, "num_down_blocks");
  c = tiny();
  c.num_up_blocks = {};
  expect_field(c, "num_up_blocks");
  c = tiny();
  c.kernel_size = 4;
  expect_field(c, "kernel_size");
  c = tiny();
  c.num_levels = 0;
  expect_field(c, "num_levels");
  c = tiny();
  c.resolution_memory_format_pairs = {{2, 2, 6}};
  expect_field(c, "resolution_memory_format_pairs");
  c = tiny();
  c.resolution_memory_format_pairs = {};
  expect_field(c, "resolution_memory_format_pairs");
}

TEST(Forward, DeterministicAndBatchIndependent) {
  auto m = build_model<float>(tiny());
  Rng rng(3);
  const auto c = random_cloud(rng, 200, m.bounds());
  const auto s = prep(m, c);
  const auto a = forward(m, s), b = forward(m, s);
  EXPECT_EQ(a.drag, b.drag);
  EXPECT_EQ(a.pressure, b.pressure);
  const std::vector<PreparedSample<float>> batch{s, s};
  for (std::size_t workers : {1, 2}) {
    const auto out = forward_batch<float>(m, batch, workers);
    for (const auto& o : out) {
      EXPECT_EQ(o.drag, a.drag);
      EXPECT_EQ(o.pressure, a.pressure);
    }
  }
}

TEST(Forward, ZeroFeaturesStayFinite) {
  auto m = build_model<double>(tiny());
  Rng rng(4);
  auto c = random_cloud(rng, 100, m.bounds());
  for (auto& n : c.normals) n = {0, 0, 0};
  const auto p = forward(m, prep(m, c));
  EXPECT_TRUE(std::isfinite(p.drag));
  for (double v : p.pressure) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, Errors) {
  auto m = build_model<float>(tiny());
  EXPECT_THROW(prep(m, Cloud{}), Error);
  auto cfg = tiny();
  cfg.velocity_conditioning = true;
  auto mv = build_model<float>(cfg);
  Rng rng(5);
  const auto c = random_cloud(rng, 10, cfg.bounds);
  EXPECT_THROW(prep(mv, c), Error);
  const auto a = forward(mv, prep(mv, c, 20.0)), b = forward(mv, prep(mv, c, 40.0));
  EXPECT_NE(a.drag, b.drag);
}

TEST(DragHead, ZeroBottleneckIsConstant) {
  auto m = build_model<double>(tiny());
  const std::size_t C = m.config.hidden_channels.back();
  Graph<double> g;
  Binder<double> bind(g, false);
  std::vector<Var<double>> zero;
  for (const auto& l : m.layouts.back()) zero.push_back(g.constant(Tensor<double>({C, l.rank(), l.plane0(), l.plane1()})));
  const double got = drag_head(bind, m, zero).value()[0];
  // two-layer head on a zero input: w1^T gelu(b0) + b1
  const auto& b0 = m.drag_mlp.biases[0];
  const auto& w1 = m.drag_mlp.weights[1];
  double want = m.drag_mlp.biases[1][0];
  for (std::size_t h = 0; h < b0.size(); ++h) {
    const double x = b0[h];
    want += w1[h] * 0.5 * x * (1 + std::erf(x / std::sqrt(2.0)));
  }
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(DragHead, VoxelPermutationInvariant) {
  auto m = build_model<double>(tiny());
  const std::size_t C = m.config.hidden_channels.back();
  Rng rng(6);
  std::vector<Tensor<double>> grids;
  for (const auto& l : m.layouts.back()) grids.push_back(uniform_tensor<double>({C, l.rank(), l.plane0(), l.plane1()}, 1, rng));
  auto head = [&](const std::vector<Tensor<double>>& gs) {
    Graph<double> g;
    Binder<double> bind(g, false);
    std::vector<Var<double>> v;
    for (const auto& t : gs) v.push_back(g.constant(t));
    return drag_head(bind, m, v).value()[0];
  };
  const double before = head(grids);
  auto shuffled = grids;
  const std::size_t V = m.layouts.back()[1].voxels();
  const auto perm = rng.permutation(V);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t v = 0; v < V; ++v) shuffled[1][c * V + v] = grids[1][c * V + perm[v]];
  EXPECT_NEAR(head(shuffled), before, 1e-13);
}

TEST(DragHead, GradientCheck) {
  auto m = build_model<double>(tiny());
  const std::size_t C = m.config.hidden_channels.back();
  Rng rng(7);
  for (int it = 0; it < 10; ++it) {
    std::vector<Tensor<double>> grids;
    for (const auto& l : m.layouts.back()) grids.push_back(uniform_tensor<double>({C, l.rank(), l.plane0(), l.plane1()}, 1, rng));
    const double e = gradient_check<double>(
        [&](Graph<double>& g, std::vector<Var<double>>& v) {
          Binder<double> bind(g, false);
          return drag_head(bind, m, v);
        },
        grids);
    EXPECT_LT(e, 1e-5);
  }
}

TEST(Shapes, UpPathMatchesDownPathForRandomConfigs) {
  Rng rng(8);
  for (int it = 0; it < 12; ++it) {
    ModelConfig cfg;
    cfg.num_levels = 1 + rng.below(3);
    cfg.kernel_size = 1 + 2 * rng.below(3);
    cfg.hidden_channels.clear();
    for (std::size_t l = 0; l <= cfg.num_levels; ++l) cfg.hidden_channels.push_back(1 + rng.below(4));
    cfg.num_down_blocks.clear();
    cfg.num_up_blocks.clear();
    for (std::size_t l = 0; l < cfg.num_levels; ++l) {
      cfg.num_down_blocks.push_back(rng.below(3));
      cfg.num_up_blocks.push_back(1 + rng.below(2));
    }
    cfg.resolution_memory_format_pairs.clear();
    const std::size_t M = 1 + rng.below(3);
    for (std::size_t m = 0; m < M; ++m) {
      std::array<std::size_t, 3> r{};
      const std::size_t ax = rng.below(3);
      for (std::size_t a = 0; a < 3; ++a) r[a] = a == ax ? 1 + rng.below(3) : 4 + rng.below(10);
      cfg.resolution_memory_format_pairs.push_back(r);
    }
    cfg.combine = rng.below(2) ? Combine::Sum : Combine::Product;
    cfg.mlp_hidden = 4;
    auto model = build_model<double>(cfg);
    const std::size_t L = cfg.num_levels;
    ASSERT_EQ(model.layouts.size(), L + 1);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t m = 0; m < M; ++m) {
        // upsampling from level l+1 lands exactly on the level-l skip grid
        EXPECT_EQ(model.upsamplers[l][m]->queries, model.layouts[l][m].voxels());
        EXPECT_EQ(model.layouts[l + 1][m].rank(), model.layouts[l][m].rank());
      }
    const auto c = random_cloud(rng, 50, cfg.bounds);
    Graph<double> g;
    Binder<double> bind(g, false);
    const auto out = forward_vars(bind, model, prep(model, c));
    EXPECT_EQ(out.drag.shape(), (Shape{1, 1}));
    EXPECT_EQ(out.pressure.shape(), (Shape{50, 1}));
  }
}

TEST(Gradients, EveryParameterEndToEnd) {
  ModelConfig cfg;
  cfg.num_levels = 1;
  cfg.kernel_size = 3;
  cfg.hidden_channels = {2, 3};
  cfg.num_down_blocks = {1};
  cfg.num_up_blocks = {1};
  cfg.resolution_memory_format_pairs = {{2, 4, 4}, {4, 2, 4}, {4, 4, 2}};
  cfg.mlp_hidden = 3;
  cfg.bounds = Box{{0, 0, 0}, {1, 1, 1}};
  auto m = build_model<double>(cfg);
  Rng rng(9);
  const auto c = random_cloud(rng, 30, cfg.bounds);
  const auto s = prep(m, c);
  auto loss_value = [&] {
    const auto p = forward(m, s);
    double l = p.drag * p.drag;
    for (double v : p.pressure) l += v * v;
    return l;
  };
  Graph<double> g;
  Binder<double> bind(g, true);
  const auto out = forward_vars(bind, m, s);
  const auto grads = g.backward(add(sum(square(out.drag)), sum(square(out.pressure))));
  double worst = 0;
  std::size_t checked = 0;
  const double step = 1e-5;
  for (auto& p : m.parameters()) {
    const Tensor<double> analytic = bind.gradient(grads, *p.tensor);
    for (std::size_t i = 0; i < p.tensor->size(); ++i) {
      double& x = (*p.tensor)[i];
      const double orig = x;
      x = orig + step;
      const double up = loss_value();
      x = orig - step;
      const double down = loss_value();
      x = orig;
      const double numeric = (up - down) / (2 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
      const double e = std::abs(analytic[i] - numeric) / denom;
      EXPECT_LT(e, 1e-4) << p.name << "[" << i << "] analytic " << analytic[i] << " numeric " << numeric;
      worst = std::max(worst, e);
      ++checked;
    }
  }
  EXPECT_EQ(checked, m.parameter_count());
  EXPECT_LT(worst, 1e-4);
}

TEST(Macs, ForwardMatchesClosedFormAndConvDominates) {
  ModelConfig cfg;
  auto m = build_model<float>(cfg);
  Rng rng(10);
  const std::size_t N = 1000;
  const auto c = random_cloud(rng, N, cfg.bounds);
  const auto s = prep(m, c);
  MacCounter mc;
  {
    MacCounter::Scope scope(mc);
    forward(m, s);
  }
  const auto& ch = cfg.hidden_channels;
  const std::size_t K = cfg.kernel_size, L = cfg.num_levels, M = m.grids();
  std::uint64_t dense = 0, voxels0 = 0;
  for (std::size_t g = 0; g < M; ++g) {
    voxels0 += m.layouts[0][g].voxels();
    for (std::size_t l = 0; l < L; ++l) {
      const auto& lay = m.layouts[l][g];
      // (M blocks) * r^2 C^2 K^2 per plane position
      auto fig = [&](std::size_t ci, std::size_t co, std::size_t stride) {
        const std::size_t r = lay.rank(), P = (K - 1) / 2;
        const std::size_t A = (lay.plane0() + 2 * P - K) / stride + 1, B = (lay.plane1() + 2 * P - K) / stride + 1;
        return std::uint64_t(ci) * r * co * r * K * K * A * B;
      };
      dense += cfg.num_down_blocks[l] * fig(ch[l], ch[l], 1);
      dense += fig(ch[l], ch[l + 1], 2);
      dense += fig(ch[l + 1] + ch[l], ch[l], 1) + (cfg.num_up_blocks[l] - 1) * fig(ch[l], ch[l], 1);
    }
  }
  EXPECT_EQ(mc.total().dense, dense);
  // generous bound on everything outside the convolutions: point MLPs over every
  // stem edge and decode corner, fusion matmuls and heads
  std::uint64_t edges = 0;
  for (const auto& p : s.stem) edges += p.edges();
  const std::uint64_t h = cfg.mlp_hidden, F = cfg.input_features();
  std::uint64_t other = edges * ((F + 6) * h + h * h) + voxels0 * (h * h + h * ch[0]);
  other += std::uint64_t(N) * 8 * M * ((ch[0] + 3) * h + h * ch[0]) + N * ((ch[0] + F) * h + h);
  for (std::size_t l = 0; l <= L; ++l) {
    std::uint64_t vox = 0;
    for (const auto& lay : m.layouts[l]) vox += lay.voxels();
    other += 4 * vox * M * ch[l] * ch[l];
  }
  EXPECT_GT(mc.total().dense, 20 * other) << "conv " << mc.total().dense << " other " << other;
}
