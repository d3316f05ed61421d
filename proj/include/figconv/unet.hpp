#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "figconv/dataio.hpp"
#include "figconv/fig_conv.hpp"
#include "figconv/point_conv.hpp"

namespace figconv {

struct ModelConfig {
  std::size_t num_levels = 2;
  std::size_t kernel_size = 5;
  std::vector<std::size_t> hidden_channels{16, 32, 48};
  std::vector<std::size_t> num_down_blocks{1, 1};
  std::vector<std::size_t> num_up_blocks{1, 1};
  std::vector<std::array<std::size_t, 3>> resolution_memory_format_pairs{{5, 150, 100}, {250, 3, 100}, {250, 150, 2}};
  Combine combine = Combine::Sum;
  std::size_t pe_frequencies = 0;
  std::uint64_t seed = 0;
  std::size_t point_features = 3;  // unit normals
  bool velocity_conditioning = false;
  double velocity_scale = 1.0 / 30.0;
  Box bounds{{-0.1, -0.3, 0.0}, {1.3, 0.3, 0.5}};
  double sigma_scale = 1.0;
  std::size_t mlp_hidden = 16;
  EdgeEncoding edge_encoding = EdgeEncoding::Offset;

  std::size_t input_features() const { return point_features + (velocity_conditioning ? 1 : 0); }

  void validate() const {
    if (num_levels == 0) throw Error("model config: num_levels must be at least 1");
    if (hidden_channels.size() != num_levels + 1)
      throw Error(detail::cat("model config: hidden_channels has ", hidden_channels.size(), " entries, expected ",
                              num_levels + 1));
    for (auto c : hidden_channels)
      if (c == 0) throw Error("model config: hidden_channels entries must be positive");
    if (num_down_blocks.size() != num_levels)
      throw Error(detail::cat("model config: num_down_blocks has ", num_down_blocks.size(), " entries, expected ",
                              num_levels));
    if (num_up_blocks.size() != num_levels)
      throw Error(detail::cat("model config: num_up_blocks has ", num_up_blocks.size(), " entries, expected ",
                              num_levels));
    for (auto n : num_up_blocks)
      if (n == 0) throw Error("model config: num_up_blocks entries must be at least 1");
    if (kernel_size == 0 || kernel_size % 2 == 0)
      throw Error(detail::cat("model config: kernel_size must be odd, got ", kernel_size));
    if (resolution_memory_format_pairs.empty()) throw Error("model config: resolution_memory_format_pairs is empty");
    for (std::size_t m = 0; m < resolution_memory_format_pairs.size(); ++m) {
      const auto& r = resolution_memory_format_pairs[m];
      std::size_t smallest = 0;
      for (std::size_t a = 0; a < 3; ++a) {
        if (r[a] == 0) throw Error(detail::cat("model config: resolution_memory_format_pairs[", m, "] has a zero extent"));
        if (r[a] < r[smallest]) smallest = a;
      }
      for (std::size_t a = 0; a < 3; ++a)
        if (a != smallest && r[a] == r[smallest])
          throw Error(detail::cat("model config: resolution_memory_format_pairs[", m,
                                  "] must have exactly one smallest (rank) axis"));
    }
    if (mlp_hidden == 0) throw Error("model config: mlp_hidden must be positive");
    if (point_features == 0) throw Error("model config: point_features must be positive");
    if (!(sigma_scale > 0)) throw Error("model config: sigma_scale must be positive");
    bounds.validate();
  }
};

/// FIG convolution + fusion + per-channel layer norm + GELU over all grids.
template <typename T>
struct FigBlock {
  std::size_t in_channels = 0, out_channels = 0;
  std::vector<Tensor<T>> kernels;  // per grid [Co, Ci, K, K, K]
  std::vector<FusionLayer<T>> fusion;
  std::vector<Tensor<T>> gamma, beta;
};

/// Strided FIG convolution halving the plane axes, + bias + GELU.
template <typename T>
struct DownBlock {
  std::size_t in_channels = 0, out_channels = 0;
  std::vector<Tensor<T>> kernels;
  std::vector<Tensor<T>> bias;
};

template <typename T>
struct Model {
  ModelConfig config;
  std::vector<std::vector<GridLayout>> layouts;  // per level
  std::vector<PointConvParams<T>> stem;          // per grid
  std::vector<std::vector<FigBlock<T>>> down;    // per level
  std::vector<DownBlock<T>> downsample;          // level l -> l+1
  std::vector<std::vector<FigBlock<T>>> up;      // per level
  std::vector<DecoderMlp<T>> decoders;           // per grid
  Mlp<T> drag_mlp;
  Mlp<T> pressure_mlp;

  // geometry-only caches
  std::vector<FusionPlan<T>> fusion_plans;                                 // per level
  std::vector<std::vector<std::shared_ptr<const Stencil<T>>>> upsamplers;  // [l][m]: level l+1 -> l

  std::size_t grids() const { return layouts.front().size(); }
  const Box& bounds() const { return config.bounds; }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    auto push_all = [&](const std::string& p, std::vector<Tensor<T>>& ts) {
      for (std::size_t i = 0; i < ts.size(); ++i) out.push_back({p + "." + std::to_string(i), &ts[i]});
    };
    auto push_block = [&](const std::string& p, FigBlock<T>& b) {
      push_all(p + ".kernel", b.kernels);
      for (std::size_t m = 0; m < b.fusion.size(); ++m)
        if (!b.fusion[m].identity()) out.push_back({p + ".fusion." + std::to_string(m), &b.fusion[m].weight});
      push_all(p + ".gamma", b.gamma);
      push_all(p + ".beta", b.beta);
    };
    for (std::size_t m = 0; m < stem.size(); ++m) stem[m].collect("stem." + std::to_string(m), out);
    for (std::size_t l = 0; l < down.size(); ++l)
      for (std::size_t b = 0; b < down[l].size(); ++b)
        push_block("down." + std::to_string(l) + "." + std::to_string(b), down[l][b]);
    for (std::size_t l = 0; l < downsample.size(); ++l) {
      push_all("downsample." + std::to_string(l) + ".kernel", downsample[l].kernels);
      push_all("downsample." + std::to_string(l) + ".bias", downsample[l].bias);
    }
    for (std::size_t l = 0; l < up.size(); ++l)
      for (std::size_t b = 0; b < up[l].size(); ++b)
        push_block("up." + std::to_string(l) + "." + std::to_string(b), up[l][b]);
    for (std::size_t m = 0; m < decoders.size(); ++m) decoders[m].collect("decoder." + std::to_string(m), out);
    drag_mlp.collect("drag_head", out);
    pressure_mlp.collect("pressure_head", out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }
};

namespace detail {

inline std::size_t halve(std::size_t n, std::size_t k) { return conv_out_extent("downsample", "plane", n, (k - 1) / 2, (k - 1) / 2, k, 2); }

template <typename T>
Tensor<T> fig_kernel_init(std::size_t co, std::size_t ci, std::size_t k, std::size_t rank, Rng& rng) {
  const double fan_in = static_cast<double>(ci * k * k * std::min(rank, k));
  return uniform_tensor<T>({co, ci, k, k, k}, std::sqrt(3.0 / fan_in), rng);
}

template <typename T>
FigBlock<T> make_block(std::size_t ci, std::size_t co, const std::vector<GridLayout>& layouts, std::size_t k,
                       Rng& rng) {
  FigBlock<T> b;
  b.in_channels = ci;
  b.out_channels = co;
  for (const auto& l : layouts) {
    b.kernels.push_back(fig_kernel_init<T>(co, ci, k, l.rank(), rng));
    FusionLayer<T> f;
    if (layouts.size() > 1) f.weight = uniform_tensor<T>({co, co}, 0.5 / std::sqrt(static_cast<double>(co)), rng);
    b.fusion.push_back(std::move(f));
    Tensor<T> g({co});
    g.fill(T{1});
    b.gamma.push_back(std::move(g));
    b.beta.emplace_back(Shape{co});
  }
  return b;
}

}  // namespace detail

/// Deterministic construction from config.seed.
template <typename T>
Model<T> build_model(const ModelConfig& config) {
  config.validate();
  Model<T> model;
  model.config = config;
  Rng rng(config.seed);
  const std::size_t K = config.kernel_size, L = config.num_levels;
  const auto& ch = config.hidden_channels;

  std::vector<GridLayout> level0;
  for (const auto& r : config.resolution_memory_format_pairs) level0.push_back(GridLayout::from_resolution(r));
  model.layouts.push_back(level0);
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<GridLayout> next;
    for (const auto& g : model.layouts[l])
      next.push_back(g.with_plane(detail::halve(g.plane0(), K), detail::halve(g.plane1(), K)));
    model.layouts.push_back(next);
  }
  const std::size_t M = level0.size();
  const std::size_t F = config.input_features();

  for (const auto& l : level0)
    model.stem.emplace_back(F, config.mlp_hidden, ch[0], default_sigma(l, config.bounds, config.sigma_scale), rng,
                            config.edge_encoding);
  model.down.resize(L);
  model.up.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t b = 0; b < config.num_down_blocks[l]; ++b)
      model.down[l].push_back(detail::make_block<T>(ch[l], ch[l], model.layouts[l], K, rng));
    DownBlock<T> d;
    d.in_channels = ch[l];
    d.out_channels = ch[l + 1];
    for (const auto& g : model.layouts[l]) {
      d.kernels.push_back(detail::fig_kernel_init<T>(ch[l + 1], ch[l], K, g.rank(), rng));
      d.bias.emplace_back(Shape{ch[l + 1]});
    }
    model.downsample.push_back(std::move(d));
  }
  for (std::size_t l = L; l-- > 0;)
    for (std::size_t b = 0; b < config.num_up_blocks[l]; ++b) {
      const std::size_t ci = b == 0 ? ch[l + 1] + ch[l] : ch[l];
      model.up[l].push_back(detail::make_block<T>(ci, ch[l], model.layouts[l], K, rng));
    }
  const PositionEncoding enc{config.pe_frequencies};
  for (std::size_t m = 0; m < M; ++m)
    model.decoders.emplace_back(std::vector<std::size_t>{ch[0] + enc.width(), config.mlp_hidden, ch[0]}, rng);
  model.drag_mlp = Mlp<T>({M * ch[L] + (config.velocity_conditioning ? 1 : 0), config.mlp_hidden, 1}, rng);
  model.pressure_mlp = Mlp<T>({ch[0] + F, config.mlp_hidden, 1}, rng);

  for (std::size_t l = 0; l <= L; ++l) model.fusion_plans.emplace_back(model.layouts[l], config.bounds);
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<std::shared_ptr<const Stencil<T>>> ups;
    for (std::size_t m = 0; m < M; ++m)
      ups.push_back(resample_stencil<T>(model.layouts[l + 1][m], model.layouts[l][m], config.bounds));
    model.upsamplers.push_back(std::move(ups));
  }
  return model;
}

/// Per-sample geometry caches: stem neighbor lists, decode taps, input
/// features [N, F].
template <typename T>
struct PreparedSample {
  std::vector<PointGridPlan<T>> stem;
  DecodePlan<T> decode;
  Tensor<T> features;
  std::optional<double> velocity;
  std::size_t points = 0;
};

template <typename T>
PreparedSample<T> prepare(const Model<T>& model, std::span<const Vec3> points, std::span<const Vec3> normals,
                          std::optional<double> velocity) {
  const auto& cfg = model.config;
  if (points.empty()) throw Error("forward: empty point cloud");
  if (normals.size() != points.size()) throw Error("forward: normal count differs from point count");
  if (cfg.point_features != 3) throw Error("forward: samples carry 3 features per point (normals)");
  if (cfg.velocity_conditioning && !velocity) throw Error("forward: model is velocity-conditioned but no velocity given");
  PreparedSample<T> s;
  s.points = points.size();
  s.velocity = velocity;
  const std::size_t F = cfg.input_features();
  s.features = Tensor<T>({points.size(), F});
  for (std::size_t n = 0; n < points.size(); ++n) {
    for (int a = 0; a < 3; ++a) s.features[n * F + a] = static_cast<T>(normals[n][a]);
    if (cfg.velocity_conditioning) s.features[n * F + 3] = static_cast<T>(*velocity * cfg.velocity_scale);
  }
  for (std::size_t m = 0; m < model.grids(); ++m)
    s.stem.emplace_back(points, model.layouts[0][m], cfg.bounds, model.stem[m].sigma, cfg.edge_encoding);
  s.decode = DecodePlan<T>(model.layouts[0], cfg.bounds, points, PositionEncoding{cfg.pe_frequencies});
  return s;
}

template <typename T>
PreparedSample<T> prepare(const Model<T>& model, const SurfaceSample& sample) {
  return prepare(model, std::span<const Vec3>(sample.points), std::span<const Vec3>(sample.normals), sample.velocity);
}

namespace detail {

template <typename T>
std::vector<Var<T>> apply_block(Binder<T>& bind, const FigBlock<T>& b, const std::vector<Var<T>>& in,
                                const std::vector<GridLayout>& layouts, const FusionPlan<T>& plan) {
  std::vector<Var<T>> conv;
  for (std::size_t m = 0; m < in.size(); ++m) {
    const auto& l = layouts[m];
    Var<T> y = fig_conv_flat(in[m], l, bind(b.kernels[m]));
    conv.push_back(reshape(y, {b.out_channels, l.rank(), l.plane0(), l.plane1()}));
  }
  auto fused = fuse_vars(bind, conv, b.out_channels, b.fusion, plan);
  for (std::size_t m = 0; m < fused.size(); ++m)
    fused[m] = gelu(channel_layer_norm(fused[m], bind(b.gamma[m]), bind(b.beta[m])));
  return fused;
}

template <typename T>
std::vector<Var<T>> apply_down(Binder<T>& bind, const DownBlock<T>& d, const std::vector<Var<T>>& in,
                               const std::vector<GridLayout>& from, const std::vector<GridLayout>& to) {
  std::vector<Var<T>> out;
  for (std::size_t m = 0; m < in.size(); ++m) {
    Var<T> y = fig_conv_flat(in[m], from[m], bind(d.kernels[m]), 2);
    const auto& l = to[m];
    y = reshape(y, {d.out_channels, l.rank(), l.plane0(), l.plane1()});
    out.push_back(gelu(add_channel_bias(y, bind(d.bias[m]))));
  }
  return out;
}

}  // namespace detail

/// Global mean pool per grid, concatenation (+ scaled inlet velocity), then a
/// two-layer MLP. Returns [1, 1].
template <typename T>
Var<T> drag_head(Binder<T>& bind, const Model<T>& model, const std::vector<Var<T>>& bottleneck,
                 std::optional<double> velocity = {}) {
  const std::size_t C = model.config.hidden_channels.back();
  std::vector<Var<T>> pooled;
  for (const auto& g : bottleneck) pooled.push_back(reshape(channel_mean(g, C), {1, C}));
  if (model.config.velocity_conditioning) {
    if (!velocity) throw Error("drag head: velocity required");
    pooled.push_back(bind.graph().constant(Tensor<T>({1, 1}, std::vector<T>{static_cast<T>(*velocity * model.config.velocity_scale)})));
  }
  return model.drag_mlp(bind, concat(pooled, 1));
}

template <typename T>
struct ForwardVars {
  Var<T> drag;      // [1, 1]
  Var<T> pressure;  // [N, 1]
};

template <typename T>
ForwardVars<T> forward_vars(Binder<T>& bind, const Model<T>& model, const PreparedSample<T>& s) {
  const auto& cfg = model.config;
  const std::size_t L = cfg.num_levels, M = model.grids();
  const auto& ch = cfg.hidden_channels;
  Graph<T>& g = bind.graph();
  if (s.stem.size() != M) throw Error("forward: sample was prepared for a different model");
  Var<T> feats = g.constant(s.features);

  std::vector<Var<T>> x;
  for (std::size_t m = 0; m < M; ++m) x.push_back(point_to_grid(bind, feats, model.stem[m], s.stem[m]));

  std::vector<std::vector<Var<T>>> skips;
  for (std::size_t l = 0; l < L; ++l) {
    for (const auto& b : model.down[l]) x = detail::apply_block(bind, b, x, model.layouts[l], model.fusion_plans[l]);
    skips.push_back(x);
    x = detail::apply_down(bind, model.downsample[l], x, model.layouts[l], model.layouts[l + 1]);
  }
  Var<T> drag = drag_head(bind, model, x, s.velocity);

  for (std::size_t l = L; l-- > 0;) {
    std::vector<Var<T>> merged;
    for (std::size_t m = 0; m < M; ++m) {
      const auto& lay = model.layouts[l][m];
      Var<T> upv = interp(x[m], ch[l + 1], model.upsamplers[l][m], {ch[l + 1], lay.rank(), lay.plane0(), lay.plane1()});
      merged.push_back(concat<T>({upv, skips[l][m]}, 0));
    }
    x = merged;
    for (const auto& b : model.up[l]) x = detail::apply_block(bind, b, x, model.layouts[l], model.fusion_plans[l]);
  }

  Var<T> decoded = decode_points(bind, x, ch[0], model.decoders, s.decode, cfg.combine);
  Var<T> pressure = model.pressure_mlp(bind, concat<T>({decoded, feats}, 1));
  return {drag, pressure};
}

template <typename T>
struct Prediction {
  T drag{};
  std::vector<T> pressure;
};

template <typename T>
Prediction<T> forward(const Model<T>& model, const PreparedSample<T>& s) {
  Graph<T> g;
  Binder<T> bind(g, false);
  auto out = forward_vars(bind, model, s);
  Prediction<T> p;
  p.drag = out.drag.value()[0];
  const auto& pv = out.pressure.value();
  p.pressure.assign(pv.data().begin(), pv.data().end());
  return p;
}

template <typename T>
Prediction<T> forward(const Model<T>& model, const SurfaceSample& sample) {
  return forward(model, prepare(model, sample));
}

/// Independent per-sample forwards; outputs in input order.
template <typename T>
std::vector<Prediction<T>> forward_batch(const Model<T>& model, std::span<const PreparedSample<T>> batch,
                                         std::size_t workers = 0) {
  std::vector<Prediction<T>> out(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { out[i] = forward(model, batch[i]); }, workers);
  return out;
}

}  // namespace figconv
