#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "figconv/geometry.hpp"
#include "figconv/nn.hpp"

namespace figconv {

/// Maximum explicit resolution plus per-axis ranks of the three factorized
/// grids F_x (r_x x W x D), F_y (H x r_y x D), F_z (H x W x r_z).
struct GridSpec {
  std::array<std::size_t, 3> max_resolution{1, 1, 1};
  std::array<std::size_t, 3> ranks{1, 1, 1};
  std::size_t channels = 1;
  Box bounds;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (max_resolution[a] == 0) throw Error(detail::cat("grid spec: max_resolution[", a, "] is zero"));
      if (ranks[a] == 0 || ranks[a] > max_resolution[a])
        throw Error(detail::cat("grid spec: rank[", a, "] = ", ranks[a], " outside [1, ", max_resolution[a], "]"));
    }
    if (channels == 0) throw Error("grid spec: zero channels");
    bounds.validate();
  }

  /// Resolution of grid m: max_resolution with axis m replaced by its rank.
  std::array<std::size_t, 3> resolution(std::size_t m) const {
    auto r = max_resolution;
    r[m] = ranks[m];
    return r;
  }
};

struct Cardinality {
  std::array<std::uint64_t, 3> per_grid{};
  std::uint64_t total = 0;
  std::uint64_t explicit_grid = 0;
};

/// Element counts |F_m| per grid, their sum, and H*W*D of the explicit grid
/// (channels excluded).
inline Cardinality cardinality(const GridSpec& spec) {
  spec.validate();
  Cardinality c;
  for (std::size_t m = 0; m < 3; ++m) {
    const auto r = spec.resolution(m);
    c.per_grid[m] = std::uint64_t(r[0]) * r[1] * r[2];
    c.total += c.per_grid[m];
  }
  c.explicit_grid = std::uint64_t(spec.max_resolution[0]) * spec.max_resolution[1] * spec.max_resolution[2];
  return c;
}

/// Memory layout of one factorized grid: [C, r, a, b] where r runs along the
/// rank axis and (a, b) along the two remaining physical axes in x,y,z order.
/// Viewed as [C*r, a, b] this is directly the flattened 2-D input.
struct GridLayout {
  std::array<std::size_t, 3> resolution{1, 1, 1};
  int rank_axis = 0;

  GridLayout() = default;
  GridLayout(std::array<std::size_t, 3> res, int rank_axis_) : resolution(res), rank_axis(rank_axis_) {
    if (rank_axis < 0 || rank_axis > 2) throw Error(detail::cat("grid layout: rank axis ", rank_axis));
    for (int a = 0; a < 3; ++a)
      if (res[a] == 0) throw Error(detail::cat("grid layout: zero extent on axis ", a));
  }

  /// Rank axis = the axis with the smallest extent (first on ties).
  static GridLayout from_resolution(std::array<std::size_t, 3> res) {
    int ax = 0;
    for (int a = 1; a < 3; ++a)
      if (res[a] < res[ax]) ax = a;
    return GridLayout(res, ax);
  }

  std::array<int, 2> plane_axes() const {
    switch (rank_axis) {
      case 0: return {1, 2};
      case 1: return {0, 2};
      default: return {0, 1};
    }
  }
  std::size_t rank() const { return resolution[rank_axis]; }
  std::size_t plane0() const { return resolution[plane_axes()[0]]; }
  std::size_t plane1() const { return resolution[plane_axes()[1]]; }
  std::size_t voxels() const { return resolution[0] * resolution[1] * resolution[2]; }

  /// Linear voxel index (rank index slowest) of physical voxel coordinates.
  std::size_t voxel_index(const std::array<std::size_t, 3>& ijk) const {
    const auto p = plane_axes();
    return (ijk[rank_axis] * plane0() + ijk[p[0]]) * plane1() + ijk[p[1]];
  }

  std::array<std::size_t, 3> voxel_coords(std::size_t v) const {
    const auto p = plane_axes();
    std::array<std::size_t, 3> ijk{};
    ijk[p[1]] = v % plane1();
    v /= plane1();
    ijk[p[0]] = v % plane0();
    ijk[rank_axis] = v / plane0();
    return ijk;
  }

  /// Same layout with the plane axes set to new extents (rank axis kept).
  GridLayout with_plane(std::size_t a, std::size_t b) const {
    auto res = resolution;
    const auto p = plane_axes();
    res[p[0]] = a;
    res[p[1]] = b;
    return GridLayout(res, rank_axis);
  }

  friend bool operator==(const GridLayout&, const GridLayout&) = default;
};

/// Physical voxel center: lo + (idx + 0.5) * extent / resolution per axis.
inline Vec3 voxel_center(const GridLayout& layout, const Box& bounds, std::size_t v) {
  const auto ijk = layout.voxel_coords(v);
  const Vec3 ext = bounds.extent();
  Vec3 c;
  for (int a = 0; a < 3; ++a)
    c[a] = bounds.lo[a] + (static_cast<double>(ijk[a]) + 0.5) * ext[a] / static_cast<double>(layout.resolution[a]);
  return c;
}

inline std::vector<Vec3> voxel_centers(const GridLayout& layout, const Box& bounds) {
  std::vector<Vec3> out(layout.voxels());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = voxel_center(layout, bounds, v);
  return out;
}

/// Eight trilinear taps (voxel index, weight) of a physical point. Queries
/// outside the voxel-center hull clamp to the boundary centers; along an axis
/// with a single voxel both corners coincide.
inline std::array<std::pair<std::uint32_t, double>, 8> trilinear_taps(const GridLayout& layout, const Box& bounds,
                                                                       const Vec3& v) {
  std::array<std::size_t, 3> i0{}, i1{};
  std::array<double, 3> t{};
  const Vec3 ext = bounds.extent();
  for (int a = 0; a < 3; ++a) {
    const std::size_t n = layout.resolution[a];
    double u = (v[a] - bounds.lo[a]) / ext[a] * static_cast<double>(n) - 0.5;
    if (!std::isfinite(u)) throw Error(detail::cat("trilinear: non-finite coordinate on axis ", a));
    u = std::clamp(u, 0.0, static_cast<double>(n - 1));
    std::size_t lo = static_cast<std::size_t>(std::floor(u));
    if (n >= 2) lo = std::min(lo, n - 2);
    else lo = 0;
    i0[a] = lo;
    i1[a] = std::min(lo + 1, n - 1);
    t[a] = n >= 2 ? u - static_cast<double>(lo) : 0.0;
  }
  std::array<std::pair<std::uint32_t, double>, 8> taps;
  for (int k = 0; k < 8; ++k) {
    std::array<std::size_t, 3> ijk{};
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
      const bool hi = (k >> (2 - a)) & 1;
      ijk[a] = hi ? i1[a] : i0[a];
      w *= hi ? t[a] : 1.0 - t[a];
    }
    taps[k] = {static_cast<std::uint32_t>(layout.voxel_index(ijk)), w};
  }
  return taps;
}

template <typename T>
std::shared_ptr<const Stencil<T>> trilinear_stencil(const GridLayout& layout, const Box& bounds,
                                                    std::span<const Vec3> points) {
  auto st = std::make_shared<Stencil<T>>();
  st->queries = points.size();
  st->taps = 8;
  st->index.reserve(points.size() * 8);
  st->weight.reserve(points.size() * 8);
  for (const auto& p : points)
    for (const auto& [idx, w] : trilinear_taps(layout, bounds, p)) {
      st->index.push_back(idx);
      st->weight.push_back(static_cast<T>(w));
    }
  return st;
}

/// Trilinear feature sample of a grid tensor [C, ...] at physical point v.
template <typename T>
std::vector<T> trilinear_sample(const Tensor<T>& grid, const GridLayout& layout, const Box& bounds, const Vec3& v) {
  const std::size_t V = layout.voxels();
  if (V == 0 || grid.size() % V != 0)
    throw Error(detail::cat("trilinear_sample: grid of ", grid.size(), " values does not match layout"));
  const std::size_t C = grid.size() / V;
  std::vector<T> out(C, T{0});
  for (const auto& [idx, w] : trilinear_taps(layout, bounds, v))
    for (std::size_t c = 0; c < C; ++c) out[c] += static_cast<T>(w) * grid[c * V + idx];
  return out;
}

/// Set of M factorized grids sharing bounds and channel count. Grid m is a
/// tensor [C, r_m, a_m, b_m] laid out per layouts[m].
template <typename T>
struct FactorizedGridSet {
  std::vector<GridLayout> layouts;
  std::vector<Tensor<T>> grids;
  Box bounds;
  std::size_t channels = 0;

  std::size_t size() const { return grids.size(); }

  static FactorizedGridSet zeros(const std::vector<GridLayout>& layouts, const Box& bounds, std::size_t channels) {
    FactorizedGridSet s;
    s.layouts = layouts;
    s.bounds = bounds;
    s.channels = channels;
    for (const auto& l : layouts) s.grids.emplace_back(Shape{channels, l.rank(), l.plane0(), l.plane1()});
    return s;
  }

  static FactorizedGridSet from_spec(const GridSpec& spec) {
    spec.validate();
    std::vector<GridLayout> ls;
    for (std::size_t m = 0; m < 3; ++m) ls.emplace_back(spec.resolution(m), static_cast<int>(m));
    return zeros(ls, spec.bounds, spec.channels);
  }

  void validate() const {
    bounds.validate();
    if (layouts.size() != grids.size()) throw Error("grid set: layout count differs from grid count");
    for (std::size_t m = 0; m < grids.size(); ++m) {
      const auto& l = layouts[m];
      const Shape want{channels, l.rank(), l.plane0(), l.plane1()};
      if (grids[m].shape() != want)
        throw Error(detail::cat("grid set: grid ", m, " has shape ", shape_str(grids[m].shape()), ", expected ",
                                shape_str(want)));
    }
  }
};

// ---------------------------------------------------------------------------
// Decoding

enum class Combine { Sum, Product };

/// Positional encoding of a query point: coordinates normalized to [0,1]^3,
/// optionally followed by sin/cos(2^k pi u) for k < frequencies.
struct PositionEncoding {
  std::size_t frequencies = 0;

  std::size_t width() const { return 3 + 6 * frequencies; }

  template <typename T>
  void encode(const Box& bounds, const Vec3& v, T* out) const {
    const Vec3 ext = bounds.extent();
    std::array<double, 3> u;
    for (int a = 0; a < 3; ++a) {
      u[a] = std::clamp((v[a] - bounds.lo[a]) / ext[a], 0.0, 1.0);
      out[a] = static_cast<T>(u[a]);
    }
    std::size_t o = 3;
    for (std::size_t k = 0; k < frequencies; ++k) {
      const double f = std::ldexp(std::numbers::pi, static_cast<int>(k));
      for (int a = 0; a < 3; ++a) {
        out[o++] = static_cast<T>(std::sin(f * u[a]));
        out[o++] = static_cast<T>(std::cos(f * u[a]));
      }
    }
  }
};

/// Per-grid decoder MLP theta_m. Input = grid channels + encoding width. One
/// parameter set per grid, shared across the eight corners.
template <typename T>
using DecoderMlp = Mlp<T>;

/// Precomputed tap tables and encodings for decoding a fixed point set.
template <typename T>
struct DecodePlan {
  std::vector<std::shared_ptr<const Stencil<T>>> stencils;
  Tensor<T> encoding;  // [N*8, E], each point's encoding repeated per corner
  std::size_t points = 0;

  DecodePlan() = default;
  DecodePlan(const std::vector<GridLayout>& layouts, const Box& bounds, std::span<const Vec3> pts,
             const PositionEncoding& enc)
      : points(pts.size()) {
    for (const auto& l : layouts) stencils.push_back(trilinear_stencil<T>(l, bounds, pts));
    const std::size_t E = enc.width();
    encoding = Tensor<T>({pts.size() * 8, E});
    std::vector<T> row(E);
    for (std::size_t n = 0; n < pts.size(); ++n) {
      enc.encode(bounds, pts[n], row.data());
      for (std::size_t k = 0; k < 8; ++k) std::copy(row.begin(), row.end(), encoding.ptr() + (n * 8 + k) * E);
    }
  }
};

/// Graph-level decode of grid features at the plan's points: per grid, the
/// decoder runs on every corner feature concatenated with the encoded point;
/// corners are merged by trilinear-weighted sum (Combine::Sum) or plain
/// product (Combine::Product), then grids are merged the same way.
/// `grids[m]` holds grid m's values ([C, ...], channel-first).
template <typename T>
Var<T> decode_points(Binder<T>& bind, const std::vector<Var<T>>& grids, std::size_t channels,
                     const std::vector<DecoderMlp<T>>& decoders, const DecodePlan<T>& plan, Combine combine) {
  if (grids.size() != decoders.size() || grids.size() != plan.stencils.size())
    throw Error("decode: grid, decoder and plan counts differ");
  if (grids.empty()) throw Error("decode: no grids");
  Var<T> enc = bind.graph().constant(plan.encoding);
  std::optional<Var<T>> acc;
  for (std::size_t m = 0; m < grids.size(); ++m) {
    const auto& dec = decoders[m];
    if (dec.in_width() != channels + plan.encoding.extent(1))
      throw Error(detail::cat("decode: decoder ", m, " expects input width ", dec.in_width(), ", got ",
                              channels + plan.encoding.extent(1)));
    Var<T> corners = gather_taps(grids[m], channels, plan.stencils[m]);
    Var<T> out = dec(bind, concat<T>({corners, enc}, 1));
    Var<T> merged = combine == Combine::Sum ? tap_weighted_sum(out, plan.stencils[m]) : tap_product(out, 8);
    if (!acc) acc = merged;
    else acc = combine == Combine::Sum ? add(*acc, merged) : mul(*acc, merged);
  }
  return *acc;
}

/// Decoded feature vector at a single point.
template <typename T>
std::vector<T> decode_point(const Vec3& v, const FactorizedGridSet<T>& grids, const std::vector<DecoderMlp<T>>& decoders,
                            Combine combine, const PositionEncoding& enc = {}) {
  grids.validate();
  Graph<T> g;
  Binder<T> bind(g, false);
  std::vector<Var<T>> gv;
  for (const auto& t : grids.grids) gv.push_back(g.constant(t));
  const Vec3 pts[1] = {v};
  DecodePlan<T> plan(grids.layouts, grids.bounds, pts, enc);
  Var<T> out = decode_points(bind, gv, grids.channels, decoders, plan, combine);
  const auto& val = out.value();
  return std::vector<T>(val.data().begin(), val.data().end());
}

// ---------------------------------------------------------------------------
// Fusion

/// Stencil sampling grid `src` at the voxel centers of grid `dst`.
template <typename T>
std::shared_ptr<const Stencil<T>> resample_stencil(const GridLayout& src, const GridLayout& dst, const Box& bounds) {
  const auto centers = voxel_centers(dst, bounds);
  return trilinear_stencil<T>(src, bounds, centers);
}

/// Fusion tables for a fixed set of layouts: tables[m][m'] samples m' at the
/// voxel centers of m (null on the diagonal).
template <typename T>
struct FusionPlan {
  std::vector<std::vector<std::shared_ptr<const Stencil<T>>>> tables;

  FusionPlan() = default;
  FusionPlan(const std::vector<GridLayout>& layouts, const Box& bounds) {
    const std::size_t M = layouts.size();
    tables.assign(M, std::vector<std::shared_ptr<const Stencil<T>>>(M));
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t o = 0; o < M; ++o)
        if (o != m) tables[m][o] = resample_stencil<T>(layouts[o], layouts[m], bounds);
  }
};

/// Per-grid fusion map applied to the summed samples from the other grids:
/// a [C,C] channel-mixing matrix, or the identity when `weight` is empty.
template <typename T>
struct FusionLayer {
  Tensor<T> weight;

  bool identity() const { return weight.empty(); }
};

/// Synchronous fusion: every output grid is its input plus the fusion layer
/// applied to the sum of the other input grids sampled at its voxel centers.
template <typename T>
std::vector<Var<T>> fuse_vars(Binder<T>& bind, const std::vector<Var<T>>& grids, std::size_t channels,
                              const std::vector<FusionLayer<T>>& layers, const FusionPlan<T>& plan) {
  const std::size_t M = grids.size();
  if (layers.size() != M || plan.tables.size() != M) throw Error("fuse: grid, layer and plan counts differ");
  std::vector<Var<T>> out;
  out.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    std::optional<Var<T>> acc;
    for (std::size_t o = 0; o < M; ++o) {
      if (o == m) continue;
      Var<T> s = interp(grids[o], channels, plan.tables[m][o]);
      acc = acc ? add(*acc, s) : s;
    }
    if (!acc) {
      out.push_back(grids[m]);
      continue;
    }
    Var<T> mixed = layers[m].identity() ? *acc : matmul(bind(layers[m].weight), *acc);
    out.push_back(add(grids[m], reshape(mixed, grids[m].shape())));
  }
  return out;
}

/// Value-level fusion of a grid set.
template <typename T>
FactorizedGridSet<T> fuse(const FactorizedGridSet<T>& grids, const std::vector<FusionLayer<T>>& layers) {
  grids.validate();
  Graph<T> g;
  Binder<T> bind(g, false);
  std::vector<Var<T>> in;
  for (const auto& t : grids.grids) in.push_back(g.constant(t));
  FusionPlan<T> plan(grids.layouts, grids.bounds);
  auto out = fuse_vars(bind, in, grids.channels, layers, plan);
  FactorizedGridSet<T> res = grids;
  for (std::size_t m = 0; m < out.size(); ++m) res.grids[m] = out[m].value();
  return res;
}

}  // namespace figconv
