#pragma once

#include <algorithm>
#include <memory>
#include <span>
#include <vector>

#include "figconv/factorized_grid.hpp"
#include "figconv/spatial_hash.hpp"

namespace figconv {

/// Sum of edge rows per query: values [E, C] -> [Q, C], each query reduced
/// sequentially in CSR order.
template <typename T>
Tensor<T> csr_aggregate(const Tensor<T>& values, const CsrNeighbors& nbrs) {
  nbrs.validate();
  const std::size_t E = nbrs.indices.size();
  if (values.rank() == 0 || values.extent(0) != E)
    throw Error(detail::cat("csr_aggregate: ", values.rank() ? values.extent(0) : 0, " value rows for ", E, " edges"));
  if (values.rank() > 2) throw Error("csr_aggregate: values must be [E] or [E, C]");
  const std::size_t width = values.rank() == 2 ? values.extent(1) : 1;
  Tensor<T> out({nbrs.queries(), width});
  for (std::size_t q = 0; q < nbrs.queries(); ++q)
    for (std::uint64_t e = nbrs.offsets[q]; e < nbrs.offsets[q + 1]; ++e)
      for (std::size_t c = 0; c < width; ++c) out[q * width + c] += values[e * width + c];
  return out;
}

/// Edge-geometry encoding fed to the inner MLP next to the neighbor feature.
enum class EdgeEncoding {
  Offset,  // whitened offset (v_n - v_ijk), voxel center normalized to [0,1]^3
  Raw,     // raw v_n and v_ijk
};

/// Default ellipsoid for a grid: diagonal with (2 * voxel extent)^2 per axis.
inline Mat3 default_sigma(const GridLayout& layout, const Box& bounds, double scale = 1.0) {
  const Vec3 ext = bounds.extent();
  Vec3 d;
  for (int a = 0; a < 3; ++a) {
    const double h = scale * 2.0 * ext[a] / static_cast<double>(layout.resolution[a]);
    d[a] = h * h;
  }
  return diag3(d[0], d[1], d[2]);
}

/// Parameters of one point-to-grid convolution: MLP(sum MLP(f_n, geometry)).
template <typename T>
struct PointConvParams {
  Mlp<T> inner;  // input width C_in + 6
  Mlp<T> outer;
  Mat3 sigma = identity3();
  EdgeEncoding encoding = EdgeEncoding::Offset;

  PointConvParams() = default;
  PointConvParams(std::size_t in_channels, std::size_t hidden, std::size_t out_channels, const Mat3& sigma_, Rng& rng,
                  EdgeEncoding enc = EdgeEncoding::Offset)
      : inner({in_channels + 6, hidden, hidden}, rng), outer({hidden, hidden, out_channels}, rng), sigma(sigma_),
        encoding(enc) {}

  std::size_t in_channels() const { return inner.in_width() - 6; }
  std::size_t out_channels() const { return outer.out_width(); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    inner.collect(prefix + ".inner", out);
    outer.collect(prefix + ".outer", out);
  }
};

/// Neighbor lists of every voxel center plus the constant edge geometry.
template <typename T>
struct PointGridPlan {
  GridLayout layout;
  std::shared_ptr<const std::vector<std::uint32_t>> index;
  std::shared_ptr<const std::vector<std::uint64_t>> offsets;
  Tensor<T> geometry;  // [E, 6]
  std::size_t points = 0;

  PointGridPlan() = default;

  PointGridPlan(std::span<const Vec3> pts, const GridLayout& l, const Box& bounds, const Mat3& sigma,
                EdgeEncoding enc = EdgeEncoding::Offset)
      : PointGridPlan(pts, l, bounds, sigma, neighbors_for(pts, l, bounds, sigma), enc) {}

  PointGridPlan(std::span<const Vec3> pts, const GridLayout& l, const Box& bounds, const Mat3& sigma,
                const CsrNeighbors& nbrs, EdgeEncoding enc = EdgeEncoding::Offset)
      : layout(l), points(pts.size()) {
    nbrs.validate();
    if (nbrs.queries() != l.voxels())
      throw Error(detail::cat("point_to_grid: neighbor lists cover ", nbrs.queries(), " queries but the grid has ",
                              l.voxels(), " voxels"));
    for (auto i : nbrs.indices)
      if (i >= pts.size()) throw Error(detail::cat("point_to_grid: neighbor index ", i, " out of range"));
    // canonical per-voxel order (by position) so sums do not depend on input point order
    auto idx = std::make_shared<std::vector<std::uint32_t>>(nbrs.indices);
    for (std::size_t q = 0; q < nbrs.queries(); ++q)
      std::stable_sort(idx->begin() + static_cast<std::ptrdiff_t>(nbrs.offsets[q]),
                       idx->begin() + static_cast<std::ptrdiff_t>(nbrs.offsets[q + 1]),
                       [&](std::uint32_t a, std::uint32_t b) { return pts[a] < pts[b]; });
    index = idx;
    offsets = std::make_shared<const std::vector<std::uint64_t>>(nbrs.offsets);
    const auto spec = NeighborSpec::ellipsoid(sigma);
    const Vec3 ext = bounds.extent();
    geometry = Tensor<T>({nbrs.indices.size(), 6});
    for (std::size_t q = 0; q < nbrs.queries(); ++q) {
      const Vec3 c = voxel_center(l, bounds, q);
      for (std::uint64_t e = nbrs.offsets[q]; e < nbrs.offsets[q + 1]; ++e) {
        const Vec3& p = pts[(*idx)[e]];
        T* row = geometry.ptr() + e * 6;
        if (enc == EdgeEncoding::Offset) {
          const Vec3 w = spec.whiten(p - c);
          for (int a = 0; a < 3; ++a) {
            row[a] = static_cast<T>(w[a]);
            row[3 + a] = static_cast<T>((c[a] - bounds.lo[a]) / ext[a]);
          }
        } else {
          for (int a = 0; a < 3; ++a) {
            row[a] = static_cast<T>(p[a]);
            row[3 + a] = static_cast<T>(c[a]);
          }
        }
      }
    }
  }

  static CsrNeighbors neighbors_for(std::span<const Vec3> pts, const GridLayout& l, const Box& bounds,
                                    const Mat3& sigma) {
    const auto spec = NeighborSpec::ellipsoid(sigma);
    const auto grid = build_hash_grid(pts, spec);
    const auto centers = voxel_centers(l, bounds);
    return radius_query(grid, centers, spec, 1);
  }

  std::size_t edges() const { return index->size(); }
};

/// Graph-level point-to-grid. `features` is [N, C_in]; returns the grid
/// tensor [C_out, r, a, b].
template <typename T>
Var<T> point_to_grid(Binder<T>& bind, Var<T> features, const PointConvParams<T>& params, const PointGridPlan<T>& plan) {
  const auto& fs = features.shape();
  if (fs.size() != 2 || fs[0] != plan.points)
    throw Error(detail::cat("point_to_grid: features ", shape_str(fs), " do not match ", plan.points, " points"));
  if (fs[1] != params.in_channels())
    throw Error(detail::cat("point_to_grid: channel mismatch, features have ", fs[1], " channels, inner MLP expects ",
                            params.in_channels()));
  Graph<T>& g = bind.graph();
  Var<T> edge = concat<T>({gather_rows(features, plan.index), g.constant(plan.geometry)}, 1);
  Var<T> msg = params.inner(bind, edge);
  Var<T> pooled = segment_sum(msg, plan.offsets);
  Var<T> vox = params.outer(bind, pooled);
  const auto& l = plan.layout;
  return reshape(transpose(vox), {params.out_channels(), l.rank(), l.plane0(), l.plane1()});
}

/// Value-level point-to-grid on one grid. Neighbors must be the voxel-center
/// queries of `layout` against `points` under params.sigma.
template <typename T>
Tensor<T> point_to_grid(std::span<const Vec3> points, const Tensor<T>& features, const GridLayout& layout,
                        const Box& bounds, const PointConvParams<T>& params, const CsrNeighbors& nbrs) {
  PointGridPlan<T> plan(points, layout, bounds, params.sigma, nbrs, params.encoding);
  Graph<T> g;
  Binder<T> bind(g, false);
  return point_to_grid(bind, g.constant(features), params, plan).value();
}

/// Per-point decoded features [N, C] from a grid set.
template <typename T>
Tensor<T> grid_to_point(const FactorizedGridSet<T>& grids, std::span<const Vec3> points,
                        const std::vector<DecoderMlp<T>>& decoders, Combine combine, const PositionEncoding& enc = {}) {
  grids.validate();
  Graph<T> g;
  Binder<T> bind(g, false);
  std::vector<Var<T>> gv;
  for (const auto& t : grids.grids) gv.push_back(g.constant(t));
  DecodePlan<T> plan(grids.layouts, grids.bounds, points, enc);
  return decode_points(bind, gv, grids.channels, decoders, plan, combine).value();
}

}  // namespace figconv
