#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "figconv/geometry.hpp"
#include "figconv/tensor.hpp"

namespace figconv {

/// Neighborhood predicate: a sphere ||p - q|| < radius, or an ellipsoid
/// (p - q)^T Sigma^{-1} (p - q) < 1. Both are strict.
class NeighborSpec {
 public:
  static NeighborSpec sphere(double radius) {
    if (!(radius >= 0) || !std::isfinite(radius)) throw Error(detail::cat("neighbor spec: invalid radius ", radius));
    NeighborSpec s;
    s.radius_ = radius;
    return s;
  }

  static NeighborSpec ellipsoid(const Mat3& sigma) {
    NeighborSpec s;
    s.ellipsoid_ = true;
    s.sigma_ = sigma;
    s.whiten_ = invert_lower3(cholesky3(sigma));
    s.radius_ = 1.0;
    return s;
  }

  bool is_ellipsoid() const { return ellipsoid_; }
  double radius() const { return radius_; }
  const Mat3& sigma() const { return sigma_; }

  /// Maps a displacement into the space where the neighborhood is the ball of
  /// radius(): L^{-1} d with Sigma = L L^T, or d unchanged for spheres.
  Vec3 whiten(const Vec3& d) const { return ellipsoid_ ? whiten_ * d : d; }

  bool contains(const Vec3& point, const Vec3& query) const {
    const Vec3 w = whiten(point - query);
    return dot(w, w) < radius_ * radius_;
  }

 private:
  NeighborSpec() = default;
  bool ellipsoid_ = false;
  double radius_ = 0;
  Mat3 sigma_ = identity3();
  Mat3 whiten_ = identity3();
};

/// Compressed-sparse-row neighbor lists.
struct CsrNeighbors {
  std::vector<std::uint64_t> offsets{0};
  std::vector<std::uint32_t> indices;

  std::size_t queries() const { return offsets.size() - 1; }
  std::size_t count(std::size_t q) const { return offsets[q + 1] - offsets[q]; }
  std::span<const std::uint32_t> neighbors(std::size_t q) const {
    return {indices.data() + offsets[q], indices.data() + offsets[q + 1]};
  }

  void validate() const {
    if (offsets.empty() || offsets.front() != 0) throw Error("csr: offsets must start at 0");
    for (std::size_t q = 0; q + 1 < offsets.size(); ++q)
      if (offsets[q + 1] < offsets[q]) throw Error(detail::cat("csr: offsets decrease at query ", q));
    if (offsets.back() != indices.size())
      throw Error(detail::cat("csr: offsets end at ", offsets.back(), " but ", indices.size(), " indices stored"));
  }

  /// Sorts each query's neighbor range ascending.
  void sort_ranges() {
    for (std::size_t q = 0; q + 1 < offsets.size(); ++q)
      std::sort(indices.begin() + static_cast<std::ptrdiff_t>(offsets[q]),
                indices.begin() + static_cast<std::ptrdiff_t>(offsets[q + 1]));
  }

  friend bool operator==(const CsrNeighbors&, const CsrNeighbors&) = default;
};

/// Uniform hash grid over (optionally whitened) point positions. Each point is
/// stored in exactly one cell, floor(whiten(p) / cell_size) componentwise.
/// Occupied cells live in an open-addressing table of at least 2x the point
/// count slots.
class HashGrid {
 public:
  using Cell = std::array<std::int64_t, 3>;

  HashGrid() = default;

  HashGrid(std::span<const Vec3> points, double cell_size, std::optional<NeighborSpec> whitening = std::nullopt)
      : cell_size_(cell_size), whitening_(std::move(whitening)) {
    if (!(cell_size > 0) || !std::isfinite(cell_size))
      throw Error(detail::cat("hash grid: cell size must be positive, got ", cell_size));
    points_.assign(points.begin(), points.end());
    for (std::size_t i = 0; i < points_.size(); ++i)
      if (!is_finite(points_[i])) throw Error(detail::cat("hash grid: point ", i, " has a non-finite coordinate"));

    std::size_t slots = 1;
    while (slots < 2 * std::max<std::size_t>(points_.size(), 1)) slots <<= 1;
    slot_cell_.assign(slots, Cell{});
    slot_id_.assign(slots, -1);

    std::vector<std::uint32_t> cell_of(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const Cell c = cell_of_point(points_[i]);
      std::size_t s = slot_for(c);
      if (slot_id_[s] < 0) {
        slot_id_[s] = static_cast<std::int64_t>(cells_.size());
        slot_cell_[s] = c;
        cells_.push_back(c);
      }
      cell_of[i] = static_cast<std::uint32_t>(slot_id_[s]);
    }
    // counting sort of point indices by cell
    cell_start_.assign(cells_.size() + 1, 0);
    for (auto c : cell_of) ++cell_start_[c + 1];
    for (std::size_t c = 0; c < cells_.size(); ++c) cell_start_[c + 1] += cell_start_[c];
    cell_points_.resize(points_.size());
    std::vector<std::uint32_t> cursor(cell_start_.begin(), cell_start_.end() - 1);
    for (std::size_t i = 0; i < points_.size(); ++i) cell_points_[cursor[cell_of[i]]++] = static_cast<std::uint32_t>(i);
  }

  double cell_size() const { return cell_size_; }
  const std::optional<NeighborSpec>& whitening() const { return whitening_; }
  std::span<const Vec3> points() const { return points_; }
  std::size_t cell_count() const { return cells_.size(); }
  const Cell& cell(std::size_t c) const { return cells_[c]; }
  std::span<const std::uint32_t> cell_members(std::size_t c) const {
    return {cell_points_.data() + cell_start_[c], cell_points_.data() + cell_start_[c + 1]};
  }

  Cell cell_of_point(const Vec3& p) const {
    const Vec3 w = whitening_ ? whitening_->whiten(p) : p;
    return {static_cast<std::int64_t>(std::floor(w[0] / cell_size_)),
            static_cast<std::int64_t>(std::floor(w[1] / cell_size_)),
            static_cast<std::int64_t>(std::floor(w[2] / cell_size_))};
  }

  /// Calls fn(point index) for every point in the 27 cells around q.
  template <typename Fn>
  void for_each_candidate(const Vec3& q, Fn&& fn) const {
    if (cells_.empty()) return;
    const Cell c = cell_of_point(q);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const Cell n{c[0] + dx, c[1] + dy, c[2] + dz};
          const std::size_t s = slot_for(n);
          const auto id = slot_id_[s];
          if (id < 0) continue;
          for (auto p : cell_members(static_cast<std::size_t>(id))) fn(p);
        }
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  std::size_t slot_for(const Cell& c) const {
    const std::size_t mask = slot_id_.size() - 1;
    std::uint64_t h = mix(static_cast<std::uint64_t>(c[0]) * 0x9e3779b97f4a7c15ULL ^
                          mix(static_cast<std::uint64_t>(c[1]) + 0x632be59bd9b4e019ULL) ^
                          mix(static_cast<std::uint64_t>(c[2]) * 0x85ebca6bULL + 0x27d4eb2fULL));
    std::size_t s = h & mask;
    while (slot_id_[s] >= 0 && slot_cell_[s] != c) s = (s + 1) & mask;
    return s;
  }

  double cell_size_ = 1.0;
  std::optional<NeighborSpec> whitening_;
  std::vector<Vec3> points_;
  std::vector<Cell> slot_cell_;
  std::vector<std::int64_t> slot_id_;
  std::vector<Cell> cells_;
  std::vector<std::uint32_t> cell_start_{0};
  std::vector<std::uint32_t> cell_points_;
};

inline HashGrid build_hash_grid(std::span<const Vec3> points, double cell_size) {
  return HashGrid(points, cell_size);
}

/// Grid matched to a neighbor spec: cell size = radius for spheres; for
/// ellipsoids points are whitened by L^{-1} (Sigma = L L^T) and the cell size
/// is 1, so the 27-cell enumeration covers the unit ball.
inline HashGrid build_hash_grid(std::span<const Vec3> points, const NeighborSpec& spec) {
  if (spec.is_ellipsoid()) return HashGrid(points, 1.0, spec);
  return HashGrid(points, spec.radius());
}

namespace detail {

inline void check_queries(std::span<const Vec3> queries) {
  for (std::size_t i = 0; i < queries.size(); ++i)
    if (!is_finite(queries[i])) throw Error(cat("radius query: query ", i, " has a non-finite coordinate"));
}

}  // namespace detail

/// Hash-grid radius search in three phases: per-query count, exclusive prefix
/// sum with one allocation, and a fill pass that writes query q's neighbors
/// into [offsets[q], offsets[q+1]).
inline CsrNeighbors radius_query(const HashGrid& grid, std::span<const Vec3> queries, const NeighborSpec& spec,
                                 std::size_t workers = 0) {
  detail::check_queries(queries);
  if (spec.is_ellipsoid()) {
    const auto& w = grid.whitening();
    if (!w || !w->is_ellipsoid() || w->sigma() != spec.sigma() || grid.cell_size() != 1.0)
      throw Error("radius query: grid was not built for this ellipsoid (use build_hash_grid(points, spec))");
  } else {
    if (grid.whitening() && grid.whitening()->is_ellipsoid())
      throw Error("radius query: spherical query on a whitened grid");
    if (std::abs(grid.cell_size() - spec.radius()) > 1e-12 * std::max(1.0, spec.radius()))
      throw Error(detail::cat("radius query: grid cell size ", grid.cell_size(), " must equal the radius ",
                              spec.radius(), " for the 27-cell search to be complete"));
  }
  const auto pts = grid.points();
  const std::size_t Q = queries.size();

  std::vector<std::uint64_t> count(Q, 0);
  parallel_for(Q, [&](std::size_t q) {
    std::uint64_t n = 0;
    grid.for_each_candidate(queries[q], [&](std::uint32_t p) {
      if (spec.contains(pts[p], queries[q])) ++n;
    });
    count[q] = n;
  }, workers);

  CsrNeighbors out;
  out.offsets.assign(Q + 1, 0);
  for (std::size_t q = 0; q < Q; ++q) out.offsets[q + 1] = out.offsets[q] + count[q];
  out.indices.resize(out.offsets[Q]);

  parallel_for(Q, [&](std::size_t q) {
    std::uint64_t k = 0;
    const std::uint64_t base = out.offsets[q];
    grid.for_each_candidate(queries[q], [&](std::uint32_t p) {
      if (spec.contains(pts[p], queries[q])) out.indices[base + k++] = p;
    });
  }, workers);
  return out;
}

/// Exhaustive O(N*Q) search; each query's neighbors are sorted ascending.
inline CsrNeighbors brute_force_radius(std::span<const Vec3> points, std::span<const Vec3> queries,
                                       const NeighborSpec& spec) {
  CsrNeighbors out;
  out.offsets.assign(queries.size() + 1, 0);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t p = 0; p < points.size(); ++p)
      if (spec.contains(points[p], queries[q])) out.indices.push_back(static_cast<std::uint32_t>(p));
    out.offsets[q + 1] = out.indices.size();
  }
  return out;
}

}  // namespace figconv
