#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "figconv/conv.hpp"
#include "figconv/factorized_grid.hpp"

namespace figconv {

// Factorized implicit global convolution.
//
// Each grid [C, r, a, b] is convolved with its own 3-D kernel [Co, Ci, K, K, K]
// whose first tap axis runs along the rank axis. The two plane axes always use
// zero-padded "same" correlation. Along the rank axis:
//   K >= 2r-1 (global):  y[i] = sum_k x[k] * w[i+k]   (Hankel matrix H[i,k] = w[i+k])
//   K <  2r-1 (local):   y[i] = sum_t w[t] * x[i+t-P], P = (K-1)/2, zero outside [0,r)
// Both produce r outputs. The reparameterized path folds the rank axis into
// channels ([C*r, a, b], channel c*r + k) and runs one 2-D convolution with an
// expanded kernel [Co*r, Ci*r, K, K].

inline bool is_global_rank(std::size_t kernel, std::size_t rank) { return kernel + 1 >= 2 * rank; }

/// Per-grid 3-D kernel plus an optional cached 2-D expansion.
template <typename T>
struct FigKernel {
  Tensor<T> weight;  // [Co, Ci, K, K, K]
  std::optional<Tensor<T>> reparameterized;

  FigKernel() = default;
  explicit FigKernel(Tensor<T> w) : weight(std::move(w)) {
    const auto& s = weight.shape();
    if (s.size() != 5 || s[2] != s[3] || s[3] != s[4])
      throw Error(detail::cat("fig kernel: expected [Co,Ci,K,K,K], got ", shape_str(s)));
    if (s[2] % 2 == 0) throw Error(detail::cat("fig kernel: kernel size must be odd, got ", s[2]));
  }

  std::size_t out_channels() const { return weight.extent(0); }
  std::size_t in_channels() const { return weight.extent(1); }
  std::size_t size() const { return weight.extent(2); }

  void cache(std::size_t rank);
};

/// Tap index (or -1) connecting input rank position k to output position i.
inline std::int64_t rank_tap(std::size_t kernel, std::size_t rank, std::size_t i, std::size_t k) {
  if (is_global_rank(kernel, rank)) return static_cast<std::int64_t>(i + k);
  const auto t = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(i) + static_cast<std::int64_t>((kernel - 1) / 2);
  return (t >= 0 && t < static_cast<std::int64_t>(kernel)) ? t : -1;
}

/// Re-indexing map from the 3-D kernel to the expanded 2-D kernel.
inline std::shared_ptr<const std::vector<std::int64_t>> reparam_kernel_map(std::size_t co, std::size_t ci,
                                                                           std::size_t kernel, std::size_t rank) {
  auto map = std::make_shared<std::vector<std::int64_t>>();
  const std::size_t K = kernel, r = rank;
  map->reserve(co * r * ci * r * K * K);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t c = 0; c < ci; ++c)
        for (std::size_t k = 0; k < r; ++k) {
          const auto t = rank_tap(K, r, i, k);
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v)
              map->push_back(t < 0 ? -1
                                   : static_cast<std::int64_t>((((o * ci + c) * K + static_cast<std::size_t>(t)) * K + u) * K + v));
        }
  return map;
}

template <typename T>
Tensor<T> expand_kernel(const Tensor<T>& weight, std::size_t rank) {
  const auto& s = weight.shape();
  const std::size_t co = s[0], ci = s[1], K = s[2];
  const auto map = reparam_kernel_map(co, ci, K, rank);
  Tensor<T> out({co * rank, ci * rank, K, K});
  for (std::size_t i = 0; i < map->size(); ++i)
    if ((*map)[i] >= 0) out[i] = weight[static_cast<std::size_t>((*map)[i])];
  return out;
}

template <typename T>
void FigKernel<T>::cache(std::size_t rank) {
  reparameterized = expand_kernel(weight, rank);
}

/// Recovers the 3-D kernel from an expanded 2-D kernel. Taps the expansion
/// never uses stay zero.
template <typename T>
Tensor<T> collapse_kernel(const Tensor<T>& expanded, std::size_t co, std::size_t ci, std::size_t kernel,
                          std::size_t rank) {
  const auto map = reparam_kernel_map(co, ci, kernel, rank);
  if (map->size() != expanded.size()) throw Error("collapse_kernel: expanded kernel has the wrong size");
  Tensor<T> w({co, ci, kernel, kernel, kernel});
  for (std::size_t i = 0; i < map->size(); ++i)
    if ((*map)[i] >= 0) w[static_cast<std::size_t>((*map)[i])] = expanded[i];
  return w;
}

/// r x r Hankel matrix H[i,k] = w[i+k]; requires K >= 2r-1.
template <typename T>
Tensor<T> hankel_reparam_1d(std::span<const T> w, std::size_t rank) {
  if (rank == 0) throw Error("hankel: rank must be positive");
  if (!is_global_rank(w.size(), rank))
    throw Error(detail::cat("hankel: kernel size ", w.size(), " < 2r-1 = ", 2 * rank - 1,
                            "; use the zero-padded local convolution instead"));
  Tensor<T> h({rank, rank});
  for (std::size_t i = 0; i < rank; ++i)
    for (std::size_t k = 0; k < rank; ++k) h.at(i, k) = w[i + k];
  return h;
}

// ---------------------------------------------------------------------------
// Graph-level paths

/// Reparameterized path on one grid held as any tensor of size Ci*r*a*b in
/// [Ci, r, a, b] order. Returns [1, Co*r, a', b'].
template <typename T>
Var<T> fig_conv_flat(Var<T> grid, const GridLayout& layout, Var<T> weight, std::size_t stride = 1) {
  const auto& ws = weight.shape();
  if (ws.size() != 5) throw Error(detail::cat("fig conv: kernel must be [Co,Ci,K,K,K], got ", shape_str(ws)));
  const std::size_t co = ws[0], ci = ws[1], K = ws[2], r = layout.rank();
  if (grid.size() != ci * r * layout.plane0() * layout.plane1())
    throw Error(detail::cat("fig conv: channel mismatch, grid of ", grid.size(), " values does not hold ", ci,
                            " channels of layout ", r, "x", layout.plane0(), "x", layout.plane1()));
  Var<T> x = reshape(grid, {1, ci * r, layout.plane0(), layout.plane1()});
  Var<T> k2 = remap(weight, reparam_kernel_map(co, ci, K, r), {co * r, ci * r, K, K});
  Conv2dParams p;
  p.pad = {(K - 1) / 2, (K - 1) / 2};
  p.stride = {stride, stride};
  return conv2d(x, k2, p);
}

/// Reference path on one grid: conv3d_direct over [1, Ci, r, a, b]. Returns
/// [1, Co, r, a, b].
template <typename T>
Var<T> fig_conv_naive_var(Var<T> grid, const GridLayout& layout, Var<T> weight) {
  const auto& ws = weight.shape();
  if (ws.size() != 5) throw Error(detail::cat("fig conv: kernel must be [Co,Ci,K,K,K], got ", shape_str(ws)));
  const std::size_t co = ws[0], ci = ws[1], K = ws[2], r = layout.rank(), A = layout.plane0(), B = layout.plane1();
  if (grid.size() != ci * r * A * B)
    throw Error(detail::cat("fig conv: channel mismatch, grid of ", grid.size(), " values does not hold ", ci,
                            " channels"));
  Var<T> x = reshape(grid, {1, ci, r, A, B});
  const std::size_t P = (K - 1) / 2;
  if (!is_global_rank(K, r)) return conv3d_direct(x, weight, Pad3{{P, P, P}, {P, P, P}});
  // valid correlation of the kernel taps against the rank vector, realized as
  // a padded correlation whose outputs come out in reverse rank order
  Var<T> y = conv3d_direct(x, weight, Pad3{{r - 1, P, P}, {K - r, P, P}});
  auto map = std::make_shared<std::vector<std::int64_t>>(co * r * A * B);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t s = 0; s < A * B; ++s)
        (*map)[(o * r + i) * A * B + s] = static_cast<std::int64_t>((o * r + (r - 1 - i)) * A * B + s);
  return remap(y, map, {1, co, r, A, B});
}

// ---------------------------------------------------------------------------
// Value-level API over grid sets

namespace detail {

template <typename T>
void check_kernels(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& kernels) {
  grids.validate();
  if (kernels.size() != grids.size())
    throw Error(cat("fig conv: ", kernels.size(), " kernels for ", grids.size(), " grids"));
  for (std::size_t m = 0; m < kernels.size(); ++m) {
    if (kernels[m].in_channels() != grids.channels)
      throw Error(cat("fig conv: channel mismatch on grid ", m, ", kernel expects ", kernels[m].in_channels(),
                      " channels but grid has ", grids.channels));
    if (m && kernels[m].out_channels() != kernels[0].out_channels())
      throw Error("fig conv: kernels disagree on output channels");
  }
}

template <typename T, typename Fn>
FactorizedGridSet<T> map_grids(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& kernels, Fn&& fn) {
  check_kernels(grids, kernels);
  const std::size_t co = kernels.empty() ? grids.channels : kernels[0].out_channels();
  FactorizedGridSet<T> out = FactorizedGridSet<T>::zeros(grids.layouts, grids.bounds, co);
  for (std::size_t m = 0; m < grids.size(); ++m) {
    Graph<T> g;
    Var<T> y = fn(g, g.constant(grids.grids[m]), grids.layouts[m], kernels[m]);
    out.grids[m] = y.value().reshaped(out.grids[m].shape());
  }
  return out;
}

}  // namespace detail

/// Per-grid conv3d_direct with the rank-axis convention above.
template <typename T>
FactorizedGridSet<T> fig_conv_naive(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& kernels) {
  return detail::map_grids(grids, kernels, [](Graph<T>& g, Var<T> x, const GridLayout& l, const FigKernel<T>& k) {
    return fig_conv_naive_var(x, l, g.constant(k.weight));
  });
}

/// Reparameterized path in either rank regime.
template <typename T>
FactorizedGridSet<T> fig_conv_reparam(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& kernels) {
  return detail::map_grids(grids, kernels, [](Graph<T>& g, Var<T> x, const GridLayout& l, const FigKernel<T>& k) {
    return fig_conv_flat(x, l, g.constant(k.weight));
  });
}

/// Global (Hankel) reparameterized path; every grid must satisfy K >= 2r-1.
template <typename T>
FactorizedGridSet<T> fig_conv_global(const FactorizedGridSet<T>& grids, const std::vector<FigKernel<T>>& kernels) {
  detail::check_kernels(grids, kernels);
  for (std::size_t m = 0; m < grids.size(); ++m)
    if (!is_global_rank(kernels[m].size(), grids.layouts[m].rank()))
      throw Error(detail::cat("fig conv global: grid ", m, " has rank ", grids.layouts[m].rank(), " but kernel size ",
                              kernels[m].size(), " < 2r-1"));
  return fig_conv_reparam(grids, kernels);
}

/// Flattened 2-D input [1, C*r, a, b] and expanded 2-D kernel for one grid.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reparam_flatten(const Tensor<T>& grid, const GridLayout& layout,
                                                const FigKernel<T>& kernel) {
  const std::size_t r = layout.rank(), ci = kernel.in_channels();
  if (grid.size() != ci * r * layout.plane0() * layout.plane1())
    throw Error("reparam_flatten: grid size does not match the kernel's input channels");
  Tensor<T> x = grid.reshaped({1, ci * r, layout.plane0(), layout.plane1()});
  Tensor<T> k = kernel.reparameterized && kernel.reparameterized->extent(0) == kernel.out_channels() * r
                    ? *kernel.reparameterized
                    : expand_kernel(kernel.weight, r);
  return {std::move(x), std::move(k)};
}

/// [1, Co*r, a, b] -> [Co, r, a, b]
template <typename T>
Tensor<T> reparam_unflatten(const Tensor<T>& flat, const GridLayout& layout) {
  const std::size_t r = layout.rank();
  if (flat.rank() != 4 || flat.extent(1) % r != 0) throw Error("reparam_unflatten: unexpected shape");
  return flat.reshaped({flat.extent(1) / r, r, flat.extent(2), flat.extent(3)});
}

// ---------------------------------------------------------------------------
// Operation counts

/// MACs of the reparameterized path on one grid (stride 1). `dense` is the
/// 2-D convolution with the full expanded kernel; `effective` skips padding
/// and structurally zero rank-tap pairs.
inline MacCount fig_conv_macs(const GridLayout& layout, std::size_t ci, std::size_t co, std::size_t kernel) {
  const std::size_t r = layout.rank(), A = layout.plane0(), B = layout.plane1(), K = kernel;
  Conv2dParams p;
  p.pad = {(K - 1) / 2, (K - 1) / 2};
  MacCount m = conv2d_macs(1, ci * r, A, B, co * r, K, K, p);
  std::uint64_t pairs = 0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < r; ++k) pairs += rank_tap(K, r, i, k) >= 0 ? 1 : 0;
  m.effective = std::uint64_t(co) * ci * pairs * detail::in_bounds_taps(A, A, K, p.pad[0], 1) *
                detail::in_bounds_taps(B, B, K, p.pad[1], 1);
  return m;
}

/// MACs of the reference conv3d_direct path on one grid.
inline MacCount fig_conv_naive_macs(const GridLayout& layout, std::size_t ci, std::size_t co, std::size_t kernel) {
  const std::size_t r = layout.rank(), K = kernel, P = (K - 1) / 2;
  const Pad3 pad = is_global_rank(K, r) ? Pad3{{r - 1, P, P}, {K - r, P, P}} : Pad3{{P, P, P}, {P, P, P}};
  return conv3d_macs(1, ci, {r, layout.plane0(), layout.plane1()}, co, {K, K, K}, pad);
}

}  // namespace figconv
