#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "figconv/autodiff.hpp"

namespace figconv {

// Cross-correlation everywhere: out[i] = sum_u in_padded[i*stride + u] * ker[u].

struct Conv2dParams {
  std::array<std::size_t, 2> pad{0, 0};
  std::array<std::size_t, 2> stride{1, 1};
};

/// Per-axis zero padding, possibly asymmetric.
struct Pad3 {
  std::array<std::size_t, 3> lo{0, 0, 0};
  std::array<std::size_t, 3> hi{0, 0, 0};

  static Pad3 same(std::size_t k) {
    const std::size_t l = (k - 1) / 2;
    return Pad3{{l, l, l}, {k - 1 - l, k - 1 - l, k - 1 - l}};
  }
};

namespace detail {

inline std::size_t conv_out_extent(const char* op, const char* axis, std::size_t in, std::size_t lo,
                                   std::size_t hi, std::size_t k, std::size_t stride) {
  if (k == 0) throw Error(cat(op, ": kernel extent on axis ", axis, " is zero"));
  if (stride == 0) throw Error(cat(op, ": stride on axis ", axis, " is zero"));
  if (in + lo + hi < k)
    throw Error(cat(op, ": axis ", axis, " too small: input ", in, " + padding ", lo + hi, " < kernel ", k));
  return (in + lo + hi - k) / stride + 1;
}

/// Number of (output, tap) pairs along one axis whose input index is real
/// data rather than padding.
inline std::uint64_t in_bounds_taps(std::size_t in, std::size_t out, std::size_t k, std::size_t lo,
                                    std::size_t stride) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t u = 0; u < k; ++u) {
      const std::int64_t pos = static_cast<std::int64_t>(i * stride + u) - static_cast<std::int64_t>(lo);
      n += (pos >= 0 && pos < static_cast<std::int64_t>(in)) ? 1 : 0;
    }
  return n;
}

/// Output index range [first, last) along one axis for which the input
/// position i*stride + u - lo falls inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t in, std::size_t out, std::size_t u,
                                                       std::size_t lo, std::size_t stride) {
  std::size_t first = 0;
  if (u < lo) first = (lo - u + stride - 1) / stride;
  // largest i with i*stride + u - lo <= in - 1
  if (in + lo < u + 1) return {0, 0};
  std::size_t last = (in + lo - u - 1) / stride + 1;
  last = std::min(last, out);
  if (first >= last) return {0, 0};
  return {first, last};
}

}  // namespace detail

/// Multiply-accumulate counts of a 2-D convolution.
inline MacCount conv2d_macs(std::size_t B, std::size_t Ci, std::size_t H, std::size_t W, std::size_t Co,
                            std::size_t Kh, std::size_t Kw, const Conv2dParams& p) {
  const auto Ho = detail::conv_out_extent("conv2d", "H", H, p.pad[0], p.pad[0], Kh, p.stride[0]);
  const auto Wo = detail::conv_out_extent("conv2d", "W", W, p.pad[1], p.pad[1], Kw, p.stride[1]);
  MacCount m;
  m.dense = std::uint64_t(B) * Co * Ci * Ho * Wo * Kh * Kw;
  m.effective = std::uint64_t(B) * Co * Ci * detail::in_bounds_taps(H, Ho, Kh, p.pad[0], p.stride[0]) *
                detail::in_bounds_taps(W, Wo, Kw, p.pad[1], p.stride[1]);
  return m;
}

/// Multiply-accumulate counts of a 3-D convolution (stride 1).
inline MacCount conv3d_macs(std::size_t B, std::size_t Ci, const std::array<std::size_t, 3>& in, std::size_t Co,
                            const std::array<std::size_t, 3>& k, const Pad3& pad) {
  MacCount m;
  m.dense = std::uint64_t(B) * Co * Ci;
  m.effective = std::uint64_t(B) * Co * Ci;
  static constexpr const char* names[3] = {"D", "H", "W"};
  for (int a = 0; a < 3; ++a) {
    const auto out = detail::conv_out_extent("conv3d", names[a], in[a], pad.lo[a], pad.hi[a], k[a], 1);
    m.dense *= out * k[a];
    m.effective *= detail::in_bounds_taps(in[a], out, k[a], pad.lo[a], 1);
  }
  return m;
}

namespace kernels {

struct Conv2dDims {
  std::size_t B, Ci, H, W, Co, Kh, Kw, Ho, Wo;
};

inline Conv2dDims conv2d_dims(const Shape& in, const Shape& ker, const Conv2dParams& p) {
  if (in.size() != 4) throw Error(detail::cat("conv2d: input must be [B,C,H,W], got ", shape_str(in)));
  if (ker.size() != 4) throw Error(detail::cat("conv2d: kernel must be [Co,Ci,Kh,Kw], got ", shape_str(ker)));
  if (ker[1] != in[1])
    throw Error(detail::cat("conv2d: channel axis mismatch, input has ", in[1], " channels but kernel expects ",
                            ker[1]));
  Conv2dDims d{in[0], in[1], in[2], in[3], ker[0], ker[2], ker[3], 0, 0};
  d.Ho = detail::conv_out_extent("conv2d", "H", d.H, p.pad[0], p.pad[0], d.Kh, p.stride[0]);
  d.Wo = detail::conv_out_extent("conv2d", "W", d.W, p.pad[1], p.pad[1], d.Kw, p.stride[1]);
  return d;
}

/// Unrolled input patches for output rows [i0, i1) of batch b:
/// cols[(c*Kh + u)*Kw + v, (i - i0)*Wo + j] = x[b, c, i*sh + u - ph, j*sw + v - pw] (0 in padding).
template <typename T>
void im2col(const T* X, const Conv2dDims& d, const Conv2dParams& p, std::size_t b, std::size_t i0, std::size_t i1,
            T* cols) {
  const std::size_t n = (i1 - i0) * d.Wo;
  const std::size_t sh = p.stride[0], sw = p.stride[1];
  for (std::size_t c = 0; c < d.Ci; ++c)
    for (std::size_t u = 0; u < d.Kh; ++u) {
      const auto [r0, r1] = detail::valid_range(d.H, d.Ho, u, p.pad[0], sh);
      for (std::size_t v = 0; v < d.Kw; ++v) {
        const auto [j0, j1] = detail::valid_range(d.W, d.Wo, v, p.pad[1], sw);
        T* row = cols + ((c * d.Kh + u) * d.Kw + v) * n;
        std::fill(row, row + n, T{0});
        for (std::size_t i = std::max(i0, r0); i < std::min(i1, r1); ++i) {
          const T* x = X + ((b * d.Ci + c) * d.H + (i * sh + u - p.pad[0])) * d.W;
          T* dst = row + (i - i0) * d.Wo;
          for (std::size_t j = j0; j < j1; ++j) dst[j] = x[j * sw + v - p.pad[1]];
        }
      }
    }
}

/// Scatter-adds unrolled patch gradients back onto the input gradient.
template <typename T>
void col2im(const T* cols, const Conv2dDims& d, const Conv2dParams& p, std::size_t b, std::size_t i0, std::size_t i1,
            T* GX) {
  const std::size_t n = (i1 - i0) * d.Wo;
  const std::size_t sh = p.stride[0], sw = p.stride[1];
  for (std::size_t c = 0; c < d.Ci; ++c)
    for (std::size_t u = 0; u < d.Kh; ++u) {
      const auto [r0, r1] = detail::valid_range(d.H, d.Ho, u, p.pad[0], sh);
      for (std::size_t v = 0; v < d.Kw; ++v) {
        const auto [j0, j1] = detail::valid_range(d.W, d.Wo, v, p.pad[1], sw);
        const T* row = cols + ((c * d.Kh + u) * d.Kw + v) * n;
        for (std::size_t i = std::max(i0, r0); i < std::min(i1, r1); ++i) {
          T* gx = GX + ((b * d.Ci + c) * d.H + (i * sh + u - p.pad[0])) * d.W;
          const T* src = row + (i - i0) * d.Wo;
          for (std::size_t j = j0; j < j1; ++j) gx[j * sw + v - p.pad[1]] += src[j];
        }
      }
    }
}

/// Output rows per im2col chunk, keeping the patch buffer near 2^20 values.
inline std::size_t conv2d_chunk_rows(const Conv2dDims& d) {
  const std::size_t per_row = std::max<std::size_t>(1, d.Ci * d.Kh * d.Kw * d.Wo);
  return std::clamp<std::size_t>((std::size_t{1} << 20) / per_row, 1, std::max<std::size_t>(d.Ho, 1));
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& in, const Tensor<T>& ker, const Conv2dParams& p) {
  const auto d = conv2d_dims(in.shape(), ker.shape(), p);
  Tensor<T> out({d.B, d.Co, d.Ho, d.Wo});
  const std::size_t J = d.Ci * d.Kh * d.Kw, P = d.Ho * d.Wo, rows = conv2d_chunk_rows(d);
  std::vector<T> cols(J * rows * d.Wo);
  const T* K = ker.ptr();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t i0 = 0; i0 < d.Ho; i0 += rows) {
      const std::size_t i1 = std::min(d.Ho, i0 + rows), n = (i1 - i0) * d.Wo;
      im2col(in.ptr(), d, p, b, i0, i1, cols.data());
      for (std::size_t o = 0; o < d.Co; ++o) {
        T* y = out.ptr() + (b * d.Co + o) * P + i0 * d.Wo;
        for (std::size_t j = 0; j < J; ++j) {
          const T w = K[o * J + j];
          if (w == T{0}) continue;
          const T* x = cols.data() + j * n;
          for (std::size_t t = 0; t < n; ++t) y[t] += w * x[t];
        }
      }
    }
  MacCounter::report(conv2d_macs(d.B, d.Ci, d.H, d.W, d.Co, d.Kh, d.Kw, p));
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& ker, const Tensor<T>& gout, const Conv2dParams& p,
                     T* gin, T* gker) {
  const auto d = conv2d_dims(in.shape(), ker.shape(), p);
  const std::size_t J = d.Ci * d.Kh * d.Kw, P = d.Ho * d.Wo, rows = conv2d_chunk_rows(d);
  std::vector<T> cols(J * rows * d.Wo), gcols(gin ? cols.size() : 0);
  const T* K = ker.ptr();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t i0 = 0; i0 < d.Ho; i0 += rows) {
      const std::size_t i1 = std::min(d.Ho, i0 + rows), n = (i1 - i0) * d.Wo;
      if (gker) {
        im2col(in.ptr(), d, p, b, i0, i1, cols.data());
        for (std::size_t o = 0; o < d.Co; ++o) {
          const T* g = gout.ptr() + (b * d.Co + o) * P + i0 * d.Wo;
          for (std::size_t j = 0; j < J; ++j) {
            const T* x = cols.data() + j * n;
            T acc{0};
#pragma omp simd reduction(+ : acc)
            for (std::size_t t = 0; t < n; ++t) acc += g[t] * x[t];
            gker[o * J + j] += acc;
          }
        }
      }
      if (gin) {
        std::fill(gcols.begin(), gcols.begin() + static_cast<std::ptrdiff_t>(J * n), T{0});
        for (std::size_t o = 0; o < d.Co; ++o) {
          const T* g = gout.ptr() + (b * d.Co + o) * P + i0 * d.Wo;
          for (std::size_t j = 0; j < J; ++j) {
            const T w = K[o * J + j];
            if (w == T{0}) continue;
            T* gc = gcols.data() + j * n;
            for (std::size_t t = 0; t < n; ++t) gc[t] += w * g[t];
          }
        }
        col2im(gcols.data(), d, p, b, i0, i1, gin);
      }
    }
}

struct Conv3dDims {
  std::size_t B, Ci, Co;
  std::array<std::size_t, 3> in, k, out;
};

inline Conv3dDims conv3d_dims(const Shape& in, const Shape& ker, const Pad3& pad) {
  if (in.size() != 5) throw Error(detail::cat("conv3d: input must be [B,C,D,H,W], got ", shape_str(in)));
  if (ker.size() != 5) throw Error(detail::cat("conv3d: kernel must be [Co,Ci,Kd,Kh,Kw], got ", shape_str(ker)));
  if (ker[1] != in[1])
    throw Error(detail::cat("conv3d: channel axis mismatch, input has ", in[1], " channels but kernel expects ",
                            ker[1]));
  Conv3dDims d{in[0], in[1], ker[0], {in[2], in[3], in[4]}, {ker[2], ker[3], ker[4]}, {}};
  static constexpr const char* names[3] = {"D", "H", "W"};
  for (int a = 0; a < 3; ++a)
    d.out[a] = detail::conv_out_extent("conv3d", names[a], d.in[a], pad.lo[a], pad.hi[a], d.k[a], 1);
  return d;
}

template <typename Fn>
void conv3d_sweep(const Conv3dDims& d, const Pad3& pad, Fn&& fn) {
  const auto [D, H, W] = d.in;
  const auto [Do, Ho, Wo] = d.out;
  const auto [Kd, Kh, Kw] = d.k;
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t o = 0; o < d.Co; ++o)
      for (std::size_t c = 0; c < d.Ci; ++c)
        for (std::size_t t = 0; t < Kd; ++t) {
          const auto [a0, a1] = detail::valid_range(D, Do, t, pad.lo[0], 1);
          for (std::size_t u = 0; u < Kh; ++u) {
            const auto [i0, i1] = detail::valid_range(H, Ho, u, pad.lo[1], 1);
            for (std::size_t v = 0; v < Kw; ++v) {
              const auto [j0, j1] = detail::valid_range(W, Wo, v, pad.lo[2], 1);
              if (j0 >= j1) continue;
              const std::size_t ki = (((o * d.Ci + c) * Kd + t) * Kh + u) * Kw + v;
              for (std::size_t a = a0; a < a1; ++a)
                for (std::size_t i = i0; i < i1; ++i) {
                  const std::size_t xi =
                      (((b * d.Ci + c) * D + (a + t - pad.lo[0])) * H + (i + u - pad.lo[1])) * W + (j0 + v - pad.lo[2]);
                  const std::size_t yi = (((b * d.Co + o) * Do + a) * Ho + i) * Wo + j0;
                  fn(xi, yi, ki, j1 - j0);
                }
            }
          }
        }
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& in, const Tensor<T>& ker, const Pad3& pad) {
  const auto d = conv3d_dims(in.shape(), ker.shape(), pad);
  Tensor<T> out({d.B, d.Co, d.out[0], d.out[1], d.out[2]});
  const T* X = in.ptr();
  const T* K = ker.ptr();
  T* Y = out.ptr();
  conv3d_sweep(d, pad, [&](std::size_t xi, std::size_t yi, std::size_t ki, std::size_t n) {
    const T w = K[ki];
    for (std::size_t j = 0; j < n; ++j) Y[yi + j] += w * X[xi + j];
  });
  MacCounter::report(conv3d_macs(d.B, d.Ci, d.in, d.Co, d.k, pad));
  return out;
}

template <typename T>
void conv3d_backward(const Tensor<T>& in, const Tensor<T>& ker, const Tensor<T>& gout, const Pad3& pad, T* gin,
                     T* gker) {
  const auto d = conv3d_dims(in.shape(), ker.shape(), pad);
  const T* X = in.ptr();
  const T* K = ker.ptr();
  const T* G = gout.ptr();
  conv3d_sweep(d, pad, [&](std::size_t xi, std::size_t yi, std::size_t ki, std::size_t n) {
    if (gin)
      for (std::size_t j = 0; j < n; ++j) gin[xi + j] += K[ki] * G[yi + j];
    if (gker) {
      T acc{0};
#pragma omp simd reduction(+ : acc)
      for (std::size_t j = 0; j < n; ++j) acc += G[yi + j] * X[xi + j];
      gker[ki] += acc;
    }
  });
}

}  // namespace kernels

/// 2-D cross-correlation, input [B,C,H,W], kernel [Co,C,Kh,Kw].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Conv2dParams p = {}) {
  Tensor<T> out = kernels::conv2d_forward(input.value(), kernel.value(), p);
  return input.graph->record(std::move(out), {input.id, kernel.id}, [x = input.id, k = kernel.id, p](Graph<T>& g, NodeId self) {
    kernels::conv2d_backward(g.value(x), g.value(k), g.grad(self), p, g.grad_sink(x), g.grad_sink(k));
  }, "conv2d");
}

/// Direct 3-D cross-correlation, input [B,C,D,H,W], kernel [Co,C,Kd,Kh,Kw].
template <typename T>
Var<T> conv3d_direct(Var<T> input, Var<T> kernel, Pad3 pad = {}) {
  Tensor<T> out = kernels::conv3d_forward(input.value(), kernel.value(), pad);
  return input.graph->record(std::move(out), {input.id, kernel.id}, [x = input.id, k = kernel.id, pad](Graph<T>& g, NodeId self) {
    kernels::conv3d_backward(g.value(x), g.value(k), g.grad(self), pad, g.grad_sink(x), g.grad_sink(k));
  }, "conv3d_direct");
}

}  // namespace figconv
