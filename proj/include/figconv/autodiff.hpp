#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "figconv/tensor.hpp"

namespace figconv {

using NodeId = std::size_t;

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Gradients;

/// Tape of recorded operations. Nodes are appended in execution order, so the
/// node sequence is already a topological order. Values are never mutated
/// after they are recorded.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, nullptr, false, "constant"); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), {}, nullptr, true, "variable"); }

  /// Records an operation. The node requires a gradient when any input does;
  /// otherwise the backward closure is dropped.
  Var<T> record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn fn, const char* op) {
    bool rg = false;
    for (NodeId i : inputs) {
      if (i >= nodes_.size()) throw Error(detail::cat(op, ": input node ", i, " does not exist yet"));
      rg = rg || nodes_[i].requires_grad;
    }
    return push(std::move(value), std::move(inputs), rg ? std::move(fn) : nullptr, rg, op);
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Upstream gradient of the node whose backward closure is running.
  const Tensor<T>& grad(NodeId id) const { return grads_.at(id); }

  /// Accumulation buffer for an input, or nullptr when it needs no gradient.
  T* grad_sink(NodeId id) {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& g = grads_[id];
    const auto& v = nodes_[id].value;
    if (g.shape() != v.shape() || g.size() != v.size()) g = Tensor<T>(v.shape());
    return g.ptr();
  }

  /// Reverse sweep from a scalar output.
  Gradients<T> backward(Var<T> output);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string op;
  };

  Var<T> push(Tensor<T> v, std::vector<NodeId> in, BackwardFn fn, bool rg, const char* op) {
    nodes_.push_back(Node{std::move(v), std::move(in), std::move(fn), rg, op});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  friend class Gradients<T>;
};

/// Result of a backward sweep. Nodes the output does not depend on report a
/// zero gradient of their own shape.
template <typename T>
class Gradients {
 public:
  Gradients(const Graph<T>& g, std::vector<Tensor<T>> grads) : graph_(&g), grads_(std::move(grads)) {}

  Tensor<T> operator[](NodeId id) const {
    const auto& v = graph_->value(id);
    if (id < grads_.size() && grads_[id].shape() == v.shape() && !grads_[id].empty()) return grads_[id];
    return Tensor<T>(v.shape());
  }
  Tensor<T> operator[](Var<T> v) const { return (*this)[v.id]; }

  bool reached(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }

 private:
  const Graph<T>* graph_;
  std::vector<Tensor<T>> grads_;
};

template <typename T>
Gradients<T> Graph<T>::backward(Var<T> output) {
  if (output.graph != this) throw Error("backward: output belongs to another graph");
  if (value(output.id).size() != 1)
    throw Error(detail::cat("backward: output must be scalar-valued, got shape ",
                            shape_str(value(output.id).shape())));
  grads_.assign(nodes_.size(), Tensor<T>());
  if (nodes_[output.id].requires_grad) {
    grads_[output.id] = Tensor<T>(value(output.id).shape(), T{1});
    for (NodeId id = output.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.backward || grads_[id].empty()) continue;
      n.backward(*this, id);
    }
  }
  return Gradients<T>(*this, std::move(grads_));
}

// ---------------------------------------------------------------------------
// Elementwise and reduction operations

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.graph != b.graph) throw Error(cat(op, ": operands belong to different graphs"));
  if (a.shape() != b.shape())
    throw Error(cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const T* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    for (NodeId in : {a, b})
      if (T* s = g.grad_sink(in))
        for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i];
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  const T* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i];
    if (T* s = g.grad_sink(b))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] -= go[i];
  }, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const T* bp = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const T* av = g.value(a).ptr();
    const T* bv = g.value(b).ptr();
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i] * bv[i];
    if (T* s = g.grad_sink(b))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i] * av[i];
  }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return a.graph->record(std::move(out), {a.id}, [a = a.id, factor](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i] * factor;
  }, "scale");
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= v;
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const T* av = g.value(a).ptr();
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += T{2} * av[i] * go[i];
  }, "square");
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (T v : a.value().data()) acc += v;
  return a.graph->record(Tensor<T>::scalar(acc), {a.id}, [a = a.id](Graph<T>& g, NodeId self) {
    const T go = g.grad(self)[0];
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0, n = g.value(a).size(); i < n; ++i) s[i] += go;
  }, "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  if (a.size() == 0) throw Error("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

namespace detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

template <typename T>
T gelu_value(T x) {
  return T{0.5} * x * (T{1} + std::erf(x * static_cast<T>(kInvSqrt2)));
}
template <typename T>
T gelu_slope(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(kInvSqrt2)));
  const T pdf = std::exp(T{-0.5} * x * x) * static_cast<T>(std::numbers::inv_sqrtpi * kInvSqrt2);
  return cdf + x * pdf;
}

}  // namespace detail

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = detail::gelu_value(v);
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const T* av = g.value(a).ptr();
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i] * detail::gelu_slope(av[i]);
  }, "gelu");
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record(std::move(out), {a.id}, [a = a.id](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i];
  }, "reshape");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [R,K] x [K,C] -> [R,C]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2)
    throw Error(detail::cat("matmul: expected 2-D operands, got ", shape_str(as), " and ", shape_str(bs)));
  if (as[1] != bs[0])
    throw Error(detail::cat("matmul: inner extent mismatch ", shape_str(as), " x ", shape_str(bs)));
  const std::size_t R = as[0], K = as[1], C = bs[1];
  Tensor<T> out({R, C});
  const T* A = a.value().ptr();
  const T* B = b.value().ptr();
  T* O = out.ptr();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[r * K + k];
      const T* brow = B + k * C;
      T* orow = O + r * C;
      for (std::size_t c = 0; c < C; ++c) orow[c] += av * brow[c];
    }
  return a.graph->record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, R, K, C](Graph<T>& g, NodeId self) {
    const T* G = g.grad(self).ptr();
    const T* A = g.value(a).ptr();
    const T* B = g.value(b).ptr();
    T* sa = g.grad_sink(a);
    T* sb = g.grad_sink(b);
    if (R >= 4 * std::max(K, C)) {
      // tall and narrow: work on transposed copies so inner loops run over R
      std::vector<T> gt(C * R);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gt[c * R + r] = G[r * C + c];
      if (sb) {
        std::vector<T> at(K * R);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t k = 0; k < K; ++k) at[k * R + r] = A[r * K + k];
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t c = 0; c < C; ++c) {
            const T* x = at.data() + k * R;
            const T* y = gt.data() + c * R;
            T acc{0};
#pragma omp simd reduction(+ : acc)
            for (std::size_t r = 0; r < R; ++r) acc += x[r] * y[r];
            sb[k * C + c] += acc;
          }
      }
      if (sa) {
        std::vector<T> tmp(K * R, T{0});
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t c = 0; c < C; ++c) {
            const T w = B[k * C + c];
            const T* y = gt.data() + c * R;
            T* t = tmp.data() + k * R;
            for (std::size_t r = 0; r < R; ++r) t[r] += w * y[r];
          }
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t k = 0; k < K; ++k) sa[r * K + k] += tmp[k * R + r];
      }
      return;
    }
    if (sa)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) {
          T acc{0};
          const T* grow = G + r * C;
          const T* brow = B + k * C;
#pragma omp simd reduction(+ : acc)
          for (std::size_t c = 0; c < C; ++c) acc += grow[c] * brow[c];
          sa[r * K + k] += acc;
        }
    if (sb)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) {
          const T av = A[r * K + k];
          const T* grow = G + r * C;
          T* srow = sb + k * C;
          for (std::size_t c = 0; c < C; ++c) srow[c] += av * grow[c];
        }
  }, "matmul");
}

/// Adds a per-column bias to every row of a [R,C] matrix.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const auto& as = a.shape();
  if (as.size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != as[1])
    throw Error(detail::cat("add_bias: ", shape_str(as), " with bias ", shape_str(bias.shape())));
  const std::size_t R = as[0], C = as[1];
  Tensor<T> out = a.value();
  const T* b = bias.value().ptr();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += b[c];
  return a.graph->record(std::move(out), {a.id, bias.id}, [a = a.id, bi = bias.id, R, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i];
    if (T* s = g.grad_sink(bi))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) s[c] += go[r * C + c];
  }, "add_bias");
}

/// Treats `a` as [C, S] (C = bias length, S = size / C) and adds bias[c] to
/// every element of channel block c.
template <typename T>
Var<T> add_channel_bias(Var<T> a, Var<T> bias) {
  const std::size_t C = bias.size();
  if (C == 0 || a.size() % C != 0)
    throw Error(detail::cat("add_channel_bias: ", shape_str(a.shape()), " not divisible into ", C, " channels"));
  const std::size_t S = a.size() / C;
  Tensor<T> out = a.value();
  const T* b = bias.value().ptr();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t s = 0; s < S; ++s) out[c * S + s] += b[c];
  return a.graph->record(std::move(out), {a.id, bias.id}, [a = a.id, bi = bias.id, C, S](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < go.size(); ++i) s[i] += go[i];
    if (T* sb = g.grad_sink(bi))
      for (std::size_t c = 0; c < C; ++c) {
        T acc{0};
        for (std::size_t s = 0; s < S; ++s) acc += go[c * S + s];
        sb[c] += acc;
      }
  }, "add_channel_bias");
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(x, weight), bias);
}

/// [R,C] -> [C,R]
template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& s = a.shape();
  if (s.size() != 2) throw Error(detail::cat("transpose: expected 2-D, got ", shape_str(s)));
  const std::size_t R = s[0], C = s[1];
  Tensor<T> out({C, R});
  const T* A = a.value().ptr();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = A[r * C + c];
  return a.graph->record(std::move(out), {a.id}, [a = a.id, R, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) s[r * C + c] += go[c * R + r];
  }, "transpose");
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw Error(detail::cat("concat: axis ", axis, " out of range for ", shape_str(s0)));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (p.graph != parts[0].graph) throw Error("concat: operands belong to different graphs");
    if (s.size() != s0.size()) throw Error("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        throw Error(detail::cat("concat: extent mismatch on axis ", d, ": ", shape_str(s), " vs ", shape_str(s0)));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  std::vector<std::size_t> chunk;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    chunk.push_back(p.size() / std::max<std::size_t>(outer, 1));
    ids.push_back(p.id);
  }
  const std::size_t row = std::accumulate(chunk.begin(), chunk.end(), std::size_t{0});
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = o * row;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* src = parts[i].value().ptr() + o * chunk[i];
      std::copy(src, src + chunk[i], out.ptr() + off);
      off += chunk[i];
    }
  }
  return parts[0].graph->record(std::move(out), ids, [ids, chunk, outer, row](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    std::size_t base = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (T* s = g.grad_sink(ids[i]))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < chunk[i]; ++j) s[o * chunk[i] + j] += go[o * row + base + j];
      base += chunk[i];
    }
  }, "concat");
}

/// Flat re-indexing: out[i] = a[map[i]] when map[i] >= 0, else 0. Permutes,
/// pads, reversals and kernel expansions are all instances of this.
template <typename T>
Var<T> remap(Var<T> a, std::shared_ptr<const std::vector<std::int64_t>> map, Shape shape) {
  if (map->size() != shape_size(shape))
    throw Error(detail::cat("remap: map of ", map->size(), " entries for shape ", shape_str(shape)));
  const std::size_t n = a.size();
  Tensor<T> out(std::move(shape));
  const T* A = a.value().ptr();
  for (std::size_t i = 0; i < map->size(); ++i) {
    const auto j = (*map)[i];
    if (j >= 0) {
      if (static_cast<std::size_t>(j) >= n) throw Error(detail::cat("remap: source index ", j, " >= ", n));
      out[i] = A[j];
    }
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, map](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t i = 0; i < map->size(); ++i)
        if ((*map)[i] >= 0) s[(*map)[i]] += go[i];
  }, "remap");
}

/// Row gather: [N,C] -> [E,C] with rows idx[e].
template <typename T>
Var<T> gather_rows(Var<T> a, std::shared_ptr<const std::vector<std::uint32_t>> idx) {
  const auto& s = a.shape();
  if (s.size() != 2) throw Error(detail::cat("gather_rows: expected 2-D, got ", shape_str(s)));
  const std::size_t N = s[0], C = s[1], E = idx->size();
  Tensor<T> out({E, C});
  const T* A = a.value().ptr();
  for (std::size_t e = 0; e < E; ++e) {
    const std::size_t r = (*idx)[e];
    if (r >= N) throw Error(detail::cat("gather_rows: row index ", r, " >= ", N));
    std::copy(A + r * C, A + (r + 1) * C, out.ptr() + e * C);
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, idx, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t e = 0; e < idx->size(); ++e) {
        T* dst = s + static_cast<std::size_t>((*idx)[e]) * C;
        const T* src = go.ptr() + e * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
      }
  }, "gather_rows");
}

/// Segmented row sum: rows [offsets[q], offsets[q+1]) of a [E,C] matrix are
/// summed in index order into row q of the [Q,C] result.
template <typename T>
Var<T> segment_sum(Var<T> a, std::shared_ptr<const std::vector<std::uint64_t>> offsets) {
  const auto& s = a.shape();
  if (s.size() != 2) throw Error(detail::cat("segment_sum: expected 2-D, got ", shape_str(s)));
  if (offsets->empty()) throw Error("segment_sum: offsets must hold at least one entry");
  const std::size_t E = s[0], C = s[1], Q = offsets->size() - 1;
  if (offsets->back() != E)
    throw Error(detail::cat("segment_sum: offsets end at ", offsets->back(), " but there are ", E, " rows"));
  Tensor<T> out({Q, C});
  const T* A = a.value().ptr();
  for (std::size_t q = 0; q < Q; ++q) {
    T* dst = out.ptr() + q * C;
    for (auto e = (*offsets)[q]; e < (*offsets)[q + 1]; ++e) {
      const T* src = A + e * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, offsets, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t q = 0; q + 1 < offsets->size(); ++q) {
        const T* src = go.ptr() + q * C;
        for (auto e = (*offsets)[q]; e < (*offsets)[q + 1]; ++e)
          for (std::size_t c = 0; c < C; ++c) s[e * C + c] += src[c];
      }
  }, "segment_sum");
}

/// Fixed-width weighted gather table: query n reads `taps` source columns
/// index[n*taps + k] with weight[n*taps + k].
template <typename T>
struct Stencil {
  std::size_t queries = 0;
  std::size_t taps = 0;
  std::vector<std::uint32_t> index;
  std::vector<T> weight;
};

/// Weighted gather over channel-first data. `a` is viewed as [C, V]
/// (C = channels); the result is [C, N] or `out_shape` when given, with
/// out[c,n] = sum_k weight[n,k] * a[c, index[n,k]].
template <typename T>
Var<T> interp(Var<T> a, std::size_t channels, std::shared_ptr<const Stencil<T>> st, Shape out_shape = {}) {
  if (channels == 0 || a.size() % channels != 0)
    throw Error(detail::cat("interp: ", shape_str(a.shape()), " not divisible into ", channels, " channels"));
  const std::size_t C = channels, V = a.size() / channels, N = st->queries, K = st->taps;
  if (out_shape.empty()) out_shape = {C, N};
  if (shape_size(out_shape) != C * N)
    throw Error(detail::cat("interp: output shape ", shape_str(out_shape), " does not hold ", C, "x", N));
  for (auto i : st->index)
    if (i >= V) throw Error(detail::cat("interp: stencil index ", i, " >= source size ", V));
  Tensor<T> out(std::move(out_shape));
  const T* A = a.value().ptr();
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = A + c * V;
    T* dst = out.ptr() + c * N;
    for (std::size_t n = 0; n < N; ++n) {
      T acc{0};
      for (std::size_t k = 0; k < K; ++k) acc += st->weight[n * K + k] * src[st->index[n * K + k]];
      dst[n] = acc;
    }
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, st, C, V](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const std::size_t N = st->queries, K = st->taps;
    if (T* s = g.grad_sink(a))
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t n = 0; n < N; ++n) {
          const T gv = go[c * N + n];
          for (std::size_t k = 0; k < K; ++k) s[c * V + st->index[n * K + k]] += st->weight[n * K + k] * gv;
        }
  }, "interp");
}

/// Unweighted tap gather: `a` viewed as [C,V] -> [N*taps, C], one row per tap.
template <typename T>
Var<T> gather_taps(Var<T> a, std::size_t channels, std::shared_ptr<const Stencil<T>> st) {
  if (channels == 0 || a.size() % channels != 0)
    throw Error(detail::cat("gather_taps: ", shape_str(a.shape()), " not divisible into ", channels, " channels"));
  const std::size_t C = channels, V = a.size() / channels, R = st->index.size();
  Tensor<T> out({R, C});
  const T* A = a.value().ptr();
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t v = st->index[r];
    if (v >= V) throw Error(detail::cat("gather_taps: stencil index ", v, " >= source size ", V));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = A[c * V + v];
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, st, C, V](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t r = 0; r < st->index.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) s[c * V + st->index[r]] += go[r * C + c];
  }, "gather_taps");
}

/// [N*taps, C] -> [N, C], out[n] = sum_k weight[n,k] * a[n*taps + k].
template <typename T>
Var<T> tap_weighted_sum(Var<T> a, std::shared_ptr<const Stencil<T>> st) {
  const auto& s = a.shape();
  const std::size_t N = st->queries, K = st->taps;
  if (s.size() != 2 || s[0] != N * K)
    throw Error(detail::cat("tap_weighted_sum: expected [", N * K, ",C], got ", shape_str(s)));
  const std::size_t C = s[1];
  Tensor<T> out({N, C});
  const T* A = a.value().ptr();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const T w = st->weight[n * K + k];
      const T* src = A + (n * K + k) * C;
      for (std::size_t c = 0; c < C; ++c) out[n * C + c] += w * src[c];
    }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, st, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const std::size_t N = st->queries, K = st->taps;
    if (T* s = g.grad_sink(a))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          const T w = st->weight[n * K + k];
          for (std::size_t c = 0; c < C; ++c) s[(n * K + k) * C + c] += w * go[n * C + c];
        }
  }, "tap_weighted_sum");
}

/// [N*taps, C] -> [N, C], out[n] = prod_k a[n*taps + k].
template <typename T>
Var<T> tap_product(Var<T> a, std::size_t taps) {
  const auto& s = a.shape();
  if (s.size() != 2 || taps == 0 || s[0] % taps != 0)
    throw Error(detail::cat("tap_product: ", shape_str(s), " not divisible into groups of ", taps));
  const std::size_t N = s[0] / taps, C = s[1];
  Tensor<T> out({N, C}, T{1});
  const T* A = a.value().ptr();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < taps; ++k)
      for (std::size_t c = 0; c < C; ++c) out[n * C + c] *= A[(n * taps + k) * C + c];
  return a.graph->record(std::move(out), {a.id}, [a = a.id, taps, N, C](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const T* A = g.value(a).ptr();
    if (T* s = g.grad_sink(a))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t k = 0; k < taps; ++k) {
            // product of the other taps; avoids dividing by a possibly-zero factor
            T others{1};
            for (std::size_t j = 0; j < taps; ++j)
              if (j != k) others *= A[(n * taps + j) * C + c];
            s[(n * taps + k) * C + c] += go[n * C + c] * others;
          }
  }, "tap_product");
}

/// Per-channel mean over the trailing extent: [C, S...] -> [C].
template <typename T>
Var<T> channel_mean(Var<T> a, std::size_t channels) {
  if (channels == 0 || a.size() % channels != 0)
    throw Error(detail::cat("channel_mean: ", shape_str(a.shape()), " not divisible into ", channels, " channels"));
  const std::size_t S = a.size() / channels;
  Tensor<T> out({channels});
  const T* A = a.value().ptr();
  for (std::size_t c = 0; c < channels; ++c) {
    T acc{0};
    for (std::size_t s = 0; s < S; ++s) acc += A[c * S + s];
    out[c] = acc / static_cast<T>(S);
  }
  return a.graph->record(std::move(out), {a.id}, [a = a.id, channels, S](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    if (T* s = g.grad_sink(a))
      for (std::size_t c = 0; c < channels; ++c) {
        const T gv = go[c] / static_cast<T>(S);
        for (std::size_t i = 0; i < S; ++i) s[c * S + i] += gv;
      }
  }, "channel_mean");
}

/// Normalizes each channel block of `a` (viewed as [C, S]) to zero mean and
/// unit variance over its S elements, then applies gamma/beta per channel.
template <typename T>
Var<T> channel_layer_norm(Var<T> a, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const std::size_t C = gamma.size();
  if (C == 0 || beta.size() != C || a.size() % C != 0)
    throw Error(detail::cat("channel_layer_norm: ", shape_str(a.shape()), " with ", C, " channels"));
  const std::size_t S = a.size() / C;
  Tensor<T> out(a.shape());
  auto xhat = std::make_shared<std::vector<T>>(a.size());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  const T* A = a.value().ptr();
  const T* G = gamma.value().ptr();
  const T* B = beta.value().ptr();
  for (std::size_t c = 0; c < C; ++c) {
    const T* x = A + c * S;
    T mu{0};
    for (std::size_t s = 0; s < S; ++s) mu += x[s];
    mu /= static_cast<T>(S);
    T var{0};
    for (std::size_t s = 0; s < S; ++s) var += (x[s] - mu) * (x[s] - mu);
    var /= static_cast<T>(S);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    for (std::size_t s = 0; s < S; ++s) {
      const T h = (x[s] - mu) * is;
      (*xhat)[c * S + s] = h;
      out[c * S + s] = G[c] * h + B[c];
    }
  }
  return a.graph->record(std::move(out), {a.id, gamma.id, beta.id},
                         [a = a.id, gi = gamma.id, bi = beta.id, xhat, inv_std, C, S](Graph<T>& g, NodeId self) {
    const auto& go = g.grad(self);
    const T* G = g.value(gi).ptr();
    T* sa = g.grad_sink(a);
    T* sg = g.grad_sink(gi);
    T* sb = g.grad_sink(bi);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g{0}, sum_gh{0};
      for (std::size_t s = 0; s < S; ++s) {
        sum_g += go[c * S + s];
        sum_gh += go[c * S + s] * (*xhat)[c * S + s];
      }
      if (sg) sg[c] += sum_gh;
      if (sb) sb[c] += sum_g;
      if (sa) {
        const T k = G[c] * (*inv_std)[c] / static_cast<T>(S);
        for (std::size_t s = 0; s < S; ++s)
          sa[c * S + s] += k * (static_cast<T>(S) * go[c * S + s] - sum_g - (*xhat)[c * S + s] * sum_gh);
      }
    }
  }, "channel_layer_norm");
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Max over all input entries of |analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-12), using central differences with the given step. `f`
/// must build a scalar from the supplied input variables.
template <typename T, typename F>
T gradient_check(F&& f, const std::vector<Tensor<T>>& inputs, T step = T(1e-5)) {
  auto evaluate = [&](const std::vector<Tensor<T>>& xs) {
    Graph<T> g;
    std::vector<Var<T>> vs;
    for (const auto& x : xs) vs.push_back(g.constant(x));
    return f(g, vs).value()[0];
  };
  Graph<T> g;
  std::vector<Var<T>> vars;
  for (const auto& x : inputs) vars.push_back(g.variable(x));
  Var<T> out = f(g, vars);
  auto grads = g.backward(out);
  T worst{0};
  std::vector<Tensor<T>> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor<T> analytic = grads[vars[t]];
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const T orig = probe[t][i];
      probe[t][i] = orig + step;
      const T up = evaluate(probe);
      probe[t][i] = orig - step;
      const T down = evaluate(probe);
      probe[t][i] = orig;
      const T numeric = (up - down) / (T{2} * step);
      const T denom = std::max({std::abs(analytic[i]), std::abs(numeric), T(1e-12)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace figconv
