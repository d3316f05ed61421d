#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "figconv/autodiff.hpp"

namespace figconv {

/// Portable deterministic generator. The raw stream is fixed by the standard
/// (mt19937_64) and the float mappings below do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Index in [0, n).
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[below(i + 1)]);
    return p;
  }

 private:
  std::mt19937_64 eng_;
};

/// Child seed for stream i of a master seed.
inline std::uint64_t split_seed(std::uint64_t master, std::uint64_t i) {
  std::uint64_t x = master + 0x9e3779b97f4a7c15ULL * (i + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Binds parameter tensors into a graph as leaves, one leaf per tensor.
/// Trainable binders create gradient-tracking leaves; otherwise constants.
template <typename T>
class Binder {
 public:
  Binder(Graph<T>& g, bool trainable) : graph_(g), trainable_(trainable) {}

  Var<T> operator()(const Tensor<T>& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return it->second;
    Var<T> v = trainable_ ? graph_.variable(param) : graph_.constant(param);
    bound_.emplace(&param, v);
    return v;
  }

  Graph<T>& graph() { return graph_; }

  /// Gradient of a bound parameter (zeros when it was never bound).
  Tensor<T> gradient(const Gradients<T>& grads, const Tensor<T>& param) const {
    auto it = bound_.find(&param);
    if (it == bound_.end()) return Tensor<T>(param.shape());
    return grads[it->second];
  }

 private:
  Graph<T>& graph_;
  bool trainable_;
  std::unordered_map<const Tensor<T>*, Var<T>> bound_;
};

/// Named view of a parameter for optimizers and checkpoints.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

/// Fully connected stack with GELU between layers (none after the last).
/// Weights are [in, out].
template <typename T>
struct Mlp {
  std::vector<Tensor<T>> weights;
  std::vector<Tensor<T>> biases;

  Mlp() = default;

  Mlp(const std::vector<std::size_t>& widths, Rng& rng) {
    if (widths.size() < 2) throw Error("mlp: need at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      if (widths[l] == 0 || widths[l + 1] == 0) throw Error("mlp: zero layer width");
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
      weights.push_back(uniform_tensor<T>({widths[l], widths[l + 1]}, bound, rng));
      biases.push_back(uniform_tensor<T>({widths[l + 1]}, bound, rng));
    }
  }

  std::size_t in_width() const { return weights.front().extent(0); }
  std::size_t out_width() const { return weights.back().extent(1); }
  std::size_t layers() const { return weights.size(); }

  Var<T> operator()(Binder<T>& bind, Var<T> x) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      x = linear(x, bind(weights[l]), bind(biases[l]));
      if (l + 1 < weights.size()) x = gelu(x);
    }
    return x;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back({prefix + ".w" + std::to_string(l), &weights[l]});
      out.push_back({prefix + ".b" + std::to_string(l), &biases[l]});
    }
  }
};

}  // namespace figconv
