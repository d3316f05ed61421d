#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figconv/checkpoint.hpp"
#include "figconv/unet.hpp"

namespace figconv {

struct TrainConfig {
  double lr = 1e-3;
  double gamma = 0.1;
  std::size_t step = 25;
  std::size_t batch = 16;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::string precision = "float32";

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw Error(detail::cat("train config: lr must be positive, got ", lr));
    if (!(gamma > 0) || gamma > 1) throw Error(detail::cat("train config: gamma must lie in (0, 1], got ", gamma));
    if (step == 0) throw Error("train config: step must be at least 1");
    if (batch == 0) throw Error("train config: batch must be at least 1");
    if (precision != "float32" && precision != "float64")
      throw Error(detail::cat("train config: precision must be float32 or float64, got ", precision));
  }
};

/// Step decay: lr * gamma^floor(epoch / step).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.step));
}

/// (c_hat - c)^2 + mean((P_hat - P)^2)
template <typename T>
Var<T> joint_loss(Var<T> drag_pred, Var<T> drag_true, Var<T> p_pred, Var<T> p_true) {
  if (p_pred.size() != p_true.size())
    throw Error(detail::cat("joint_loss: ", p_pred.size(), " predicted pressures for ", p_true.size(), " labels"));
  if (p_pred.size() == 0) throw Error("joint_loss: no pressure values");
  if (drag_pred.size() != 1 || drag_true.size() != 1) throw Error("joint_loss: drag must be a single value");
  Var<T> d = reshape(sub(reshape(drag_pred, {1}), reshape(drag_true, {1})), {});
  Var<T> p = sub(reshape(p_pred, {p_pred.size()}), reshape(p_true, {p_true.size()}));
  return add(square(d), mean(square(p)));
}

inline double joint_loss(double drag_pred, double drag_true, std::span<const double> p_pred,
                         std::span<const double> p_true) {
  if (p_pred.size() != p_true.size())
    throw Error(detail::cat("joint_loss: ", p_pred.size(), " predicted pressures for ", p_true.size(), " labels"));
  if (p_pred.empty()) throw Error("joint_loss: no pressure values");
  double acc = 0;
  for (std::size_t i = 0; i < p_pred.size(); ++i) acc += (p_pred[i] - p_true[i]) * (p_pred[i] - p_true[i]);
  return (drag_pred - drag_true) * (drag_pred - drag_true) + acc / static_cast<double>(p_pred.size());
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
template <typename T>
void adam_step(const std::vector<ParamRef<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               double lr, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw Error("adam: gradient count differs from parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].tensor->shape())
      throw Error(detail::cat("adam: gradient shape ", shape_str(grads[i].shape()), " for parameter ", params[i].name,
                              " of shape ", shape_str(params[i].tensor->shape())));
    for (T g : grads[i].data())
      if (!std::isfinite(static_cast<double>(g)))
        throw Error(detail::cat("adam: non-finite gradient in parameter ", params[i].name));
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->shape());
      state.v.emplace_back(p.tensor->shape());
    }
  }
  if (state.m.size() != params.size()) throw Error("adam: optimizer state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i].tensor->ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    const T* g = grads[i].ptr();
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      const double gk = g[k];
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / bc1, vhat = vk / bc2;
      w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

struct ErrorStats {
  double mse = 0, mae = 0, max_ae = 0;
  std::optional<double> r2;  // empty when the targets have zero variance
};

inline ErrorStats error_stats(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw Error("metrics: prediction and label counts differ");
  if (pred.empty()) throw Error("metrics: empty set");
  ErrorStats s;
  double mean = 0;
  for (double t : truth) mean += t;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    s.mse += e * e;
    s.mae += std::abs(e);
    s.max_ae = std::max(s.max_ae, std::abs(e));
    ss_res += e * e;
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  s.mse /= static_cast<double>(pred.size());
  s.mae /= static_cast<double>(pred.size());
  if (ss_tot > 0) s.r2 = 1.0 - ss_res / ss_tot;
  return s;
}

struct Metrics {
  ErrorStats drag;
  ErrorStats pressure;
};

/// A prepared sample with its labels.
template <typename T>
struct TrainItem {
  PreparedSample<T> input;
  T drag{};
  Tensor<T> pressure;  // [N, 1], normalized
};

template <typename T>
std::vector<TrainItem<T>> make_items(const Model<T>& model, const std::vector<SurfaceSample>& samples) {
  std::vector<TrainItem<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.pressure.size() != s.points.size()) throw Error("dataset: pressure labels do not match the point count");
    TrainItem<T> it;
    it.input = prepare(model, s);
    it.drag = static_cast<T>(s.drag);
    it.pressure = Tensor<T>({s.pressure.size(), 1});
    for (std::size_t i = 0; i < s.pressure.size(); ++i) it.pressure[i] = static_cast<T>(s.pressure[i]);
    out.push_back(std::move(it));
  }
  return out;
}

/// Drag metrics over samples, pressure metrics over every point of every
/// sample.
template <typename T>
Metrics evaluate(const Model<T>& model, const std::vector<TrainItem<T>>& items) {
  if (items.empty()) throw Error("evaluate: empty dataset");
  std::vector<double> dp, dt, pp, pt;
  for (const auto& it : items) {
    const auto pred = forward(model, it.input);
    dp.push_back(pred.drag);
    dt.push_back(it.drag);
    for (std::size_t i = 0; i < pred.pressure.size(); ++i) {
      pp.push_back(pred.pressure[i]);
      pt.push_back(it.pressure[i]);
    }
  }
  return {error_stats(dp, dt), error_stats(pp, pt)};
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<Metrics> val;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  Metrics train;
  std::optional<Metrics> val;
};

template <typename T>
struct TrainState {
  AdamState<T> adam;
  std::size_t epoch = 0;  // next epoch to run
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_log;
  /// Return true to stop after this epoch.
  std::function<bool(const EpochRecord&)> on_epoch;
  bool validate_each_epoch = true;
};

/// Mean joint loss over a batch and the summed parameter gradients (divided
/// by the batch size). Samples are processed in batch order.
template <typename T>
double batch_gradients(Model<T>& model, const std::vector<TrainItem<T>>& items, std::span<const std::size_t> batch,
                       const std::vector<ParamRef<T>>& params, std::vector<Tensor<T>>& grads) {
  grads.clear();
  for (const auto& p : params) grads.emplace_back(p.tensor->shape());
  double total = 0;
  const T inv = T{1} / static_cast<T>(batch.size());
  for (std::size_t idx : batch) {
    const auto& it = items[idx];
    Graph<T> g;
    Binder<T> bind(g, true);
    auto out = forward_vars(bind, model, it.input);
    Var<T> loss = joint_loss(out.drag, g.constant(Tensor<T>({1}, std::vector<T>{it.drag})), out.pressure,
                             g.constant(it.pressure));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw Error(detail::cat("train: non-finite loss on sample ", idx));
    total += lv;
    Var<T> scaled = scale(loss, inv);
    auto gr = g.backward(scaled);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<T> gi = bind.gradient(gr, *params[i].tensor);
      T* dst = grads[i].ptr();
      for (std::size_t k = 0; k < gi.size(); ++k) dst[k] += gi[k];
    }
  }
  return total / static_cast<double>(batch.size());
}

/// Epoch loop from state.epoch up to cfg.epochs: seeded per-epoch shuffle
/// (last partial batch kept), Adam at lr_at(epoch), optional validation.
template <typename T>
TrainReport train(Model<T>& model, const std::vector<TrainItem<T>>& train_set, const std::vector<TrainItem<T>>& val_set,
                  const TrainConfig& cfg, TrainState<T>& state, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training set");
  auto params = model.parameters();
  TrainReport report;
  std::vector<Tensor<T>> grads;
  for (; state.epoch < cfg.epochs;) {
    const std::size_t epoch = state.epoch;
    const double lr = lr_at(epoch, cfg);
    Rng rng(split_seed(cfg.seed, 0x5eed0000ULL + epoch));
    const auto order = rng.permutation(train_set.size());
    double loss_sum = 0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++nb) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      double l = 0;
      try {
        l = batch_gradients(model, train_set, batch, params, grads);
      } catch (const Error& e) {
        throw Error(detail::cat("train: epoch ", epoch, ", batch ", nb, ": ", e.what()));
      }
      loss_sum += l;
      adam_step(params, grads, state.adam, lr);
    }
    ++state.epoch;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(nb);
    if (hooks.validate_each_epoch && !val_set.empty()) rec.val = evaluate(model, val_set);
    report.epochs.push_back(rec);
    if (hooks.on_log) hooks.on_log(rec);
    if (hooks.on_epoch && hooks.on_epoch(rec)) break;
  }
  report.train = evaluate(model, train_set);
  if (!val_set.empty()) report.val = evaluate(model, val_set);
  return report;
}

template <typename T>
TrainReport train(Model<T>& model, const std::vector<TrainItem<T>>& train_set, const std::vector<TrainItem<T>>& val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  TrainState<T> state;
  return train(model, train_set, val_set, cfg, state, hooks);
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json stats_json(const ErrorStats& s) {
  nlohmann::json j;
  j["mse"] = s.mse;
  j["mae"] = s.mae;
  j["max_ae"] = s.max_ae;
  j["r2"] = s.r2 ? nlohmann::json(*s.r2) : nlohmann::json("undefined");
  return j;
}

/// One JSON object per line.
inline std::string epoch_log_line(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  if (r.val) {
    j["val_drag"] = stats_json(r.val->drag);
    j["val_pressure"] = stats_json(r.val->pressure);
  }
  return j.dump() + "\n";
}

/// Final report: a JSON array of {"metric", "split", "value"} records. An
/// undefined R^2 is written as the string "undefined".
inline nlohmann::json metrics_records(const Metrics& m, const std::string& split) {
  nlohmann::json arr = nlohmann::json::array();
  auto add = [&](const std::string& prefix, const ErrorStats& s) {
    arr.push_back({{"metric", prefix + "_mse"}, {"split", split}, {"value", s.mse}});
    arr.push_back({{"metric", prefix + "_mae"}, {"split", split}, {"value", s.mae}});
    arr.push_back({{"metric", prefix + "_max_ae"}, {"split", split}, {"value", s.max_ae}});
    arr.push_back({{"metric", prefix + "_r2"},
                   {"split", split},
                   {"value", s.r2 ? nlohmann::json(*s.r2) : nlohmann::json("undefined")}});
  };
  add("drag", m.drag);
  add("pressure", m.pressure);
  return arr;
}

inline std::string final_report(const TrainReport& r) {
  nlohmann::json arr = metrics_records(r.train, "train");
  if (r.val)
    for (auto& e : metrics_records(*r.val, "val")) arr.push_back(e);
  return arr.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
std::vector<NamedTensor> checkpoint_tensors(Model<T>& model, const TrainState<T>* state = nullptr) {
  std::vector<NamedTensor> out;
  const auto params = model.parameters();
  for (const auto& p : params) out.push_back({p.name, p.tensor->template cast<float>()});
  if (state) {
    for (std::size_t i = 0; i < state->adam.m.size() && i < params.size(); ++i) {
      out.push_back({"adam.m/" + params[i].name, state->adam.m[i].template cast<float>()});
      out.push_back({"adam.v/" + params[i].name, state->adam.v[i].template cast<float>()});
    }
    out.push_back({"adam.step", Tensor<float>({1}, std::vector<float>{static_cast<float>(state->adam.step)})});
    out.push_back({"train.epoch", Tensor<float>({1}, std::vector<float>{static_cast<float>(state->epoch)})});
  }
  return out;
}

/// Restores parameters (and optimizer state when present and requested).
template <typename T>
void restore_checkpoint(Model<T>& model, const std::vector<NamedTensor>& tensors, TrainState<T>* state = nullptr) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  auto params = model.parameters();
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw Error(detail::cat("checkpoint: missing parameter ", p.name));
    if (it->second->shape() != p.tensor->shape())
      throw Error(detail::cat("checkpoint: parameter ", p.name, " has shape ", shape_str(it->second->shape()),
                              ", model expects ", shape_str(p.tensor->shape())));
    *p.tensor = it->second->template cast<T>();
  }
  if (!state) return;
  auto step = by_name.find("adam.step");
  auto epoch = by_name.find("train.epoch");
  if (step == by_name.end() || epoch == by_name.end()) throw Error("checkpoint: no optimizer state to resume from");
  state->adam = {};
  state->adam.step = static_cast<std::uint64_t>((*step->second)[0]);
  state->epoch = static_cast<std::size_t>((*epoch->second)[0]);
  if (state->adam.step == 0) return;
  for (const auto& p : params) {
    auto m = by_name.find("adam.m/" + p.name), v = by_name.find("adam.v/" + p.name);
    if (m == by_name.end() || v == by_name.end()) throw Error(detail::cat("checkpoint: missing Adam state for ", p.name));
    state->adam.m.push_back(m->second->template cast<T>());
    state->adam.v.push_back(v->second->template cast<T>());
  }
}

}  // namespace figconv
