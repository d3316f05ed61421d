#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <yaml-cpp/yaml.h>

#include "figconv/trainer.hpp"

namespace figconv {

/// Everything a command needs: model + training settings, dataset paths and
/// an output directory. Relative paths resolve against the config file's
/// directory.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path train_data;
  std::filesystem::path val_data;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;

  /// Single seed for model init and training shuffles.
  void set_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    train.seed = s;
  }
};

namespace detail {

template <typename V>
V yaml_as(const YAML::Node& n, const std::string& field) {
  try {
    return n.as<V>();
  } catch (const YAML::Exception&) {
    throw Error(cat("config: field '", field, "' has an invalid value"));
  }
}

inline std::vector<std::size_t> yaml_sizes(const YAML::Node& n, const std::string& field) {
  if (!n.IsSequence()) throw Error(cat("config: field '", field, "' must be a list"));
  std::vector<std::size_t> out;
  for (const auto& e : n) {
    const auto v = yaml_as<long long>(e, field);
    if (v < 0) throw Error(cat("config: field '", field, "' has a negative entry"));
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline void check_keys(const YAML::Node& n, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw Error(cat("config: unknown field '", where, key, "'"));
  }
}

inline Vec3 yaml_vec3(const YAML::Node& n, const std::string& field) {
  const auto v = n.IsSequence() && n.size() == 3 ? std::optional<Vec3>(Vec3{}) : std::nullopt;
  if (!v) throw Error(cat("config: field '", field, "' must be a list of 3 numbers"));
  Vec3 out;
  for (std::size_t a = 0; a < 3; ++a) out[a] = yaml_as<double>(n[a], field);
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = ".") {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(detail::cat("config: YAML parse error: ", e.what()));
  }
  RunConfig rc;
  if (!root || root.IsNull()) return rc;
  if (!root.IsMap()) throw Error("config: top level must be a mapping");
  detail::check_keys(root,
                     {"num_levels", "kernel_size", "hidden_channels", "num_down_blocks", "num_up_blocks",
                      "resolution_memory_format_pairs", "combine", "pe_frequencies", "mlp_hidden", "sigma_scale",
                      "velocity_conditioning", "bounds", "edge_encoding", "seed", "train", "data", "out"},
                     "");
  auto& m = rc.model;
  if (auto n = root["num_levels"]) m.num_levels = detail::yaml_as<std::size_t>(n, "num_levels");
  if (auto n = root["kernel_size"]) m.kernel_size = detail::yaml_as<std::size_t>(n, "kernel_size");
  if (auto n = root["hidden_channels"]) m.hidden_channels = detail::yaml_sizes(n, "hidden_channels");
  if (auto n = root["num_down_blocks"]) m.num_down_blocks = detail::yaml_sizes(n, "num_down_blocks");
  if (auto n = root["num_up_blocks"]) m.num_up_blocks = detail::yaml_sizes(n, "num_up_blocks");
  if (auto n = root["resolution_memory_format_pairs"]) {
    if (!n.IsSequence()) throw Error("config: field 'resolution_memory_format_pairs' must be a list");
    m.resolution_memory_format_pairs.clear();
    for (const auto& e : n) {
      const auto v = detail::yaml_sizes(e, "resolution_memory_format_pairs");
      if (v.size() != 3) throw Error("config: field 'resolution_memory_format_pairs' entries must have 3 extents");
      m.resolution_memory_format_pairs.push_back({v[0], v[1], v[2]});
    }
  }
  if (auto n = root["combine"]) {
    const auto s = detail::yaml_as<std::string>(n, "combine");
    if (s == "sum") m.combine = Combine::Sum;
    else if (s == "product") m.combine = Combine::Product;
    else throw Error(detail::cat("config: field 'combine' must be sum or product, got ", s));
  }
  if (auto n = root["edge_encoding"]) {
    const auto s = detail::yaml_as<std::string>(n, "edge_encoding");
    if (s == "offset") m.edge_encoding = EdgeEncoding::Offset;
    else if (s == "raw") m.edge_encoding = EdgeEncoding::Raw;
    else throw Error(detail::cat("config: field 'edge_encoding' must be offset or raw, got ", s));
  }
  if (auto n = root["pe_frequencies"]) m.pe_frequencies = detail::yaml_as<std::size_t>(n, "pe_frequencies");
  if (auto n = root["mlp_hidden"]) m.mlp_hidden = detail::yaml_as<std::size_t>(n, "mlp_hidden");
  if (auto n = root["sigma_scale"]) m.sigma_scale = detail::yaml_as<double>(n, "sigma_scale");
  if (auto n = root["velocity_conditioning"]) m.velocity_conditioning = detail::yaml_as<bool>(n, "velocity_conditioning");
  if (auto n = root["bounds"]) {
    if (!n.IsMap()) throw Error("config: field 'bounds' must be a mapping with lo and hi");
    detail::check_keys(n, {"lo", "hi"}, "bounds.");
    if (!n["lo"] || !n["hi"]) throw Error("config: field 'bounds' needs both lo and hi");
    m.bounds = Box{detail::yaml_vec3(n["lo"], "bounds.lo"), detail::yaml_vec3(n["hi"], "bounds.hi")};
  }
  if (auto n = root["seed"]) rc.set_seed(detail::yaml_as<std::uint64_t>(n, "seed"));
  if (auto t = root["train"]) {
    if (!t.IsMap()) throw Error("config: field 'train' must be a mapping");
    detail::check_keys(t, {"lr", "gamma", "step", "batch", "epochs", "precision"}, "train.");
    auto& tc = rc.train;
    if (auto n = t["lr"]) tc.lr = detail::yaml_as<double>(n, "train.lr");
    if (auto n = t["gamma"]) tc.gamma = detail::yaml_as<double>(n, "train.gamma");
    if (auto n = t["step"]) tc.step = detail::yaml_as<std::size_t>(n, "train.step");
    if (auto n = t["batch"]) tc.batch = detail::yaml_as<std::size_t>(n, "train.batch");
    if (auto n = t["epochs"]) tc.epochs = detail::yaml_as<std::size_t>(n, "train.epochs");
    if (auto n = t["precision"]) tc.precision = detail::yaml_as<std::string>(n, "train.precision");
  }
  auto resolve = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : base_dir / p; };
  if (auto d = root["data"]) {
    if (!d.IsMap()) throw Error("config: field 'data' must be a mapping");
    detail::check_keys(d, {"train", "val"}, "data.");
    if (auto n = d["train"]) rc.train_data = resolve(detail::yaml_as<std::string>(n, "data.train"));
    if (auto n = d["val"]) rc.val_data = resolve(detail::yaml_as<std::string>(n, "data.val"));
  }
  if (auto n = root["out"]) rc.out_dir = resolve(detail::yaml_as<std::string>(n, "out"));
  else rc.out_dir = resolve("out");
  rc.model.validate();
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(detail::cat("config: cannot open ", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace figconv
