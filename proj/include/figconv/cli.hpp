#pragma once

#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figconv/config.hpp"
#include "figconv/verify.hpp"

namespace figconv {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitVerifyFailed = 2 };

// Output files written by `train` into the run's output directory.
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kLogFile = "train_log.jsonl";

struct GenArgs {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  SyntheticOptions options;
};

inline void cmd_gen(const GenArgs& a, std::ostream& log) {
  if (a.count == 0) throw Error("gen: count must be at least 1");
  if (a.out.empty()) throw Error("gen: --out is required");
  const auto samples = gen_synthetic(a.count, a.seed, a.options);
  write_dataset(a.out, samples, a.options);
  log << "wrote " << a.count << " samples to " << a.out.string() << "\n";
}

struct RunArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> checkpoint;
  bool resume = false;
  std::optional<std::filesystem::path> data;  // eval: dataset; predict: mesh
};

namespace detail {

inline RunConfig resolve_run(const RunArgs& a) {
  if (a.config.empty()) throw Error("--config is required");
  RunConfig rc = load_run_config(a.config);
  if (a.seed) rc.set_seed(*a.seed);
  if (a.out) rc.out_dir = *a.out;
  return rc;
}

inline void require_dir(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw Error(cat("config: ", what, " dataset path is not set"));
  if (!std::filesystem::is_directory(p)) throw Error(cat(what, " dataset not found: ", p.string()));
}

inline void require_file(const std::filesystem::path& p, const char* what) {
  if (!std::filesystem::is_regular_file(p)) throw Error(cat(what, " not found: ", p.string()));
}

/// Normalization statistics come from the training set whenever it is known.
inline std::optional<PressureStats> train_stats(const RunConfig& rc) {
  if (rc.train_data.empty() || !std::filesystem::is_directory(rc.train_data)) return std::nullopt;
  return read_dataset_info(rc.train_data).stats;
}

template <typename T>
void run_train(const RunConfig& rc, const RunArgs& a, std::ostream& log) {
  require_dir(rc.train_data, "training");
  if (!rc.val_data.empty()) require_dir(rc.val_data, "validation");
  const auto train_samples = read_dataset(rc.train_data);
  const PressureStats stats = read_dataset_info(rc.train_data).stats;
  std::vector<SurfaceSample> val_samples;
  if (!rc.val_data.empty()) val_samples = read_dataset(rc.val_data, stats);

  Model<T> model = build_model<T>(rc.model);
  TrainState<T> state;
  const auto ckpt_path = a.checkpoint ? *a.checkpoint : rc.out_dir / kCheckpointFile;
  std::string log_text;
  if (a.resume) {
    require_file(ckpt_path, "checkpoint");
    restore_checkpoint(model, load_checkpoint(ckpt_path.string()), &state);
    const auto prev_log = rc.out_dir / kLogFile;
    if (std::filesystem::is_regular_file(prev_log)) log_text = read_text(prev_log);
    log << "resuming at epoch " << state.epoch << "\n";
  }
  const auto items = make_items(model, train_samples);
  const auto val = make_items(model, val_samples);
  TrainHooks hooks;
  hooks.on_log = [&](const EpochRecord& r) {
    const std::string line = epoch_log_line(r);
    log_text += line;
    log << line;
  };
  const TrainReport report = train(model, items, val, rc.train, state, hooks);

  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  if (!std::filesystem::is_directory(rc.out_dir)) throw Error(cat("cannot create output directory ", rc.out_dir.string()));
  save_checkpoint((rc.out_dir / kCheckpointFile).string(), checkpoint_tensors(model, &state));
  write_text(rc.out_dir / kReportFile, final_report(report));
  write_text(rc.out_dir / kLogFile, log_text);
  log << "checkpoint " << (rc.out_dir / kCheckpointFile).string() << "\n";
}

template <typename T>
Model<T> load_model(const RunConfig& rc, const RunArgs& a) {
  const auto ckpt = a.checkpoint ? *a.checkpoint : rc.out_dir / kCheckpointFile;
  require_file(ckpt, "checkpoint");
  Model<T> model = build_model<T>(rc.model);
  restore_checkpoint(model, load_checkpoint(ckpt.string()));
  return model;
}

template <typename T>
void run_eval(const RunConfig& rc, const RunArgs& a, std::ostream& log) {
  const auto dir = a.data ? *a.data : rc.val_data;
  require_dir(dir, "evaluation");
  Model<T> model = load_model<T>(rc, a);
  const auto samples = read_dataset(dir, train_stats(rc));
  const Metrics m = evaluate(model, make_items(model, samples));
  const std::string text = metrics_records(m, "eval").dump(2) + "\n";
  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  write_text(rc.out_dir / "eval.json", text);
  log << text;
}

template <typename T>
void run_predict(const RunConfig& rc, const RunArgs& a, std::ostream& log) {
  if (!a.data) throw Error("predict: --mesh is required");
  require_file(*a.data, "mesh");
  Model<T> model = load_model<T>(rc, a);
  const Mesh mesh = read_obj(*a.data);
  const FaceData fd = faces_to_centroids(mesh);
  double velocity = 30.0;
  std::optional<PressureStats> stats;
  if (!rc.train_data.empty() && std::filesystem::is_directory(rc.train_data)) {
    const auto info = read_dataset_info(rc.train_data);
    velocity = info.velocity;
    stats = info.stats;
  }
  const auto pred = forward(model, prepare(model, std::span<const Vec3>(fd.centroids),
                                           std::span<const Vec3>(fd.normals), std::optional<double>(velocity)));
  std::string out = "cd " + fmt_double(static_cast<double>(pred.drag)) + "\n";
  for (T p : pred.pressure) {
    out += fmt_double(static_cast<double>(p));
    if (stats) out += " " + fmt_double(static_cast<double>(p) * stats->std + stats->mean);
    out += "\n";
  }
  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  write_text(rc.out_dir / "prediction.txt", out);
  log << "cd " << fmt_double(static_cast<double>(pred.drag)) << " (" << pred.pressure.size() << " faces)\n";
}

template <template <typename> class Fn>
void dispatch(const RunConfig& rc, const RunArgs& a, std::ostream& log) {
  if (rc.train.precision == "float64") Fn<double>{}(rc, a, log);
  else Fn<float>{}(rc, a, log);
}

template <typename T>
struct TrainFn {
  void operator()(const RunConfig& rc, const RunArgs& a, std::ostream& log) { run_train<T>(rc, a, log); }
};
template <typename T>
struct EvalFn {
  void operator()(const RunConfig& rc, const RunArgs& a, std::ostream& log) { run_eval<T>(rc, a, log); }
};
template <typename T>
struct PredictFn {
  void operator()(const RunConfig& rc, const RunArgs& a, std::ostream& log) { run_predict<T>(rc, a, log); }
};

}  // namespace detail

/// Writes checkpoint.bin, report.json and train_log.jsonl into the output
/// directory. With `resume`, optimizer state and epoch count come from the
/// checkpoint and training continues up to train.epochs.
inline void cmd_train(const RunArgs& a, std::ostream& log) {
  detail::dispatch<detail::TrainFn>(detail::resolve_run(a), a, log);
}

inline void cmd_eval(const RunArgs& a, std::ostream& log) {
  detail::dispatch<detail::EvalFn>(detail::resolve_run(a), a, log);
}

inline void cmd_predict(const RunArgs& a, std::ostream& log) {
  detail::dispatch<detail::PredictFn>(detail::resolve_run(a), a, log);
}

inline int cmd_verify(const VerifyOptions& o, std::ostream& log) {
  const auto results = run_verify(o);
  bool ok = true;
  for (const auto& r : results) {
    log << std::left << std::setw(28) << r.name << (r.passed ? "PASS  " : "FAIL  ") << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitVerifyFailed;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::vector<std::size_t> radius_sizes{50000};
  std::vector<std::size_t> conv_planes{256, 512};
  std::size_t channels = 8, rank = 2, kernel = 3;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::size_t runs = 0;
  std::vector<RadiusBench> radius;
  std::size_t channels = 0, rank = 0, kernel = 0;
  std::vector<ConvBench> conv;
};

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json j;
  j["runs"] = r.runs;
  j["radius"] = nlohmann::json::array();
  for (const auto& b : r.radius)
    j["radius"].push_back({{"n", b.n},
                           {"radius", b.radius},
                           {"pairs", b.pairs},
                           {"hash_seconds", b.hash_seconds},
                           {"brute_seconds", b.brute_seconds},
                           {"speedup", b.speedup()}});
  j["conv"] = {{"channels", r.channels}, {"rank", r.rank}, {"kernel", r.kernel}, {"sizes", nlohmann::json::array()}};
  for (std::size_t i = 0; i < r.conv.size(); ++i) {
    const auto& c = r.conv[i];
    nlohmann::json e{{"plane", c.plane},
                     {"reparam_seconds", c.reparam_seconds},
                     {"naive_seconds", c.naive_seconds},
                     {"reparam_macs", c.reparam_macs},
                     {"naive_macs", c.naive_macs}};
    if (i > 0) e["time_ratio"] = c.reparam_seconds / r.conv[i - 1].reparam_seconds;
    j["conv"]["sizes"].push_back(e);
  }
  return j;
}

inline BenchReport bench_from_json(const nlohmann::json& j) {
  try {
    BenchReport r;
    r.runs = j.at("runs").get<std::size_t>();
    for (const auto& e : j.at("radius")) {
      RadiusBench b;
      b.n = e.at("n").get<std::size_t>();
      b.radius = e.at("radius").get<double>();
      b.pairs = e.at("pairs").get<std::uint64_t>();
      b.hash_seconds = e.at("hash_seconds").get<double>();
      b.brute_seconds = e.at("brute_seconds").get<double>();
      r.radius.push_back(b);
    }
    const auto& c = j.at("conv");
    r.channels = c.at("channels").get<std::size_t>();
    r.rank = c.at("rank").get<std::size_t>();
    r.kernel = c.at("kernel").get<std::size_t>();
    for (const auto& e : c.at("sizes")) {
      ConvBench b;
      b.plane = e.at("plane").get<std::size_t>();
      b.reparam_seconds = e.at("reparam_seconds").get<double>();
      b.naive_seconds = e.at("naive_seconds").get<double>();
      b.reparam_macs = e.at("reparam_macs").get<std::uint64_t>();
      b.naive_macs = e.at("naive_macs").get<std::uint64_t>();
      r.conv.push_back(b);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(detail::cat("bench report: ", e.what()));
  }
}

inline BenchReport run_bench(const BenchArgs& a) {
  if (a.runs == 0) throw Error("bench: runs must be at least 1");
  BenchReport r;
  r.runs = a.runs;
  r.channels = a.channels;
  r.rank = a.rank;
  r.kernel = a.kernel;
  for (std::size_t n : a.radius_sizes) r.radius.push_back(bench_radius(n, a.runs, a.seed));
  for (std::size_t p : a.conv_planes) r.conv.push_back(bench_conv(p, a.channels, a.rank, a.kernel, a.runs, a.seed));
  return r;
}

}  // namespace figconv
