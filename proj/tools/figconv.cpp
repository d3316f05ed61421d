// figconv command-line driver: gen, train, eval, predict, verify, bench.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "figconv/cli.hpp"

namespace fc = figconv;

int main(int argc, char** argv) {
  CLI::App app{"FIG convolution surrogate: data generation, training and self-checks"};
  app.require_subcommand(1);

  fc::GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
  g->add_option("--count", gen.count, "number of samples")->required();
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--edge", gen.options.edge, "target triangle edge length");

  fc::RunArgs run;
  std::uint64_t seed = 0;
  std::string out, ckpt, data;
  auto add_run_flags = [&](CLI::App* c) {
    c->add_option("--config", run.config, "YAML run config")->required();
    c->add_option("--seed", seed, "overrides the config seed");
    c->add_option("--out", out, "output directory (overrides the config)");
    c->add_option("--checkpoint", ckpt, "checkpoint path (default <out>/checkpoint.bin)");
  };
  auto* t = app.add_subcommand("train", "train a model");
  add_run_flags(t);
  t->add_flag("--resume", run.resume, "continue from the checkpoint");
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  add_run_flags(e);
  e->add_option("--data", data, "dataset directory (default: the config's validation set)");
  auto* p = app.add_subcommand("predict", "predict drag and pressure for one mesh");
  add_run_flags(p);
  p->add_option("--mesh", data, "OBJ mesh")->required();

  fc::VerifyOptions vo;
  auto* v = app.add_subcommand("verify", "run the oracle self-checks");
  v->add_option("--seed", vo.seed, "random seed");
  v->add_option("--instances", vo.instances, "random instances per check");
  v->add_flag("--perturb-hankel", vo.perturb_hankel, "perturb one expanded kernel entry (sensitivity check)");

  fc::BenchArgs ba;
  std::string bench_out;
  auto* b = app.add_subcommand("bench", "timing benchmarks, JSON output");
  b->add_option("--radius-sizes", ba.radius_sizes, "point/query counts for the radius benchmark");
  b->add_option("--conv-planes", ba.conv_planes, "plane extents for the conv benchmark");
  b->add_option("--channels", ba.channels);
  b->add_option("--rank", ba.rank);
  b->add_option("--kernel", ba.kernel);
  b->add_option("--runs", ba.runs, "repetitions per timing (median reported)");
  b->add_option("--seed", ba.seed);
  b->add_option("--out", bench_out, "write the JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? fc::kExitOk : fc::kExitUsage;
  }

  for (auto* c : {t, e, p}) {
    if (!c->parsed()) continue;
    if (c->count("--seed")) run.seed = seed;
    if (!out.empty()) run.out = out;
    if (!ckpt.empty()) run.checkpoint = ckpt;
    if (!data.empty()) run.data = data;
  }

  try {
    if (g->parsed()) fc::cmd_gen(gen, std::cerr);
    else if (t->parsed()) fc::cmd_train(run, std::cerr);
    else if (e->parsed()) fc::cmd_eval(run, std::cout);
    else if (p->parsed()) fc::cmd_predict(run, std::cout);
    else if (v->parsed()) return fc::cmd_verify(vo, std::cout);
    else if (b->parsed()) {
      const std::string text = fc::to_json(fc::run_bench(ba)).dump(2) + "\n";
      if (bench_out.empty()) std::cout << text;
      else fc::detail::write_text(bench_out, text);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return fc::kExitUsage;
  }
  return fc::kExitOk;
}
