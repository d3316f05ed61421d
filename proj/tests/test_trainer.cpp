#include <gtest/gtest.h>

#include <cmath>

#include "figconv/trainer.hpp"

using namespace figconv;

namespace {

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.num_levels = 1;
  cfg.kernel_size = 3;
  cfg.hidden_channels = {4, 8};
  cfg.num_down_blocks = {1};
  cfg.num_up_blocks = {1};
  cfg.resolution_memory_format_pairs = {{2, 12, 6}, {12, 2, 6}, {12, 6, 2}};
  cfg.mlp_hidden = 8;
  return cfg;
}

std::vector<SurfaceSample> samples(std::size_t n, std::uint64_t seed) {
  SyntheticOptions opt;
  opt.edge = 0.12;
  std::vector<SurfaceSample> out;
  for (auto& s : gen_synthetic(n, seed, opt)) out.push_back(s.sample);
  return out;
}

}  // namespace

TEST(JointLoss, Examples) {
  const std::vector<double> p{0.5, -1.0}, q{1.5, -2.0};
  EXPECT_EQ(joint_loss(0.2, 0.2, p, p), 0.0);
  EXPECT_NEAR(joint_loss(0.3, 0.1, p, p), 0.04, 1e-15);
  EXPECT_EQ(joint_loss(1.0, 1.0, p, q), 1.0);
  const std::vector<double> short_p{1.0};
  EXPECT_THROW(joint_loss(0, 0, p, short_p), Error);
}

TEST(JointLoss, GraphMatchesScalarAndIsNonNegative) {
  Rng rng(1);
  for (int it = 0; it < 20; ++it) {
    const std::size_t N = 1 + rng.below(10);
    auto pp = uniform_tensor<double>({N, 1}, 1, rng), pt = uniform_tensor<double>({N, 1}, 1, rng);
    const double dp = rng.uniform(-1, 1), dt = rng.uniform(-1, 1);
    Graph<double> g;
    const double v = joint_loss(g.constant(Tensor<double>({1}, std::vector<double>{dp})),
                                g.constant(Tensor<double>({1}, std::vector<double>{dt})), g.constant(pp), g.constant(pt))
                         .value()[0];
    EXPECT_NEAR(v, joint_loss(dp, dt, pp.data(), pt.data()), 1e-14);
    EXPECT_GT(v, 0.0);
  }
  Graph<double> g;
  EXPECT_THROW(joint_loss(g.constant(Tensor<double>({1})), g.constant(Tensor<double>({1})),
                          g.constant(Tensor<double>({3, 1})), g.constant(Tensor<double>({2, 1}))),
               Error);
}

TEST(JointLoss, GradientCheck) {
  Rng rng(2);
  for (int it = 0; it < 10; ++it) {
    const std::size_t N = 1 + rng.below(8);
    const double e = gradient_check<double>(
        [](Graph<double>&, std::vector<Var<double>>& v) { return joint_loss(v[0], v[1], v[2], v[3]); },
        {uniform_tensor<double>({1}, 1, rng), uniform_tensor<double>({1}, 1, rng), uniform_tensor<double>({N, 1}, 1, rng),
         uniform_tensor<double>({N, 1}, 1, rng)});
    EXPECT_LT(e, 1e-5);
  }
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  Tensor<double> w({3}, std::vector<double>{1, 2, 3});
  const Tensor<double> w0 = w;
  std::vector<ParamRef<double>> ps{{"w", &w}};
  AdamState<double> st;
  adam_step(ps, {Tensor<double>({3}, 1.0)}, st, 1e-3);
  const Tensor<double> m1 = st.m[0], v1 = st.v[0];
  const Tensor<double> w1 = w;
  adam_step(ps, {Tensor<double>({3})}, st, 1e-3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(st.m[0][i], 0.9 * m1[i]);
    EXPECT_DOUBLE_EQ(st.v[0][i], 0.999 * v1[i]);
  }
  // a fresh state with zero gradient moves nothing
  Tensor<double> u = w0;
  std::vector<ParamRef<double>> pu{{"u", &u}};
  AdamState<double> fresh;
  adam_step(pu, {Tensor<double>({3})}, fresh, 1e-3);
  EXPECT_EQ(u, w0);
  EXPECT_NE(w1, w0);
}

TEST(Adam, FirstStepClosedForm) {
  Tensor<double> w({1}, std::vector<double>{0.5});
  std::vector<ParamRef<double>> ps{{"w", &w}};
  AdamState<double> st;
  adam_step(ps, {Tensor<double>({1}, 1.0)}, st, 1e-3);
  // mhat = 1, vhat = 1: step = lr / (1 + eps)
  EXPECT_NEAR(w[0], 0.5 - 1e-3 / (1 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, IdenticalTensorsGetIdenticalUpdates) {
  Rng rng(3);
  auto a = uniform_tensor<double>({4, 3}, 1, rng);
  auto b = a;
  const auto g = uniform_tensor<double>({4, 3}, 1, rng);
  std::vector<ParamRef<double>> ps{{"a", &a}, {"b", &b}};
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(ps, {g, g}, st, 1e-2);
  EXPECT_EQ(a, b);
}

TEST(Adam, NonFiniteGradientFailsBeforeUpdating) {
  Tensor<double> a({2}, 1.0), b({2}, 1.0);
  std::vector<ParamRef<double>> ps{{"a", &a}, {"b", &b}};
  AdamState<double> st;
  Tensor<double> bad({2});
  bad[1] = std::nan("");
  try {
    adam_step(ps, {Tensor<double>({2}, 1.0), bad}, st, 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a, Tensor<double>({2}, 1.0));
  EXPECT_THROW(adam_step(ps, {Tensor<double>({3}), Tensor<double>({2})}, st, 1e-3), Error);
}

TEST(Schedule, StepDecay) {
  TrainConfig c;
  EXPECT_EQ(lr_at(0, c), 1e-3);
  EXPECT_NEAR(lr_at(24, c), 1e-3, 1e-18);
  EXPECT_NEAR(lr_at(25, c), 1e-4, 1e-18);
  EXPECT_NEAR(lr_at(50, c), 1e-5, 1e-18);
  EXPECT_NEAR(lr_at(99, c), 1e-6, 1e-18);
  c.gamma = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.batch = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.lr = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.precision = "float16";
  EXPECT_THROW(c.validate(), Error);
}

TEST(Metrics, PerfectPrediction) {
  const std::vector<double> y{1, 2, 4};
  const auto s = error_stats(y, y);
  EXPECT_EQ(s.mse, 0);
  EXPECT_EQ(s.mae, 0);
  EXPECT_EQ(s.max_ae, 0);
  ASSERT_TRUE(s.r2);
  EXPECT_EQ(*s.r2, 1.0);
}

TEST(Metrics, MeanPredictorHasZeroR2) {
  const std::vector<double> y{1, 2, 6}, mean(3, 3.0);
  const auto s = error_stats(mean, y);
  ASSERT_TRUE(s.r2);
  EXPECT_EQ(*s.r2, 0.0);
}

TEST(Metrics, HandCase) {
  const std::vector<double> pred{1.0, 2.5, -1.0}, truth{1.5, 2.0, 1.0};
  const auto s = error_stats(pred, truth);
  EXPECT_EQ(s.max_ae, 2.0);
  EXPECT_EQ(s.mae, 1.0);
  EXPECT_EQ(s.mse, 1.5);
  EXPECT_GE(s.max_ae, s.mae);
  EXPECT_LE(*s.r2, 1.0);
}

TEST(Metrics, SingleSampleR2Undefined) {
  const std::vector<double> p{0.3}, t{0.4};
  const auto s = error_stats(p, t);
  EXPECT_FALSE(s.r2.has_value());
  EXPECT_EQ(stats_json(s)["r2"], "undefined");
  EXPECT_THROW(error_stats(std::vector<double>{}, std::vector<double>{}), Error);
}

TEST(Training, SmallStepDecreasesSampleLoss) {
  auto model = build_model<double>(tiny());
  const auto items = make_items(model, samples(1, 1));
  auto params = model.parameters();
  std::vector<Tensor<double>> grads;
  const std::vector<std::size_t> batch{0};
  const double before = batch_gradients(model, items, batch, params, grads);
  AdamState<double> st;
  adam_step(params, grads, st, 1e-5);
  std::vector<Tensor<double>> unused;
  const double after = batch_gradients(model, items, batch, params, unused);
  EXPECT_LT(after, before);
}

TEST(Training, EvaluateIsOrderInvariant) {
  auto model = build_model<double>(tiny());
  auto items = make_items(model, samples(5, 2));
  const auto a = evaluate(model, items);
  std::reverse(items.begin(), items.end());
  std::swap(items[1], items[3]);
  const auto b = evaluate(model, items);
  for (auto [x, y] : {std::pair{a.drag, b.drag}, std::pair{a.pressure, b.pressure}}) {
    EXPECT_NEAR(x.mse, y.mse, 1e-12 * x.mse);
    EXPECT_NEAR(x.mae, y.mae, 1e-12 * x.mae);
    EXPECT_EQ(x.max_ae, y.max_ae);
    EXPECT_NEAR(*x.r2, *y.r2, 1e-12);
  }
}

TEST(Training, DeterministicReportAndScheduleLogged) {
  TrainConfig tc;
  tc.epochs = 4;
  tc.step = 2;
  tc.batch = 3;
  tc.seed = 9;
  auto data = samples(5, 3);
  auto run = [&] {
    auto model = build_model<float>(tiny());
    const auto items = make_items(model, data);
    const std::vector<TrainItem<float>> val(items.begin(), items.begin() + 2);
    std::string log;
    TrainHooks hooks;
    hooks.on_log = [&](const EpochRecord& r) { log += epoch_log_line(r); };
    const auto rep = train(model, items, val, tc, hooks);
    std::vector<Tensor<float>> ps;
    for (auto& p : model.parameters()) ps.push_back(*p.tensor);
    return std::tuple{rep, log, ps};
  };
  const auto [r1, l1, p1] = run();
  const auto [r2, l2, p2] = run();
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(final_report(r1), final_report(r2));
  EXPECT_EQ(p1, p2);
  ASSERT_EQ(r1.epochs.size(), 4u);
  for (const auto& e : r1.epochs) {
    EXPECT_EQ(e.lr, lr_at(e.epoch, tc));
    EXPECT_TRUE(e.val.has_value());
    EXPECT_GE(e.train_loss, 0);
  }
  EXPECT_LT(r1.epochs.back().train_loss, r1.epochs.front().train_loss);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch = 2;
  auto data = samples(3, 4);
  auto full = build_model<float>(tiny());
  const auto items = make_items(full, data);
  train(full, items, {}, tc);

  auto part = build_model<float>(tiny());
  TrainState<float> st;
  tc.epochs = 2;
  train(part, items, {}, tc, st);
  auto saved = checkpoint_tensors(part, &st);
  auto resumed = build_model<float>(tiny());
  TrainState<float> st2;
  restore_checkpoint(resumed, saved, &st2);
  EXPECT_EQ(st2.epoch, 2u);
  tc.epochs = 4;
  const auto rep = train(resumed, items, {}, tc, st2);
  EXPECT_EQ(rep.epochs.front().epoch, 2u);
  auto a = full.parameters(), b = resumed.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].tensor, *b[i].tensor) << a[i].name;
}

TEST(Training, NonFiniteLossNamesBatch) {
  auto model = build_model<float>(tiny());
  auto items = make_items(model, samples(3, 5));
  items[2].pressure[0] = std::nanf("");
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 1;
  try {
    train(model, items, {}, tc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Report, Schema) {
  TrainReport r;
  r.train.drag = error_stats(std::vector<double>{1, 2}, std::vector<double>{1, 3});
  r.train.pressure = r.train.drag;
  r.val = r.train;
  r.val->drag.r2.reset();
  const auto j = nlohmann::json::parse(final_report(r));
  ASSERT_TRUE(j.is_array());
  ASSERT_EQ(j.size(), 16u);
  std::set<std::string> names;
  for (const auto& e : j) {
    EXPECT_EQ(e.size(), 3u);
    EXPECT_TRUE(e.contains("metric") && e.contains("split") && e.contains("value"));
    names.insert(e["metric"].get<std::string>() + "/" + e["split"].get<std::string>());
  }
  EXPECT_EQ(names.size(), 16u);
  EXPECT_TRUE(names.count("drag_r2/val"));
  for (const auto& e : j)
    if (e["metric"] == "drag_r2" && e["split"] == "val") EXPECT_EQ(e["value"], "undefined");
  EpochRecord rec;
  rec.epoch = 3;
  rec.lr = 1e-4;
  const std::string line = epoch_log_line(rec);
  EXPECT_EQ(line.back(), '\n');
  EXPECT_EQ(std::count(line.begin(), line.end(), '\n'), 1);
  EXPECT_EQ(nlohmann::json::parse(line)["epoch"], 3);
}
