#include "mz/optim.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "mz/checkpoint.hpp"

using mz::nn::adamw_step;
using mz::nn::clip_global_norm;
using mz::nn::cosine_schedule;
using mz::nn::GradMap;
using mz::nn::momentum_at;
using mz::nn::OptState;
using mz::nn::ParamStore;
using mz::nn::Tensor;

namespace {

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamStore p;
  p.set("w", Tensor::scalar(0.0));
  GradMap g{{"w", Tensor::scalar(1.0)}};
  OptState st;
  st.lr = 0.01;
  st.eps = 1e-12;
  st.weight_decay = 0.0;
  adamw_step(p, g, st);
  EXPECT_NEAR(p.at("w").item(), -0.01, 1e-10);
}

TEST(AdamW, ZeroGradLeavesParamUnchanged) {
  ParamStore p;
  p.set("w", Tensor::scalar(1.5));
  GradMap g{{"w", Tensor::scalar(0.0)}};
  OptState st;
  st.lr = 0.1;
  st.weight_decay = 0.0;
  adamw_step(p, g, st);
  EXPECT_DOUBLE_EQ(p.at("w").item(), 1.5);
}

TEST(AdamW, PureDecoupledDecay) {
  ParamStore p;
  p.set("w", Tensor::scalar(1.0));
  GradMap g{{"w", Tensor::scalar(0.0)}};
  OptState st;
  st.lr = 0.01;
  st.weight_decay = 0.1;
  adamw_step(p, g, st);
  EXPECT_DOUBLE_EQ(p.at("w").item(), 1.0 - 0.01 * 0.1 * 1.0);
}

TEST(AdamW, FrozenParamsSkipped) {
  ParamStore p;
  p.set("w", Tensor::scalar(1.0));
  p.set("frozen", Tensor::scalar(1.0));
  GradMap g{{"w", Tensor::scalar(1.0)}, {"frozen", Tensor::scalar(1.0)}};
  OptState st;
  st.lr = 0.1;
  std::set<std::string> frozen{"frozen"};
  adamw_step(p, g, st, &frozen);
  EXPECT_DOUBLE_EQ(p.at("frozen").item(), 1.0);
  EXPECT_NE(p.at("w").item(), 1.0);
}

TEST(AdamW, DeterministicTrajectories) {
  auto run = [] {
    ParamStore p;
    p.set("w", Tensor({2}, {0.3, -0.7}));
    OptState st;
    st.lr = 0.05;
    st.weight_decay = 0.02;
    for (int i = 0; i < 50; ++i) {
      GradMap g{{"w", Tensor({2}, {0.1 * i, -0.2})}};
      adamw_step(p, g, st);
    }
    return p.at("w").v;
  };
  EXPECT_EQ(run(), run());
}

TEST(Clip, BelowThresholdUnchanged) {
  GradMap g{{"w", Tensor({2}, {3.0, 4.0})}};
  clip_global_norm(g, 10.0);
  EXPECT_DOUBLE_EQ(g["w"].v[0], 3.0);
  EXPECT_DOUBLE_EQ(g["w"].v[1], 4.0);
}

TEST(Clip, ScalesToMaxNorm) {
  GradMap g{{"w", Tensor({2}, {3.0, 4.0})}};
  clip_global_norm(g, 1.0);
  EXPECT_NEAR(g["w"].v[0], 0.6, 1e-12);
  EXPECT_NEAR(g["w"].v[1], 0.8, 1e-12);
}

TEST(Clip, ZeroGradientsUnchanged) {
  GradMap g{{"w", Tensor::zeros({3})}};
  clip_global_norm(g, 0.5);
  for (double x : g["w"].v) EXPECT_EQ(x, 0.0);
}

TEST(Schedule, CosineEndpointsExact) {
  const double start = 0.0, peak = 5e-4, end = 2e-6;
  EXPECT_EQ(cosine_schedule(0, 100, 10, start, peak, end), start);
  EXPECT_EQ(cosine_schedule(10, 100, 10, start, peak, end), peak);
  EXPECT_EQ(cosine_schedule(100, 100, 10, start, peak, end), end);
  // Midpoint of the decay: s = 0.5 -> (peak+end)/2.
  EXPECT_NEAR(cosine_schedule(55, 100, 10, start, peak, end), (peak + end) / 2.0, 1e-18);
}

TEST(Schedule, MomentumEndpointsExact) {
  EXPECT_EQ(momentum_at(0, 100, 0.996, 1.0), 0.996);
  EXPECT_EQ(momentum_at(100, 100, 0.996, 1.0), 1.0);
  EXPECT_NEAR(momentum_at(50, 100, 0.996, 1.0), 0.998, 1e-15);
}

TEST(Schedule, LinearWarmup) {
  EXPECT_EQ(mz::nn::linear_warmup(0.0, 30.0, 0.04, 0.07), 0.04);
  EXPECT_EQ(mz::nn::linear_warmup(30.0, 30.0, 0.04, 0.07), 0.07);
  EXPECT_EQ(mz::nn::linear_warmup(55.0, 30.0, 0.04, 0.07), 0.07);
  EXPECT_NEAR(mz::nn::linear_warmup(15.0, 30.0, 0.04, 0.07), 0.055, 1e-15);
}

TEST(Checkpoint, RoundTripThroughF32) {
  mz::RngStream rng(31);
  std::map<std::string, Tensor> records;
  // Values generated at f32 precision survive the container bit-exactly.
  for (int i = 0; i < 5; ++i) {
    Tensor t = Tensor::zeros({2 + i, 3});
    for (auto& x : t.v) x = static_cast<double>(static_cast<float>(rng.normal()));
    records["slide/w" + std::to_string(i)] = t;
  }
  records["opt/t"] = Tensor::scalar(17.0);
  std::stringstream buf;
  mz::nn::write_checkpoint(buf, records);
  auto back = mz::nn::read_checkpoint(buf);
  ASSERT_EQ(back.size(), records.size());
  for (const auto& [name, t] : records) {
    ASSERT_TRUE(back.count(name)) << name;
    EXPECT_EQ(back[name].shape, t.shape);
    EXPECT_EQ(back[name].v, t.v) << name;
  }
}

TEST(Checkpoint, BadMagicRejected) {
  std::stringstream buf;
  buf << "NOPE";
  EXPECT_THROW(mz::nn::read_checkpoint(buf), mz::nn::CheckpointError);
}

TEST(Checkpoint, RecordsBundleOptimizerAndClocks) {
  ParamStore p;
  p.set("slide/w", Tensor::scalar(1.0));
  OptState st;
  GradMap g{{"slide/w", Tensor::scalar(0.5)}};
  st.lr = 0.1;
  adamw_step(p, g, st);
  auto records = mz::nn::checkpoint_records(p, &st, {{"step", 12.0}});
  EXPECT_TRUE(records.count("slide/w"));
  EXPECT_TRUE(records.count("opt/m/slide/w"));
  EXPECT_TRUE(records.count("opt/v/slide/w"));
  EXPECT_TRUE(records.count("opt/t"));
  EXPECT_TRUE(records.count("clk/step"));
  auto store = mz::nn::params_from_records(records);
  EXPECT_EQ(store.values.size(), 1u);
  EXPECT_TRUE(store.has("slide/w"));
}

}  // namespace
