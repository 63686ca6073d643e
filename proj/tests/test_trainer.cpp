// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace lego;
using namespace lego::testing;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lego_trainer_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

ListDataset random_dataset(const StackConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> s;
  for (std::size_t i = 0; i < n; ++i) {
    Image img = random_tensor<float>({std::size_t(c.height), std::size_t(c.width), std::size_t(c.channels)}, rng, 0.5);
    s.push_back({std::move(img), int(i % std::size_t(c.num_classes))});
  }
  return ListDataset(std::move(s), c.num_classes);
}

TrainConfig small_train(int steps, int batch = 4) {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = batch;
  tc.total_images = steps * batch;
  tc.ema_decay = 0.9;
  tc.weight_decay = 0.01;
  tc.seed = 5;
  return tc;
}

std::vector<double> losses(const std::vector<StepRecord>& trace) {
  std::vector<double> out;
  for (const auto& r : trace) out.push_back(r.loss);
  return out;
}

}  // namespace

TEST(LearningRate, DdpmIsConstant) {
  TrainConfig tc;
  for (long long seen : {0LL, 1LL, 5000LL, 10000000LL}) EXPECT_EQ(lr_at(seen, tc, Parameterization::ddpm), 1e-4);
}

TEST(LearningRate, EdmWarmsUpLinearly) {
  TrainConfig tc;
  EXPECT_EQ(lr_at(0, tc, Parameterization::edm), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5000, tc, Parameterization::edm), 5e-5);
  EXPECT_EQ(lr_at(10000, tc, Parameterization::edm), 1e-4);
  EXPECT_EQ(lr_at(20000, tc, Parameterization::edm), 1e-4);
  EXPECT_THROW(lr_at(-1, tc, Parameterization::edm), ParameterError);
}

TEST(TrainConfigTest, DefaultsAndValidation) {
  TrainConfig tc;
  EXPECT_EQ(tc.lr, 1e-4);
  EXPECT_EQ(tc.batch_size, 64);
  EXPECT_EQ(tc.ema_decay, 0.9999);
  EXPECT_EQ(tc.beta1, 0.9);
  EXPECT_EQ(tc.beta2, 0.999);
  EXPECT_EQ(tc.weight_decay, 0.0);
  auto bad = tc;
  bad.lr = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tc;
  bad.ema_decay = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tc;
  bad.total_images = 63;
  EXPECT_THROW(bad.validate(), ConfigError);
  nlohmann::json j = small_train(3);
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  j["momentum"] = 0.9;
  EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
}

TEST(Ema, Examples) {
  Tensor<float> s({2, 3}, 0.0f), p({2, 3}, 1.0f);
  const std::vector<Named<float>> shadow{{"w", &s}}, params{{"w", &p}};
  ema_update(shadow, params, 1.0);
  for (float v : s.values()) EXPECT_EQ(v, 0.0f);
  ema_update(shadow, params, 0.5);
  ema_update(shadow, params, 0.5);
  for (float v : s.values()) EXPECT_EQ(v, 0.75f);
  ema_update(shadow, params, 0.0);
  EXPECT_EQ(s, p);
}

TEST(Ema, GeometricConvergenceToFrozenParams) {
  Rng rng(1);
  auto s = random_tensor<double>({50}, rng), p = random_tensor<double>({50}, rng);
  const auto s0 = s;
  const std::vector<Named<double>> shadow{{"w", &s}}, params{{"w", &p}};
  const double decay = 0.97;
  for (int k = 1; k <= 200; ++k) {
    ema_update(shadow, params, decay);
    if (k % 50 != 0) continue;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double want = std::pow(decay, k) * (s0[i] - p[i]);
      EXPECT_NEAR(s[i] - p[i], want, 1e-12 + 1e-9 * std::abs(want)) << "k=" << k;
    }
  }
}

TEST(Ema, MismatchIsStructural) {
  Tensor<float> a({2}), b({3}), c({2});
  EXPECT_THROW(ema_update<float>({{"w", &a}}, {{"w", &b}}, 0.5), StructuralError);
  EXPECT_THROW(ema_update<float>({{"w", &a}}, {{"v", &c}}, 0.5), StructuralError);
  EXPECT_THROW(ema_update<float>({{"w", &a}}, {}, 0.5), StructuralError);
}

TEST(Trainer, StepZeroLossIsMeanSquaredSignal) {
  const auto c = tiny_config();
  const auto ds = random_dataset(c, 4, 2);
  Trainer tr(c, small_train(1), make_linear_schedule());
  const auto rec = tr.train_step(ds);
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Sample s = ds.at(i);
    for (float v : s.image.values()) {
      sq += double(v) * v;
      ++n;
    }
  }
  EXPECT_NEAR(rec.loss, sq / double(n), 1e-5 * sq / double(n));
  EXPECT_EQ(rec.step, 1);
  EXPECT_EQ(rec.images_seen, 4);
  EXPECT_EQ(rec.per_brick.size(), 3u);
}

TEST(Trainer, SeededRunsProduceIdenticalTraces) {
  const auto c = tiny_config();
  const auto ds = random_dataset(c, 6, 3);
  Trainer a(c, small_train(10), make_linear_schedule()), b(c, small_train(10), make_linear_schedule());
  const auto ta = losses(a.train(ds)), tb = losses(b.train(ds));
  ASSERT_EQ(ta.size(), 10u);
  EXPECT_EQ(ta, tb);
  auto other = small_train(10);
  other.seed = 6;
  Trainer d(c, other, make_linear_schedule());
  EXPECT_NE(losses(d.train(ds)), ta);
}

TEST(Trainer, MetricsStreamHasFixedKeys) {
  const auto c = tiny_config();
  const auto ds = random_dataset(c, 4, 4);
  auto tc = small_train(5);
  tc.log_every = 2;
  Trainer tr(c, tc, make_linear_schedule());
  std::ostringstream metrics;
  tr.train(ds, &metrics);
  std::istringstream lines(metrics.str());
  std::vector<long long> steps;
  for (std::string line; std::getline(lines, line);) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "images_seen", "loss", "per_brick", "lr", "wall_clock_s", "train_flops"})
      EXPECT_TRUE(j.contains(k)) << k;
    steps.push_back(j["step"].get<long long>());
  }
  EXPECT_EQ(steps, (std::vector<long long>{2, 4, 5}));
}

TEST(Trainer, DatasetMismatchIsIngestError) {
  const auto c = tiny_config();
  auto other = c;
  other.height = other.width = 16;
  other.bricks.back().r = 16;
  other.validate();
  Trainer tr(c, small_train(1), make_linear_schedule());
  EXPECT_THROW(tr.train(random_dataset(other, 2, 1)), IngestError);
  auto classes = c;
  classes.num_classes = 5;
  EXPECT_THROW(tr.train(random_dataset(classes, 2, 1)), IngestError);
}

TEST(Trainer, NanLossWritesDiagnosticCheckpoint) {
  const auto c = tiny_config();
  auto s = random_dataset(c, 1, 1).at(0);
  s.image[3] = std::nanf("");
  const ListDataset ds({s}, c.num_classes);
  const auto dir = scratch("nan");
  Trainer tr(c, small_train(2, 1), make_linear_schedule());
  tr.set_diagnostic_path((dir / "diag.ckpt").string());
  EXPECT_THROW(tr.train(ds), NumericError);
  const auto diag = load_checkpoint((dir / "diag.ckpt").string());
  EXPECT_EQ(diag.step, 0);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto c = tiny_config();
  const auto ds = random_dataset(c, 4, 7);
  Trainer tr(c, small_train(3), make_linear_schedule());
  tr.train(ds);
  const auto dir = scratch("bytes");
  const auto p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  save_checkpoint(p1, tr.checkpoint());
  save_checkpoint(p2, load_checkpoint(p1));
  const auto bytes = read_bytes(p1);
  EXPECT_FALSE(bytes.empty());
  EXPECT_EQ(bytes, read_bytes(p2));
  EXPECT_FALSE(std::filesystem::exists(p1 + ".tmp"));

  const auto ck = load_checkpoint(p1);
  std::size_t model = 0;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("model.", 0) == 0) model += t.size();
  EXPECT_EQ(model, param_count(c).total);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const auto c = tiny_config();
  Trainer tr(c, small_train(1), make_linear_schedule());
  const auto dir = scratch("corrupt");
  const auto p = (dir / "a.ckpt").string();
  save_checkpoint(p, tr.checkpoint());
  const auto bytes = read_bytes(p);
  auto write = [&](const std::string& b) {
    std::ofstream(p, std::ios::binary | std::ios::trunc) << b;
  };
  write("NOTACKPT" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(p), FormatError);
  write(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(load_checkpoint(p), FormatError);
  write(bytes.substr(0, 40));
  EXPECT_THROW(load_checkpoint(p), FormatError);
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ConfigHashMismatchNeedsForce) {
  const auto c = tiny_config();
  Trainer tr(c, small_train(1), make_linear_schedule());
  auto ck = tr.checkpoint();
  ck.config_hash = "0000";
  Trainer other(c, small_train(1), make_linear_schedule());
  EXPECT_THROW(other.restore(ck), StructuralError);
  EXPECT_NO_THROW(other.restore(ck, true));
  EXPECT_THROW(state_from_checkpoint(ck, c), StructuralError);
  EXPECT_NO_THROW(state_from_checkpoint(ck, c, true, true));
}

TEST(Checkpoint, ResumeReproducesUnbrokenTrace) {
  auto c = tiny_config();
  c.patch_fraction = 0.5;
  const auto ds = random_dataset(c, 5, 8);
  for (auto param : {Parameterization::ddpm, Parameterization::edm}) {
    c.parameterization = param;
    auto tc = small_train(20);
    tc.warmup_images = 40;
    Trainer full(c, tc, make_linear_schedule());
    const auto whole = losses(full.train(ds));

    const auto dir = scratch("resume");
    const auto p = (dir / "half.ckpt").string();
    auto half_tc = tc;
    half_tc.total_images = 10 * tc.batch_size;
    Trainer first(c, half_tc, make_linear_schedule());
    auto trace = losses(first.train(ds, nullptr, p));
    Trainer second(c, tc, make_linear_schedule());
    second.restore(load_checkpoint(p));
    EXPECT_EQ(second.step(), 10);
    const auto rest = losses(second.train(ds));
    ASSERT_EQ(rest.size(), 10u);
    trace.insert(trace.end(), rest.begin(), rest.end());
    EXPECT_EQ(trace, whole);
    EXPECT_EQ(second.state().params.named().front().tensor->storage(),
              full.state().params.named().front().tensor->storage());
    EXPECT_EQ(nlohmann::json(second.checkpoint().tensors.back().second.shape()),
              nlohmann::json(full.checkpoint().tensors.back().second.shape()));
    std::filesystem::remove_all(dir);
  }
}

TEST(Trainer, EmaStateSamplesFromCheckpoint) {
  const auto c = tiny_config();
  const auto ds = random_dataset(c, 4, 9);
  Trainer tr(c, small_train(4), make_linear_schedule());
  tr.train(ds);
  const auto ck = tr.checkpoint();
  const auto ema = state_from_checkpoint(ck, c);
  const auto raw = state_from_checkpoint(ck, c, false);
  EXPECT_EQ(ema.params.named().back().tensor->storage(), tr.ema().named().back().tensor->storage());
  EXPECT_EQ(raw.params.named().back().tensor->storage(), tr.state().params.named().back().tensor->storage());
}

// Two fixed images, the LEGO-S-mini desk config, 2000 steps. "Final" is the
// mean of the last 100 step losses (each step draws fresh t and noise).
TEST(Trainer, TwoImageOverfit) {
  const auto rc = shipped("lego_s_mini_pg");
  auto blobs = make_synthetic_blobs(rc.dataset);
  Sample a = blobs->at(0), b = blobs->at(1);
  ASSERT_NE(a.label, b.label);
  const ListDataset ds({a, b}, rc.stack.num_classes);
  auto tc = rc.train;
  tc.total_images = 2000LL * tc.batch_size;
  Trainer tr(rc.stack, tc, make_linear_schedule(rc.schedule.T, rc.schedule.beta_start, rc.schedule.beta_end));
  const auto trace = losses(tr.train(ds));
  ASSERT_EQ(trace.size(), 2000u);
  double tail = 0.0;
  for (std::size_t i = trace.size() - 100; i < trace.size(); ++i) tail += trace[i] / 100.0;
  EXPECT_LT(tail, 0.10 * trace.front()) << "initial " << trace.front() << ", final " << tail;
}
