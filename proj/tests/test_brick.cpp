// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

using namespace lego;
using namespace lego::testing;

namespace {

template <typename T>
std::vector<Named<T>> named(BrickParams<T>& p) {
  std::vector<Named<T>> out;
  p.collect(out, "brick.");
  return out;
}

template <typename T>
std::vector<Named<T>> named(CondParams<T>& p) {
  std::vector<Named<T>> out;
  p.collect(out, "cond.");
  return out;
}

template <typename T>
BrickBatch<T> random_batch(const BrickSpec& s, std::size_t C, std::size_t P, std::size_t B, Rng& rng) {
  BrickBatch<T> batch;
  batch.count = P;
  batch.input = random_tensor<T>({P * std::size_t(s.r * s.r) * (2 * C + 2)}, rng).storage();
  for (std::size_t n = 0; n < P; ++n) batch.cond_row.push_back(n % B);
  return batch;
}

template <typename T>
Tensor<T> patch_coords(std::size_t r) {
  const auto g = coord_grid(r, r).values;
  Tensor<T> out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = T(g[i]);
  return out;
}

}  // namespace

TEST(Tokenize, TokenCounts) {
  EXPECT_EQ(spec(16, 8, 8, 1, 2, BrickKind::patch).tokens(), 4);
  EXPECT_EQ(spec(8, 8, 8, 1, 2, BrickKind::patch).tokens(), 1);
  EXPECT_EQ(spec(64, 2, 8, 1, 2, BrickKind::image).tokens(), 1024);

  Rng rng(1);
  for (auto [r, l] : {std::pair{16, 8}, std::pair{8, 8}, std::pair{64, 2}}) {
    const auto s = spec(r, l, 8, 1, 2, BrickKind::patch);
    const auto p = BrickParams<float>::initialized(s, 3, rng);
    const auto tokens = tokenize(random_tensor<float>({std::size_t(r), std::size_t(r), 8}, rng), s, p);
    EXPECT_EQ(tokens.shape(), (Shape{std::size_t(s.tokens()), 8}));
  }
}

TEST(Tokenize, ChannelMismatch) {
  Rng rng(2);
  const auto s = spec(4, 2, 8, 1, 2, BrickKind::patch);
  const auto p = BrickParams<float>::initialized(s, 3, rng);
  EXPECT_THROW(tokenize(random_tensor<float>({4, 4, 7}, rng), s, p), ShapeError);
}

TEST(Tokenize, FieldFlatteningMatchesBruteForce) {
  Rng rng(3);
  const auto s = spec(4, 2, 4, 0, 1, BrickKind::patch);
  auto p = BrickParams<double>::initialized(s, 1, rng);
  randomize(named(p), rng, 0.5);
  const auto patch = random_tensor<double>({4, 4, 4}, rng);
  const auto tokens = tokenize(patch, s, p);
  // token n = field (n / 2, n % 2); features ordered (y, x, c) within the field
  for (std::size_t n = 0; n < 4; ++n) {
    const std::size_t fy = n / 2, fx = n % 2;
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = p.embed_b[o] + p.pos(n, o);
      std::size_t f = 0;
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x)
          for (std::size_t c = 0; c < 4; ++c) acc += p.embed_w(o, f++) * patch(fy * 2 + y, fx * 2 + x, c);
      EXPECT_NEAR(tokens(n, o), acc, 1e-12);
    }
  }
}

TEST(BrickInit, GatesAndDecoderAreZero) {
  Rng rng(4);
  const auto s = spec(8, 2, 16, 3, 4, BrickKind::patch);
  const auto p = BrickParams<float>::initialized(s, 3, rng);
  auto all_zero = [](const float* v, std::size_t n) { return std::all_of(v, v + n, [](float x) { return x == 0.0f; }); };
  const std::size_t d = 16;
  for (const auto& b : p.blocks) {
    for (std::size_t gate : {2, 5}) {
      EXPECT_TRUE(all_zero(b.ada_w.data() + gate * d * d, d * d));
      EXPECT_TRUE(all_zero(b.ada_b.data() + gate * d, d));
    }
  }
  EXPECT_TRUE(all_zero(p.out_w.data(), p.out_w.size()));
  EXPECT_TRUE(all_zero(p.out_b.data(), p.out_b.size()));
}

TEST(BrickInit, BlocksAreIdentityAndOutputIsZero) {
  Rng rng(5);
  const auto s = spec(8, 2, 16, 3, 4, BrickKind::patch);
  const auto p = BrickParams<double>::initialized(s, 3, rng);
  const auto batch = random_batch<double>(s, 3, 3, 2, rng);
  const auto cond = random_tensor<double>({2, 16}, rng);
  BrickCache<double> cache;
  Buffer<double> out;
  brick_forward_batch(s, p, batch, cond, cache, out);
  for (double v : out) ASSERT_EQ(v, 0.0);
  ASSERT_EQ(cache.blocks.size(), 3u);
  for (std::size_t b = 1; b < 3; ++b) EXPECT_EQ(cache.blocks[b].x_in, cache.blocks[0].x_in);
  EXPECT_EQ(cache.x_final, cache.blocks[0].x_in);
  // block 0 input is the tokenized sequence
  std::vector<double> patch0(batch.input.begin(), batch.input.begin() + 8 * 8 * 8);
  const auto tokens = tokenize(Tensor<double>({8, 8, 8}, patch0), s, p);
  for (std::size_t i = 0; i < tokens.size(); ++i) EXPECT_NEAR(cache.blocks[0].x_in[i], tokens[i], 1e-12);
}

TEST(BrickForward, ShapeFuzz) {
  Rng rng(6);
  for (int trial = 0; trial < 25; ++trial) {
    const int r = uniform_int(rng, 4, 64);
    std::vector<int> divisors;
    for (int l = 1; l <= r; ++l)
      if (r % l == 0 && (r / l) * (r / l) <= 256) divisors.push_back(l);
    const int l = divisors[std::size_t(uniform_int(rng, 0, int(divisors.size()) - 1))];
    const std::size_t C = std::size_t(uniform_int(rng, 1, 4));
    const auto s = spec(r, l, 8, 1, 2, BrickKind::patch);
    auto p = BrickParams<float>::initialized(s, C, rng);
    randomize(named(p), rng, 0.1);
    const std::size_t R = std::size_t(r);
    const auto out = brick_forward(random_tensor<float>({R, R, C}, rng), random_tensor<float>({R, R, C}, rng),
                                   patch_coords<float>(R), random_tensor<float>({8}, rng), s, p);
    ASSERT_EQ(out.shape(), (Shape{R, R, C})) << "r=" << r << " l=" << l;
  }
}

TEST(BrickForward, EmptyPrevEncodesAsZeros) {
  Rng rng(7);
  const auto s = spec(4, 2, 8, 1, 2, BrickKind::patch);
  auto p = BrickParams<double>::initialized(s, 2, rng);
  randomize(named(p), rng, 0.3);
  const auto xt = random_tensor<double>({4, 4, 2}, rng), cond = random_tensor<double>({8}, rng);
  EXPECT_EQ(brick_forward(xt, Tensor<double>(), patch_coords<double>(4), cond, s, p),
            brick_forward(xt, Tensor<double>({4, 4, 2}), patch_coords<double>(4), cond, s, p));
  EXPECT_THROW(brick_forward(random_tensor<double>({8, 8, 2}, rng), Tensor<double>(), patch_coords<double>(8), cond,
                             s, p),
               ShapeError);
}

TEST(BrickForward, ParamShapeMismatchNamesTensor) {
  Rng rng(8);
  const auto s = spec(4, 2, 8, 2, 2, BrickKind::patch);
  auto p = BrickParams<float>::initialized(spec(4, 2, 8, 1, 2, BrickKind::patch), 2, rng);
  try {
    brick_forward(random_tensor<float>({4, 4, 2}, rng), Tensor<float>(), patch_coords<float>(4),
                  random_tensor<float>({8}, rng), s, p);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks"), std::string::npos);
  }
}

TEST(BrickForward, PatchIndependence) {
  Rng rng(9);
  const auto s = spec(4, 2, 8, 2, 2, BrickKind::patch);
  auto p = BrickParams<double>::initialized(s, 2, rng);
  randomize(named(p), rng, 0.3);
  auto batch = random_batch<double>(s, 2, 4, 1, rng);
  const auto cond = random_tensor<double>({1, 8}, rng);
  BrickCache<double> cache;
  Buffer<double> before, after;
  brick_forward_batch(s, p, batch, cond, cache, before);
  const std::size_t in_stride = 16 * 6, out_stride = 16 * 2;
  for (std::size_t i = in_stride; i < 2 * in_stride; ++i) batch.input[i] += 0.5;  // perturb patch 1 only
  brick_forward_batch(s, p, batch, cond, cache, after);
  for (std::size_t n : {0u, 2u, 3u})
    for (std::size_t i = 0; i < out_stride; ++i) ASSERT_EQ(before[n * out_stride + i], after[n * out_stride + i]);
  bool changed = false;
  for (std::size_t i = out_stride; i < 2 * out_stride; ++i) changed |= before[i] != after[i];
  EXPECT_TRUE(changed);
}

TEST(BrickForward, Deterministic) {
  Rng a(10), b(10);
  const auto s = spec(8, 2, 16, 2, 4, BrickKind::patch);
  auto pa = BrickParams<float>::initialized(s, 3, a);
  auto pb = BrickParams<float>::initialized(s, 3, b);
  randomize(named(pa), a, 0.2);
  randomize(named(pb), b, 0.2);
  const auto ba = random_batch<float>(s, 3, 5, 2, a), bb = random_batch<float>(s, 3, 5, 2, b);
  const auto ca = random_tensor<float>({2, 16}, a), cb = random_tensor<float>({2, 16}, b);
  BrickCache<float> cache;
  Buffer<float> oa, ob;
  brick_forward_batch(s, pa, ba, ca, cache, oa);
  brick_forward_batch(s, pb, bb, cb, cache, ob);
  EXPECT_EQ(oa, ob);
}

TEST(BrickGradient, MatchesFiniteDifferencesForEveryParameter) {
  // r=4, l=2, d=8, depth=1, heads=2, two image channels, embedder included.
  Rng rng(11);
  const auto s = spec(4, 2, 8, 1, 2, BrickKind::patch);
  const std::size_t C = 2, P = 3, F = 16, nc = 3;
  auto p = BrickParams<double>::initialized(s, C, rng);
  auto cp = CondParams<double>::initialized(8, F, nc, rng);
  randomize(named(p), rng, 0.4);
  randomize(named(cp), rng, 0.4);
  auto batch = random_batch<double>(s, C, P, 2, rng);
  const std::vector<Condition> conds = {{0.37, 1}, {-0.8, -1}};
  const auto weights = random_tensor<double>({P * 16 * C}, rng);

  auto loss = [&] {
    CondCache<double> cc;
    BrickCache<double> bc;
    Buffer<double> out;
    brick_forward_batch(s, p, batch, cond_forward(cp, conds, cc), bc, out);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += weights[i] * out[i];
    return acc;
  };

  auto g = BrickParams<double>::zeros(s, C);
  auto gc = CondParams<double>::zeros(8, F, nc);
  Buffer<double> dinput;
  {
    CondCache<double> cc;
    BrickCache<double> bc;
    Buffer<double> out;
    const auto cond = cond_forward(cp, conds, cc);
    brick_forward_batch(s, p, batch, cond, bc, out);
    Tensor<double> dcond({2, 8});
    brick_backward_batch(s, p, batch, cond, bc, weights.storage(), g, &dinput, dcond);
    cond_backward(cp, cc, dcond, gc);
  }

  auto params = named(p), grads = named(g);
  for (auto& n : named(cp)) params.push_back(n);
  for (auto& n : named(gc)) grads.push_back(n);
  const auto r = gradient_check_all(params, grads, loss);
  EXPECT_LE(r.worst, 1e-5) << "worst at " << r.worst_name << " over " << r.checked;
  EXPECT_GT(r.checked, 1500u);

  double worst_in = 0.0;
  for (std::size_t i = 0; i < batch.input.size(); ++i) {
    const double numeric = richardson_difference(loss, batch.input[i], 2e-3);
    worst_in = std::max(worst_in, relative_error(dinput[i], numeric));
  }
  EXPECT_LE(worst_in, 1e-5);
}

TEST(BrickConditioning, ClassChangesOutputAfterOneStep) {
  Rng rng(12);
  const auto s = spec(4, 2, 16, 2, 4, BrickKind::patch);
  const std::size_t C = 3;
  auto p = BrickParams<double>::initialized(s, C, rng);
  auto cp = CondParams<double>::initialized(16, 32, 4, rng);
  auto batch = random_batch<double>(s, C, 2, 1, rng);
  const auto target = random_tensor<double>({2 * 16 * C}, rng);

  auto run = [&](int cls, double t) {
    CondCache<double> cc;
    BrickCache<double> bc;
    Buffer<double> out;
    brick_forward_batch(s, p, batch, cond_forward(cp, {{t, cls}}, cc), bc, out);
    return out;
  };
  EXPECT_EQ(run(0, 10.0), run(2, 10.0));  // zero output at init

  {
    CondCache<double> cc;
    BrickCache<double> bc;
    Buffer<double> out;
    const auto cond = cond_forward(cp, {{10.0, 0}}, cc);
    brick_forward_batch(s, p, batch, cond, bc, out);
    Buffer<double> dout(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) dout[i] = 2.0 * (out[i] - target[i]);
    auto g = BrickParams<double>::zeros(s, C);
    auto gc = CondParams<double>::zeros(16, 32, 4);
    Tensor<double> dcond({1, 16});
    brick_backward_batch<double>(s, p, batch, cond, bc, dout, g, nullptr, dcond);
    cond_backward(cp, cc, dcond, gc);
    auto ps = named(p), gs = named(g);
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t j = 0; j < ps[i].tensor->size(); ++j) (*ps[i].tensor)[j] -= 0.1 * (*gs[i].tensor)[j];
  }

  const auto a = run(0, 10.0), b = run(2, 10.0), c = run(0, 600.0);
  double class_diff = 0.0, time_diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    class_diff = std::max(class_diff, std::abs(a[i] - b[i]));
    time_diff = std::max(time_diff, std::abs(a[i] - c[i]));
  }
  EXPECT_GT(class_diff, 1e-9);
  EXPECT_GT(time_diff, 1e-9);
}

TEST(Conditioning, NullRowAndRange) {
  Rng rng(13);
  auto cp = CondParams<float>::initialized(8, 16, 3, rng);
  EXPECT_EQ(cp.null_class(), 3u);
  EXPECT_EQ(cp.class_table.dim(0), 4u);
  CondCache<float> cc;
  EXPECT_THROW(cond_forward(cp, {{1.0, 3}}, cc), IndexError);
  const auto a = cond_forward(cp, {{5.0, -1}, {5.0, -1}, {5.0, 0}}, cc);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(a(0, i), a(1, i));
  }
  bool differs = false;
  for (std::size_t i = 0; i < 8; ++i) differs |= a(0, i) != a(2, i);
  EXPECT_TRUE(differs);
}

TEST(ParamCount, MatchesInstantiatedTensors) {
  Rng rng(14);
  for (auto s : {spec(4, 2, 8, 1, 2, BrickKind::patch), spec(16, 8, 24, 3, 4, BrickKind::patch),
                 spec(32, 4, 16, 0, 2, BrickKind::image)}) {
    for (std::size_t C : {1u, 3u, 4u}) {
      auto p = BrickParams<float>::zeros(s, C);
      std::size_t n = 0;
      for (auto& t : named(p)) n += t.tensor->size();
      EXPECT_EQ(n, brick_param_count(s, C));
    }
  }
  auto cp = CondParams<float>::zeros(24, 256, 10);
  std::size_t n = 0;
  for (auto& t : named(cp)) n += t.tensor->size();
  EXPECT_EQ(n, embedder_param_count(24, 10, 256));
}

TEST(Flops, DepthZeroImageBrickIsEmbedAndDecodeOnly) {
  const auto s = spec(32, 4, 16, 0, 2, BrickKind::image);
  const double tokens = 64, d = 16, l2 = 16, C = 3;
  const double want = tokens * 2 * (l2 * (2 * C + 2) * d + l2 * C * d) + 2 * (2 * d * d);
  EXPECT_DOUBLE_EQ(brick_flops(s, 32, 32, 3), want);
}

TEST(Flops, AttentionScalesQuadraticallyInTokens) {
  // doubling r at fixed l quadruples tokens per patch while quartering the
  // patch count: linear terms are unchanged, attention grows 4x
  const auto a = spec(8, 2, 16, 1, 2, BrickKind::patch), b = spec(16, 2, 16, 1, 2, BrickKind::patch);
  const auto c = spec(8, 2, 16, 0, 2, BrickKind::patch), e = spec(16, 2, 16, 0, 2, BrickKind::patch);
  const double adaln1 = 2.0 * (6 * 16 * 16 + 2 * 16 * 16), adaln0 = 2.0 * (2 * 16 * 16);
  const double linear_a = brick_flops(c, 32, 32, 3) - adaln0, linear_b = brick_flops(e, 32, 32, 3) - adaln0;
  EXPECT_DOUBLE_EQ(linear_a, linear_b);
  const double mlp_attn = 2.0 * 256 * (4 * 256.0 + 2 * 16 * 64.0);  // 256 tokens, d=16
  const double attn_a = brick_flops(a, 32, 32, 3) - adaln1 - linear_a - mlp_attn;
  const double attn_b = brick_flops(b, 32, 32, 3) - adaln1 - linear_b - mlp_attn;
  EXPECT_DOUBLE_EQ(attn_b, 4.0 * attn_a);
}
