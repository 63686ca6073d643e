// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace lego;
using namespace lego::testing;

namespace {

/// Coverage of every pixel counted window by window, independent of the plan's own accumulation.
std::vector<int> brute_coverage(const WindowPlan& p) {
  std::vector<int> out(p.height * p.width, 0);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x)
      for (const auto& w : p.windows)
        if (y >= w.top && y < w.top + p.window && x >= w.left && x < w.left + p.window) ++out[y * p.width + x];
  return out;
}

std::vector<std::size_t> lefts(const WindowPlan& p) {
  std::vector<std::size_t> out;
  for (const auto& w : p.windows)
    if (w.top == 0) out.push_back(w.left);
  return out;
}

/// Window model answering one constant per window position in the plan order.
EpsModel<double> per_window_constant(std::vector<double> values) {
  return [values = std::move(values)](const std::vector<Tensor<double>>& x, const NoiseLevel&, const EpsFrame&,
                                      const std::vector<bool>&) {
    std::vector<std::vector<double>> out;
    for (std::size_t k = 0; k < x.size(); ++k) out.emplace_back(x[k].size(), values[k % values.size()]);
    return out;
  };
}

ClassMap parse(const std::string& text, std::size_t h, std::size_t w) {
  std::istringstream in(text);
  return parse_class_map(in, h, w);
}

}  // namespace

TEST(WindowPlan, DegenerateAndDisjoint) {
  const auto one = window_plan(32, 32, 32, 7);
  ASSERT_EQ(one.windows.size(), 1u);
  for (int c : one.weight_map) EXPECT_EQ(c, 1);
  const auto tiles = window_plan(64, 96, 32, 32);
  EXPECT_EQ(tiles.windows.size(), 6u);
  for (int c : tiles.weight_map) EXPECT_EQ(c, 1);
}

TEST(WindowPlan, Width160Window32Stride7) {
  const auto p = window_plan(32, 160, 32, 7);
  const auto l = lefts(p);
  ASSERT_EQ(l.size(), 20u);
  for (std::size_t i = 0; i < 19; ++i) EXPECT_EQ(l[i], 7 * i);
  EXPECT_EQ(l.back(), 128u);
  EXPECT_GE(*std::max_element(p.weight_map.begin(), p.weight_map.end()), 4);
}

TEST(WindowPlan, MatchesBruteForceAndCoversEverything) {
  Rng rng(1);
  std::uniform_int_distribution<std::size_t> win(1, 9), extra(0, 20), str(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t w = win(rng), h = w + extra(rng), wd = w + extra(rng), s = std::min(w, str(rng));
    const auto p = window_plan(h, wd, w, s);
    EXPECT_EQ(p.weight_map, brute_coverage(p)) << h << "x" << wd << " w=" << w << " s=" << s;
    for (int c : p.weight_map) ASSERT_GE(c, 1);
    for (const auto& o : p.windows) {
      EXPECT_LE(o.top + w, h);
      EXPECT_LE(o.left + w, wd);
      EXPECT_TRUE(o.left % s == 0 || o.left == wd - w);
    }
    EXPECT_EQ(lefts(p).back(), wd - w);
  }
}

TEST(WindowPlan, Errors) {
  EXPECT_THROW(window_plan(31, 64, 32, 7), ParameterError);
  EXPECT_THROW(window_plan(64, 31, 32, 7), ParameterError);
  EXPECT_THROW(window_plan(64, 64, 32, 0), ParameterError);
  EXPECT_THROW(window_plan(64, 64, 32, 33), ParameterError);
}

TEST(CanvasAveraging, ConstantPredictionSurvivesAnyOverlap) {
  for (std::size_t s : {1u, 3u, 5u, 8u}) {
    const auto plan = window_plan(13, 21, 8, s);
    const auto model = canvas_eps_model<double>(plan, per_window_constant({0.375}));
    const auto eps = model({Tensor<double>({13, 21, 2})}, {}, {}, {});
    for (double v : eps[0]) ASSERT_EQ(v, 0.375) << "stride " << s;
  }
}

TEST(CanvasAveraging, TwoHalfOverlappingWindows) {
  const double a = 0.7, b = -1.3;
  const auto plan = window_plan(8, 12, 8, 4);
  ASSERT_EQ(plan.windows.size(), 2u);
  const auto eps = canvas_eps_model<double>(plan, per_window_constant({a, b}))({Tensor<double>({8, 12, 1})}, {}, {}, {});
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 12; ++x) {
      const double want = x < 4 ? a : x < 8 ? (a + b) / 2 : b;
      EXPECT_DOUBLE_EQ(eps[0][y * 12 + x], want) << y << "," << x;
    }
  }
}

TEST(CanvasAveraging, RejectsWrongCanvas) {
  const auto plan = window_plan(8, 12, 8, 4);
  const auto model = canvas_eps_model<double>(plan, per_window_constant({1.0}));
  EXPECT_THROW(model({Tensor<double>({8, 13, 1})}, {}, {}, {}), ShapeError);
}

TEST(ClassMapFormat, ParsesRectanglesLaterLinesWin) {
  const auto m = parse("# sky then ground\n0 0 6 4 2\n\n0 2 6 4 1  # lower half\n", 4, 6);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(m.at(y, x), y < 2 ? 2 : 1);
}

TEST(ClassMapFormat, Errors) {
  EXPECT_THROW(parse("0 0 6 4\n", 4, 6), FormatError);
  EXPECT_THROW(parse("0 0 6 4 1 9\n", 4, 6), FormatError);
  EXPECT_THROW(parse("0 0 7 4 1\n", 4, 6), FormatError);
  EXPECT_THROW(parse("3 0 3 4 1\n", 4, 6), FormatError);
  EXPECT_THROW(parse("a b c d e\n", 4, 6), FormatError);
  try {
    parse("0 0 6 3 1\n", 4, 6);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("y=3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_class_map("/nonexistent/map.txt", 4, 6), FormatError);
}

TEST(ClassMapFormat, MajorityAndLabelCheck) {
  const auto m = parse("0 0 5 8 0\n5 0 16 8 2\n", 8, 16);
  EXPECT_EQ(majority_class(m, {0, 0}, 8), 0);
  EXPECT_EQ(majority_class(m, {0, 2}, 8), 2);
  const auto tie = parse("0 0 4 8 1\n4 0 8 8 0\n", 8, 8);
  EXPECT_EQ(majority_class(tie, {0, 0}, 8), 0);
  const auto plan = window_plan(8, 16, 8, 4);
  EXPECT_EQ(window_classes(plan, m, tiny_config()), (std::vector<int>{0, 2, 2}));
  EXPECT_THROW(window_classes(plan, parse("0 0 16 8 3\n", 8, 16), tiny_config()), ConfigError);
  EXPECT_THROW(window_classes(plan, uniform_class_map(8, 12, 0), tiny_config()), ShapeError);
}

TEST(PanoramaSample, SingleWindowEqualsBaseSampler) {
  for (auto param : {Parameterization::ddpm, Parameterization::edm}) {
    auto c = tiny_config(StackMode::PG);
    c.parameterization = param;
    auto state = init_state<float>(c, 3);
    Rng prng(4);
    randomize(state.params.named(), prng, 0.2);
    const auto sched = make_linear_schedule();
    PanoramaSampler ps;
    ps.steps = 8;
    ps.edm.steps = 5;
    ps.cfg_scale = 2.0;
    ps.skip = param == Parameterization::ddpm ? no_skip(1000, 3) : no_skip(5, 3);
    Rng a(5), b(5);
    const auto pano = panorama_sample(state, c, window_plan(8, 8, 8, 7), uniform_class_map(8, 8, 1), sched, ps, a);
    const auto base = param == Parameterization::ddpm
                          ? ddpm_sample(state, c, sched, ps.skip, ps.cfg_scale, ps.steps, {1}, b)
                          : edm_heun_sample(state, c, c.edm, ps.edm, ps.skip, ps.cfg_scale, {1}, b);
    EXPECT_EQ(pano.images, base.images);
    EXPECT_EQ(pano.nfe, base.nfe);
  }
}

TEST(PanoramaSample, Preconditions) {
  const auto c = tiny_config();
  const auto state = init_state<float>(c, 6);
  PanoramaSampler ps;
  ps.steps = 2;
  ps.skip = no_skip(1000, 3);
  Rng rng(7);
  EXPECT_THROW(panorama_sample(state, c, window_plan(9, 18, 9, 3), uniform_class_map(9, 18, 0), make_linear_schedule(),
                               ps, rng),
               ConfigError);
  EXPECT_THROW(panorama_sample(state, c, window_plan(8, 16, 8, 4), uniform_class_map(8, 16, 5), make_linear_schedule(),
                               ps, rng),
               ConfigError);
}

// Canvas B is canvas A with its first stride of columns removed: the plan, the
// class map and every noise field shift together. A's extra leftmost window can
// only influence w - 1 further columns per reverse step.
TEST(PanoramaSample, TranslationEquivariantOnInterior) {
  const auto c = tiny_config(StackMode::PG);
  auto state = init_state<float>(c, 8);
  Rng prng(9);
  randomize(state.params.named(), prng, 0.2);
  const std::size_t w = 8, s = 2, WA = w + 6 * s, WB = WA - s, C = 2;
  const int steps = 2;
  Rng nrng(10);
  std::vector<Tensor<float>> fields;
  for (int k = 0; k < steps; ++k) fields.push_back(random_tensor<float>({w, WA, C}, nrng));
  auto shifted = [&](std::size_t dx) {
    return NoiseSource<float>([&fields, dx, k = std::size_t(0), WA](std::span<float> out) mutable {
      const auto& f = fields.at(k++);
      const std::size_t width = out.size() / (8 * 2);
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < width; ++x)
          for (std::size_t ch = 0; ch < 2; ++ch) out[(y * width + x) * 2 + ch] = f[(y * WA + x + dx) * 2 + ch];
    });
  };
  ClassMap mapA{w, WA, {}}, mapB{w, WB, {}};
  for (std::size_t y = 0; y < w; ++y) {
    for (std::size_t x = 0; x < WA; ++x) mapA.ids.push_back(int(x / 5) % 3);
    for (std::size_t x = 0; x < WB; ++x) mapB.ids.push_back(int((x + s) / 5) % 3);
  }
  PanoramaSampler ps;
  ps.steps = steps;
  ps.skip = no_skip(1000, 3);
  ps.cfg_scale = 1.5;
  const auto sched = make_linear_schedule();
  const auto A = panorama_sample(state, c, window_plan(w, WA, w, s), mapA, sched, ps, shifted(0)).images[0];
  const auto B = panorama_sample(state, c, window_plan(w, WB, w, s), mapB, sched, ps, shifted(s)).images[0];
  std::size_t compared = 0;
  for (std::size_t y = 0; y < w; ++y) {
    for (std::size_t x = steps * w; x < WA; ++x) {
      for (std::size_t ch = 0; ch < C; ++ch) {
        ASSERT_EQ(A(y, x, ch), B(y, x - s, ch)) << y << "," << x;
        ++compared;
      }
    }
  }
  EXPECT_GT(compared, 0u);
  bool left_differs = false;
  for (std::size_t y = 0; y < w; ++y)
    for (std::size_t x = s; x < w; ++x) left_differs |= A(y, x, 0) != B(y, x - s, 0);
  EXPECT_TRUE(left_differs);
}
