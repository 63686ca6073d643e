// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "lego/config.hpp"
#include "lego/skip.hpp"

namespace lego {

/// Scalar parameters of one brick (embedding, positions, blocks, final layer).
inline std::uint64_t brick_param_count(const BrickSpec& s, std::uint64_t image_channels) {
  const std::uint64_t d = std::uint64_t(s.d), l2 = std::uint64_t(s.l) * std::uint64_t(s.l);
  const std::uint64_t cin = 2 * image_channels + 2, hd = std::uint64_t(s.hidden());
  const std::uint64_t embed = l2 * cin * d + d + std::uint64_t(s.tokens()) * d;
  const std::uint64_t block = (3 * d * d + 3 * d) + (d * d + d) + (hd * d + hd) + (d * hd + d) + (6 * d * d + 6 * d);
  const std::uint64_t final_layer = (2 * d * d + 2 * d) + (l2 * image_channels * d + l2 * image_channels);
  return embed + std::uint64_t(s.depth) * block + final_layer;
}

/// Shared time/class embedder and the no-previous flag.
inline std::uint64_t embedder_param_count(std::uint64_t d, std::uint64_t num_classes, std::uint64_t freq_dim = 256) {
  return (freq_dim * d + d) + (d * d + d) + (num_classes + 1) * d + d;
}

struct ParamReport {
  std::uint64_t total = 0;
  std::uint64_t embedder = 0;
  std::vector<std::uint64_t> per_brick;
};

inline ParamReport param_count(const std::vector<BrickSpec>& bricks, int image_channels, int num_classes,
                               int freq_dim = 256) {
  ParamReport r;
  if (!bricks.empty()) {
    r.embedder = embedder_param_count(std::uint64_t(bricks.front().d), std::uint64_t(num_classes),
                                      std::uint64_t(freq_dim));
  }
  r.total = r.embedder;
  for (const auto& b : bricks) {
    r.per_brick.push_back(brick_param_count(b, std::uint64_t(image_channels)));
    r.total += r.per_brick.back();
  }
  return r;
}

inline ParamReport param_count(const StackConfig& c) {
  return param_count(c.bricks, c.channels, c.num_classes, c.time_freq_dim);
}

enum class FlopsMode { train, sample };

struct FlopsReport {
  double total = 0.0;
  double embedder = 0.0;
  std::vector<double> per_brick;
};

/// Forward-pass FLOPs of one brick over a full H x W image, counting 2 per
/// multiply-add. Attention costs 4 S^2 d per block per sequence (scores and
/// the weighted sum of values); adaLN is evaluated once per image.
inline double brick_flops(const BrickSpec& s, int height, int width, int image_channels, double token_fraction = 1.0) {
  const double d = s.d, l2 = double(s.l) * s.l, S = s.tokens(), hd = s.hidden();
  const double cin = 2.0 * image_channels + 2.0;
  const double patches = double(height / s.r) * double(width / s.r) * token_fraction;
  const double per_token_params = l2 * cin * d + double(s.depth) * (4.0 * d * d + 2.0 * d * hd) + l2 * image_channels * d;
  const double attention = double(s.depth) * 4.0 * S * S * d;
  const double adaln = 2.0 * (double(s.depth) * 6.0 * d * d + 2.0 * d * d);
  return patches * (S * 2.0 * per_token_params + attention) + adaln;
}

/// Per-image forward FLOPs. In train mode patch-bricks only see their sampled
/// fraction of patches; in sample mode with a skip schedule every brick is
/// weighted by the share of timesteps it runs.
inline FlopsReport flops_estimate(const StackConfig& c, int height, int width, FlopsMode mode,
                                  const std::optional<SkipSchedule>& skip = std::nullopt) {
  FlopsReport r;
  const double d = c.model_dim();
  r.embedder = 2.0 * (double(c.time_freq_dim) * d + d * d);
  r.total = r.embedder;
  std::vector<double> share(c.bricks.size(), 1.0);
  if (mode == FlopsMode::sample && skip && skip->mode != SkipMode::none) {
    if (skip->K != c.K()) {
      throw ConfigError(detail::concat("flops_estimate: skip schedule built for ", skip->K, " bricks, config has ", c.K()));
    }
    int on = 0;
    for (int t = 1; t <= skip->T; ++t) on += skip->top_skipped(t) ? 0 : 1;
    share.back() = double(on) / double(skip->T);
  }
  for (std::size_t k = 0; k < c.bricks.size(); ++k) {
    const auto& b = c.bricks[k];
    const bool patch_brick = !(b.r == height && b.r == width);
    const double frac = (mode == FlopsMode::train && patch_brick) ? c.patch_fraction : 1.0;
    r.per_brick.push_back(share[k] * brick_flops(b, height, width, c.channels, frac));
    r.total += r.per_brick.back();
  }
  return r;
}

inline FlopsReport flops_estimate(const StackConfig& c, FlopsMode mode,
                                  const std::optional<SkipSchedule>& skip = std::nullopt) {
  return flops_estimate(c, c.height, c.width, mode, skip);
}

}  // namespace lego
