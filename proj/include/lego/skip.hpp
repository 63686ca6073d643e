// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "lego/config.hpp"

namespace lego {

enum class SkipMode { none, PG, PR };

inline SkipMode parse_skip_mode(const std::string& s) {
  if (s == "none") return SkipMode::none;
  if (s == "pg" || s == "PG") return SkipMode::PG;
  if (s == "pr" || s == "PR") return SkipMode::PR;
  throw ConfigError("skip mode must be one of pg, pr, none; got '" + s + "'");
}

inline const char* to_string(SkipMode m) {
  switch (m) {
    case SkipMode::PG: return "pg";
    case SkipMode::PR: return "pr";
    case SkipMode::none: break;
  }
  return "none";
}

/// Which bricks run at each reverse timestep. Only the top brick (last in the
/// bottom-to-top list) is ever dropped:
///   PG: dropped for t <= t_break
///   PR: dropped for t >  T - t_break
struct SkipSchedule {
  SkipMode mode = SkipMode::none;
  int t_break = 0;
  int T = 1;
  int K = 1;

  bool top_skipped(int t) const {
    if (t < 1 || t > T) throw IndexError(detail::concat("skip schedule: timestep ", t, " outside [1, ", T, "]"));
    switch (mode) {
      case SkipMode::PG: return t <= t_break;
      case SkipMode::PR: return t > T - t_break;
      case SkipMode::none: break;
    }
    return false;
  }

  /// Per-brick activity flags, bottom to top.
  std::vector<bool> active(int t) const {
    std::vector<bool> a(std::size_t(K), true);
    if (top_skipped(t)) a.back() = false;
    return a;
  }
};

inline SkipSchedule no_skip(int T, int K) { return {SkipMode::none, 0, T, K}; }

inline SkipSchedule skip_schedule(SkipMode mode, int t_break, int T, const StackConfig& config) {
  if (T < 1) throw ParameterError(detail::concat("skip schedule: T must be >= 1, got ", T));
  if (t_break < 0 || t_break > T) {
    throw ParameterError(detail::concat("skip schedule: t_break must be in [0, ", T, "], got ", t_break));
  }
  if (config.bricks.empty()) throw ConfigError("skip schedule: config has no bricks");
  const BrickSpec& top = config.bricks.back();
  if (mode == SkipMode::PG && (config.mode != StackMode::PG || top.kind != BrickKind::image)) {
    throw ConfigError("skip mode pg needs a PG stack topped by an image-brick");
  }
  if (mode == SkipMode::PR && (config.mode != StackMode::PR || top.kind != BrickKind::patch)) {
    throw ConfigError("skip mode pr needs a PR stack topped by a patch-brick");
  }
  return {mode, mode == SkipMode::none ? 0 : t_break, T, config.K()};
}

}  // namespace lego
