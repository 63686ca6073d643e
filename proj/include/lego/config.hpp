// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lego/diffusion_math.hpp"
#include "lego/errors.hpp"

namespace lego {

enum class BrickKind { patch, image };
enum class StackMode { PG, PR, U };
enum class Parameterization { ddpm, edm };
enum class TrainingMode { end_to_end, sequential };

/// One LEGO brick: r x r patches, split into (r/l)^2 tokens of l x l pixels.
struct BrickSpec {
  int r = 4;
  int l = 2;
  int d = 64;
  int depth = 1;
  int heads = 4;
  int mlp_ratio = 4;
  BrickKind kind = BrickKind::patch;

  int fields_per_side() const { return r / l; }
  int tokens() const { return fields_per_side() * fields_per_side(); }
  int hidden() const { return d * mlp_ratio; }

  void validate() const {
    if (r < 1 || l < 1 || d < 1 || depth < 0 || heads < 1 || mlp_ratio < 1) {
      throw ConfigError(detail::concat("brick spec: r, l, d, heads, mlp_ratio must be positive and depth ",
                                       ">= 0 (r=", r, " l=", l, " d=", d, " depth=", depth,
                                       " heads=", heads, ")"));
    }
    if (r % l != 0) throw ConfigError(detail::concat("brick spec: l=", l, " must divide r=", r));
    if (d % heads != 0) {
      throw ConfigError(detail::concat("brick spec: d=", d, " must be divisible by heads=", heads));
    }
  }

  friend bool operator==(const BrickSpec&, const BrickSpec&) = default;
};

/// The full K-brick architecture plus what it needs to be trained.
struct StackConfig {
  std::vector<BrickSpec> bricks;  // bottom to top
  StackMode mode = StackMode::PG;
  int height = 16;
  int width = 16;
  int channels = 3;
  int num_classes = 0;
  double patch_fraction = 1.0;  // applied to patch-bricks during training
  LossWeights weights;
  Parameterization parameterization = Parameterization::ddpm;
  TrainingMode training = TrainingMode::end_to_end;
  double class_drop_prob = 0.1;
  int time_freq_dim = 256;
  EdmParams edm;  // used when parameterization == edm

  int K() const { return static_cast<int>(bricks.size()); }
  int input_channels() const { return 2 * channels + 2; }
  int model_dim() const { return bricks.empty() ? 0 : bricks.front().d; }

  void validate() const {
    if (bricks.empty()) throw ConfigError("stack config: at least one brick required");
    if (height < 1 || width < 1 || channels < 1 || num_classes < 0) {
      throw ConfigError(detail::concat("stack config: invalid resolution ", height, "x", width, "x",
                                       channels, " or num_classes ", num_classes));
    }
    if (!(patch_fraction > 0.0) || patch_fraction > 1.0) {
      throw ConfigError(detail::concat("stack config: patch_fraction must be in (0,1], got ", patch_fraction));
    }
    if (class_drop_prob < 0.0 || class_drop_prob > 1.0) {
      throw ConfigError("stack config: class_drop_prob must be in [0,1]");
    }
    if (time_freq_dim < 2) throw ConfigError("stack config: time_freq_dim must be >= 2");
    try {
      edm.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    for (std::size_t k = 0; k < bricks.size(); ++k) {
      const auto& b = bricks[k];
      b.validate();
      if (b.d != model_dim()) {
        throw ConfigError(detail::concat("stack config: brick ", k + 1, " has d=", b.d,
                                         " but the shared conditioning embedder uses d=", model_dim()));
      }
      if (height % b.r != 0 || width % b.r != 0) {
        throw ConfigError(detail::concat("stack config: brick ", k + 1, " size r=", b.r,
                                         " does not divide ", height, "x", width));
      }
      const bool full = b.r == height && b.r == width;
      if (full != (b.kind == BrickKind::image)) {
        throw ConfigError(detail::concat("stack config: brick ", k + 1, " (r=", b.r, ") must be ",
                                         full ? "an image-brick" : "a patch-brick"));
      }
    }
    check_ordering();
  }

  void check_ordering() const {
    const int n = K();
    auto inc = [&](int a, int b) {  // strictly increasing over [a, b]
      for (int k = a + 1; k <= b; ++k)
        if (bricks[std::size_t(k)].r <= bricks[std::size_t(k - 1)].r) return false;
      return true;
    };
    auto dec = [&](int a, int b) {
      for (int k = a + 1; k <= b; ++k)
        if (bricks[std::size_t(k)].r >= bricks[std::size_t(k - 1)].r) return false;
      return true;
    };
    bool ok = false;
    switch (mode) {
      case StackMode::PG: ok = inc(0, n - 1); break;
      case StackMode::PR: ok = dec(0, n - 1); break;
      case StackMode::U:
        for (int pivot = 1; pivot + 1 < n && !ok; ++pivot) ok = dec(0, pivot) && inc(pivot, n - 1);
        break;
    }
    if (!ok) {
      throw ConfigError(detail::concat("stack config: brick sizes are not ordered for mode ",
                                       mode == StackMode::PG ? "PG (strictly increasing)"
                                       : mode == StackMode::PR ? "PR (strictly decreasing)"
                                                               : "U (decreasing then increasing)"));
    }
  }
};

inline BrickKind kind_for(int r, int height, int width) {
  return (r == height && r == width) ? BrickKind::image : BrickKind::patch;
}

/// Reverses brick order and flips PG <-> PR.
inline StackConfig reversed(const StackConfig& c) {
  StackConfig out = c;
  out.bricks.assign(c.bricks.rbegin(), c.bricks.rend());
  if (c.mode == StackMode::PG) out.mode = StackMode::PR;
  else if (c.mode == StackMode::PR) out.mode = StackMode::PG;
  return out;
}

// ---- JSON ----------------------------------------------------------------

NLOHMANN_JSON_SERIALIZE_ENUM(BrickKind, {{BrickKind::patch, "patch"}, {BrickKind::image, "image"}})
NLOHMANN_JSON_SERIALIZE_ENUM(StackMode, {{StackMode::PG, "PG"}, {StackMode::PR, "PR"}, {StackMode::U, "U"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Parameterization,
                             {{Parameterization::ddpm, "ddpm"}, {Parameterization::edm, "edm"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TrainingMode, {{TrainingMode::end_to_end, "end_to_end"},
                                            {TrainingMode::sequential, "sequential"}})

namespace detail {

/// Rejects keys outside `allowed`.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const char* where) {
  if (!j.is_object()) throw ConfigError(concat(where, ": expected an object"));
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError(concat(where, ": unknown key '", it.key(), "'"));
  }
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(concat("config key '", key, "': ", e.what()));
    }
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const BrickSpec& b) {
  j = {{"r", b.r}, {"l", b.l}, {"d", b.d}, {"depth", b.depth}, {"heads", b.heads},
       {"mlp_ratio", b.mlp_ratio}, {"kind", b.kind}};
}

inline void from_json(const nlohmann::json& j, BrickSpec& b) {
  detail::check_keys(j, {"r", "l", "d", "depth", "heads", "mlp_ratio", "kind"}, "brick");
  for (const char* k : {"r", "l", "d", "depth", "heads"}) {
    if (!j.contains(k)) throw ConfigError(detail::concat("brick: missing key '", k, "'"));
  }
  b = BrickSpec{};
  detail::read_opt(j, "r", b.r);
  detail::read_opt(j, "l", b.l);
  detail::read_opt(j, "d", b.d);
  detail::read_opt(j, "depth", b.depth);
  detail::read_opt(j, "heads", b.heads);
  detail::read_opt(j, "mlp_ratio", b.mlp_ratio);
  detail::read_opt(j, "kind", b.kind);
}

inline nlohmann::json weights_to_json(const LossWeights& w) {
  nlohmann::json j;
  j["mode"] = w.mode == WeightMode::unit ? "unit" : w.mode == WeightMode::snr_delta ? "snr-delta" : "custom";
  if (w.mode == WeightMode::custom) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [key, value] : w.table) rows.push_back({key.first, key.second, value});
    j["table"] = rows;
  }
  return j;
}

inline LossWeights weights_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"mode", "table"}, "weights");
  LossWeights w;
  const std::string mode = j.value("mode", "unit");
  if (mode == "unit") w.mode = WeightMode::unit;
  else if (mode == "snr-delta") w.mode = WeightMode::snr_delta;
  else if (mode == "custom") w.mode = WeightMode::custom;
  else throw ConfigError("weights: unknown mode '" + mode + "'");
  if (auto it = j.find("table"); it != j.end()) {
    for (const auto& row : *it) {
      if (!row.is_array() || row.size() != 3) throw ConfigError("weights: table rows are [t, k, value]");
      w.table[{row[0].get<int>(), row[1].get<int>()}] = row[2].get<double>();
    }
  }
  return w;
}

inline void to_json(nlohmann::json& j, const EdmParams& p) {
  j = {{"sigma_data", p.sigma_data}, {"sigma_min", p.sigma_min}, {"sigma_max", p.sigma_max},
       {"rho", p.rho},               {"p_mean", p.p_mean},       {"p_std", p.p_std}};
}

inline void from_json(const nlohmann::json& j, EdmParams& p) {
  detail::check_keys(j, {"sigma_data", "sigma_min", "sigma_max", "rho", "p_mean", "p_std"}, "edm");
  p = EdmParams{};
  detail::read_opt(j, "sigma_data", p.sigma_data);
  detail::read_opt(j, "sigma_min", p.sigma_min);
  detail::read_opt(j, "sigma_max", p.sigma_max);
  detail::read_opt(j, "rho", p.rho);
  detail::read_opt(j, "p_mean", p.p_mean);
  detail::read_opt(j, "p_std", p.p_std);
}

inline void to_json(nlohmann::json& j, const StackConfig& c) {
  j = {{"bricks", c.bricks},
       {"mode", c.mode},
       {"height", c.height},
       {"width", c.width},
       {"channels", c.channels},
       {"num_classes", c.num_classes},
       {"patch_fraction", c.patch_fraction},
       {"weights", weights_to_json(c.weights)},
       {"parameterization", c.parameterization},
       {"training", c.training},
       {"class_drop_prob", c.class_drop_prob},
       {"time_freq_dim", c.time_freq_dim},
       {"edm", c.edm}};
}

inline void from_json(const nlohmann::json& j, StackConfig& c) {
  detail::check_keys(j, {"bricks", "mode", "height", "width", "channels", "num_classes", "patch_fraction",
                         "weights", "parameterization", "training", "class_drop_prob", "time_freq_dim", "edm"},
                     "stack");
  if (!j.contains("bricks")) throw ConfigError("stack: missing key 'bricks'");
  c = StackConfig{};
  c.bricks = j.at("bricks").get<std::vector<BrickSpec>>();
  detail::read_opt(j, "mode", c.mode);
  detail::read_opt(j, "height", c.height);
  detail::read_opt(j, "width", c.width);
  detail::read_opt(j, "channels", c.channels);
  detail::read_opt(j, "num_classes", c.num_classes);
  detail::read_opt(j, "patch_fraction", c.patch_fraction);
  if (auto it = j.find("weights"); it != j.end()) c.weights = weights_from_json(*it);
  detail::read_opt(j, "parameterization", c.parameterization);
  detail::read_opt(j, "training", c.training);
  detail::read_opt(j, "class_drop_prob", c.class_drop_prob);
  detail::read_opt(j, "time_freq_dim", c.time_freq_dim);
  detail::read_opt(j, "edm", c.edm);
}

/// FNV-1a over the canonical JSON dump, rendered as 16 hex digits.
inline std::string config_hash(const StackConfig& c) {
  const std::string text = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lego
