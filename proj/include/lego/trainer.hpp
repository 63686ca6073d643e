// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lego/accounting.hpp"
#include "lego/dataset.hpp"
#include "lego/stack.hpp"

namespace lego {

struct TrainConfig {
  double lr = 1e-4;
  long long warmup_images = 10000;  // edm only
  int batch_size = 64;
  long long total_images = 64;
  double ema_decay = 0.9999;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int log_every = 1;
  int checkpoint_every = 0;  // steps; 0 disables periodic checkpoints

  long long steps() const { return total_images / batch_size; }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError(detail::concat("train config: lr must be > 0, got ", lr));
    if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("train config: ema_decay must be in [0, 1]");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (total_images < batch_size) throw ConfigError("train config: total_images must be >= batch_size");
    if (warmup_images < 0 || weight_decay < 0.0) throw ConfigError("train config: warmup_images, weight_decay >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || !(adam_eps > 0.0)) {
      throw ConfigError("train config: betas must be in [0, 1) and adam_eps > 0");
    }
    if (log_every < 1 || checkpoint_every < 0) throw ConfigError("train config: log_every >= 1, checkpoint_every >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"warmup_images", c.warmup_images},
       {"batch_size", c.batch_size},
       {"total_images", c.total_images},
       {"ema_decay", c.ema_decay},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::check_keys(j, {"lr", "warmup_images", "batch_size", "total_images", "ema_decay", "weight_decay", "beta1",
                         "beta2", "adam_eps", "seed", "log_every", "checkpoint_every"},
                     "train");
  c = TrainConfig{};
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "warmup_images", c.warmup_images);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "total_images", c.total_images);
  detail::read_opt(j, "ema_decay", c.ema_decay);
  detail::read_opt(j, "weight_decay", c.weight_decay);
  detail::read_opt(j, "beta1", c.beta1);
  detail::read_opt(j, "beta2", c.beta2);
  detail::read_opt(j, "adam_eps", c.adam_eps);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "log_every", c.log_every);
  detail::read_opt(j, "checkpoint_every", c.checkpoint_every);
}

inline double lr_at(long long images_seen, const TrainConfig& tc, Parameterization mode) {
  if (images_seen < 0) throw ParameterError("lr_at: images_seen must be >= 0");
  if (mode == Parameterization::ddpm || tc.warmup_images == 0) return tc.lr;
  return tc.lr * std::min(1.0, double(images_seen) / double(tc.warmup_images));
}

/// shadow <- decay * shadow + (1 - decay) * params, matched by name.
template <typename T>
void ema_update(const std::vector<Named<T>>& shadow, const std::vector<Named<T>>& params, double decay) {
  if (shadow.size() != params.size()) {
    throw StructuralError(detail::concat("ema_update: ", shadow.size(), " shadow tensors vs ", params.size(), " parameters"));
  }
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].name != params[i].name || shadow[i].tensor->shape() != params[i].tensor->shape()) {
      throw StructuralError("ema_update: tensor '" + params[i].name + "' does not match shadow '" + shadow[i].name + "'");
    }
    auto& s = *shadow[i].tensor;
    const auto& p = *params[i].tensor;
    if (decay == 1.0) continue;
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = static_cast<T>(decay * double(s[k]) + (1.0 - decay) * double(p[k]));
  }
}

/// Adam with decoupled weight decay. Moments live in named tensors so they can
/// be checkpointed.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const std::vector<Named<T>>& params) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.push_back(zeros_like(*p.tensor));
      v_.push_back(zeros_like(*p.tensor));
    }
  }

  void step(const std::vector<Named<T>>& params, const std::vector<Named<T>>& grads, double lr, const TrainConfig& tc) {
    if (params.size() != names_.size() || grads.size() != names_.size()) {
      throw StructuralError(detail::concat("adamw: optimizer tracks ", names_.size(), " tensors, got ", params.size()));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(tc.beta1, double(t_)), bc2 = 1.0 - std::pow(tc.beta2, double(t_));
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (params[i].name != names_[i]) throw StructuralError("adamw: parameter order changed at '" + params[i].name + "'");
      auto& p = *params[i].tensor;
      const auto& g = *grads[i].tensor;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = double(g[k]);
        const double mk = tc.beta1 * double(m[k]) + (1.0 - tc.beta1) * gk;
        const double vk = tc.beta2 * double(v[k]) + (1.0 - tc.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = (mk / bc1) / (std::sqrt(vk / bc2) + tc.adam_eps) + tc.weight_decay * double(p[k]);
        p[k] = static_cast<T>(double(p[k]) - lr * update);
      }
    }
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }

  std::vector<Named<T>> moments(const char* which) {
    std::vector<Named<T>> out;
    auto& src = std::string(which) == "m" ? m_ : v_;
    for (std::size_t i = 0; i < names_.size(); ++i) out.push_back({names_[i], &src[i]});
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> m_, v_;
  long long t_ = 0;
};

// ---- checkpoint ------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "LEGOCKPT";

/// In-memory image of a checkpoint file. Tensors keep their file order.
struct Checkpoint {
  int version = kCheckpointVersion;
  std::string config_hash;
  long long step = 0;
  long long images_seen = 0;
  std::string rng_state;
  nlohmann::json config;  // {"stack": ..., "train": ...}
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void write_f32_le(std::ostream& os, const Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
  } else {
    for (float f : t.values()) {
      auto u = std::bit_cast<std::uint32_t>(f);
      char b[4] = {char(u), char(u >> 8), char(u >> 16), char(u >> 24)};
      os.write(b, 4);
    }
  }
}

inline void read_f32_le(const char* src, Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(t.data(), src, t.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(src + 4 * i);
      t[i] = std::bit_cast<float>(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                                  std::uint32_t(b[3]) << 24);
    }
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_manifest(const Checkpoint& c) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  return {{"version", c.version},   {"config_hash", c.config_hash}, {"step", c.step},
          {"images_seen", c.images_seen}, {"rng_state", c.rng_state}, {"config", c.config},
          {"tensors", table},       {"payload_bytes", offset}};
}

/// Writes to a temporary sibling, then renames over `path`.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string manifest = checkpoint_manifest(c).dump(1);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint '" + tmp + "'");
    os << kCheckpointMagic << '\n' << manifest.size() << '\n' << manifest;
    for (const auto& [name, t] : c.tensors) detail::write_f32_le(os, t);
    os.flush();
    if (!os) throw FormatError("short write on checkpoint '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  std::string magic, len_line;
  std::getline(is, magic);
  std::getline(is, len_line);
  if (magic != kCheckpointMagic) throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw FormatError("checkpoint '" + path + "': bad manifest length");
  }
  std::string manifest(len, '\0');
  is.read(manifest.data(), std::streamsize(len));
  if (std::size_t(is.gcount()) != len) throw FormatError("checkpoint '" + path + "': truncated manifest");
  const std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Checkpoint c;
  try {
    const auto j = nlohmann::json::parse(manifest);
    c.version = j.at("version").get<int>();
    if (c.version != kCheckpointVersion) {
      throw FormatError(detail::concat("checkpoint '", path, "': unsupported version ", c.version));
    }
    c.config_hash = j.at("config_hash").get<std::string>();
    c.step = j.at("step").get<long long>();
    c.images_seen = j.at("images_seen").get<long long>();
    c.rng_state = j.at("rng_state").get<std::string>();
    c.config = j.at("config");
    const auto total = j.at("payload_bytes").get<std::uint64_t>();
    if (total != payload.size()) {
      throw FormatError(detail::concat("checkpoint '", path, "': payload holds ", payload.size(), " bytes, manifest says ",
                                       total));
    }
    for (const auto& e : j.at("tensors")) {
      Tensor<float> t(e.at("shape").get<Shape>());
      const auto off = e.at("offset").get<std::uint64_t>();
      if (off + t.size() * sizeof(float) > payload.size()) {
        throw FormatError("checkpoint '" + path + "': tensor '" + e.at("name").get<std::string>() + "' out of bounds");
      }
      detail::read_f32_le(payload.data() + off, t);
      c.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(detail::concat("checkpoint '", path, "': malformed manifest (", e.what(), ")"));
  }
  return c;
}

/// Copies checkpoint tensors `prefix + name` into the given slots.
inline void restore_tensors(const Checkpoint& c, const std::string& prefix, const std::vector<Named<float>>& slots) {
  for (const auto& s : slots) {
    const auto* t = c.find(prefix + s.name);
    if (!t) throw StructuralError("checkpoint is missing tensor '" + prefix + s.name + "'");
    if (t->shape() != s.tensor->shape()) {
      throw StructuralError(detail::concat("checkpoint tensor '", prefix, s.name, "' has shape ",
                                           detail::shape_str(t->shape()), ", model expects ",
                                           detail::shape_str(s.tensor->shape())));
    }
    *s.tensor = *t;
  }
}

// ---- training loop ---------------------------------------------------------

struct StepRecord {
  long long step = 0;
  long long images_seen = 0;
  double loss = 0.0;
  std::vector<double> per_brick;
  double lr = 0.0;
  double wall_clock_s = 0.0;
  double train_flops = 0.0;
};

inline nlohmann::json to_json_record(const StepRecord& r) {
  return {{"step", r.step}, {"images_seen", r.images_seen}, {"loss", r.loss}, {"per_brick", r.per_brick},
          {"lr", r.lr},     {"wall_clock_s", r.wall_clock_s}, {"train_flops", r.train_flops}};
}

/// Model, EMA shadow, optimizer and rng of one training run.
class Trainer {
 public:
  Trainer(StackConfig config, TrainConfig tc, NoiseSchedule schedule)
      : config_(std::move(config)), tc_(tc), schedule_(std::move(schedule)) {
    config_.validate();
    tc_.validate();
    state_ = init_state<float>(config_, tc_.seed);
    ema_ = state_.params;
    grads_ = StackParams<float>::zeros(config_);
    rng_.seed(derive_seed(tc_.seed, 0x7261696eull));
    opt_ = AdamW<float>(trainable(state_, grads_).params);
    fwd_flops_ = flops_estimate(config_, FlopsMode::train).total;
  }

  const StackConfig& config() const { return config_; }
  const TrainConfig& train_config() const { return tc_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  StackState<float>& state() { return state_; }
  const StackState<float>& state() const { return state_; }
  const StackParams<float>& ema() const { return ema_; }
  long long step() const { return step_; }
  long long images_seen() const { return images_seen_; }

  /// Re-creates the optimizer after external bricks have been attached.
  void refresh_optimizer() { opt_ = AdamW<float>(trainable(state_, grads_).params); }

  StepRecord train_step(const Dataset& ds) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch batch = batch_at(ds, std::uint64_t(images_seen_), std::size_t(tc_.batch_size));
    grads_.set_zero();
    for (auto& e : state_.external)
      if (e && !e->frozen)
        for (auto& g : e->gradients()) g.tensor->fill(0.0f);
    LossResult loss;
    try {
      loss = training_loss(batch.images, batch.labels, state_, config_, schedule_, rng_, &grads_);
    } catch (const NumericError&) {
      if (!diagnostic_path_.empty()) save_checkpoint(diagnostic_path_, checkpoint());
      throw;
    }
    const double lr = lr_at(images_seen_, tc_, config_.parameterization);
    const auto set = trainable(state_, grads_);
    opt_.step(set.params, set.grads, lr, tc_);
    ema_update(ema_.named(), state_.params.named(), tc_.ema_decay);
    ++step_;
    images_seen_ += tc_.batch_size;
    wall_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {step_, images_seen_, loss.total, loss.per_brick, lr, wall_, 3.0 * fwd_flops_ * double(images_seen_)};
  }

  /// Runs until `total_images` have been consumed, writing one JSON line per
  /// logged step and periodic checkpoints when a path is given.
  std::vector<StepRecord> train(const Dataset& ds, std::ostream* metrics = nullptr, const std::string& ckpt_path = "") {
    check_dataset(ds);
    std::vector<StepRecord> trace;
    while (step_ < tc_.steps()) {
      trace.push_back(train_step(ds));
      const auto& r = trace.back();
      if (metrics && (r.step % tc_.log_every == 0 || r.step == tc_.steps())) {
        *metrics << to_json_record(r).dump() << '\n';
        metrics->flush();
      }
      if (!ckpt_path.empty() && tc_.checkpoint_every > 0 && r.step % tc_.checkpoint_every == 0) {
        save_checkpoint(ckpt_path, checkpoint());
      }
    }
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, checkpoint());
    return trace;
  }

  void check_dataset(const Dataset& ds) const {
    if (ds.height() != std::size_t(config_.height) || ds.width() != std::size_t(config_.width) ||
        ds.channels() != std::size_t(config_.channels)) {
      throw IngestError(detail::concat("dataset yields ", ds.height(), "x", ds.width(), "x", ds.channels(),
                                       " images, model expects ", config_.height, "x", config_.width, "x",
                                       config_.channels));
    }
    if (ds.num_classes() != config_.num_classes) {
      throw IngestError(detail::concat("dataset has ", ds.num_classes(), " classes, model expects ", config_.num_classes));
    }
  }

  void set_diagnostic_path(std::string p) { diagnostic_path_ = std::move(p); }

  Checkpoint checkpoint() {
    Checkpoint c;
    c.config_hash = state_.config_hash;
    c.step = step_;
    c.images_seen = images_seen_;
    c.rng_state = rng_state(rng_);
    c.config = {{"stack", config_}, {"train", tc_}};
    auto add = [&](const std::string& prefix, const std::vector<Named<float>>& list) {
      for (const auto& n : list) c.tensors.emplace_back(prefix + n.name, *n.tensor);
    };
    add("model.", state_.params.named());
    add("ema.", ema_.named());
    add("opt.m.", opt_.moments("m"));
    add("opt.v.", opt_.moments("v"));
    return c;
  }

  /// Restores a run. A config-hash mismatch is rejected unless `force`.
  void restore(const Checkpoint& c, bool force = false) {
    if (c.config_hash != state_.config_hash && !force) {
      throw StructuralError("checkpoint config hash " + c.config_hash + " does not match " + state_.config_hash +
                            " (use force to override)");
    }
    restore_tensors(c, "model.", state_.params.named());
    restore_tensors(c, "ema.", ema_.named());
    restore_tensors(c, "opt.m.", opt_.moments("m"));
    restore_tensors(c, "opt.v.", opt_.moments("v"));
    step_ = c.step;
    images_seen_ = c.images_seen;
    opt_.set_steps(c.step);
    set_rng_state(rng_, c.rng_state);
  }

 private:
  StackConfig config_;
  TrainConfig tc_;
  NoiseSchedule schedule_;
  StackState<float> state_;
  StackParams<float> ema_;
  StackParams<float> grads_;
  AdamW<float> opt_;
  Rng rng_;
  long long step_ = 0;
  long long images_seen_ = 0;
  double wall_ = 0.0;
  double fwd_flops_ = 0.0;
  std::string diagnostic_path_;
};

/// Model parameters (or their EMA) from a checkpoint, for sampling.
inline StackState<float> state_from_checkpoint(const Checkpoint& c, const StackConfig& config, bool use_ema = true,
                                               bool force = false) {
  StackState<float> s;
  s.params = StackParams<float>::zeros(config);
  s.external.assign(config.bricks.size(), nullptr);
  s.config_hash = config_hash(config);
  if (c.config_hash != s.config_hash && !force) {
    throw StructuralError("checkpoint config hash " + c.config_hash + " does not match " + s.config_hash);
  }
  restore_tensors(c, use_ema ? "ema." : "model.", s.params.named());
  return s;
}

}  // namespace lego
