// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lego/brick.hpp"
#include "lego/config.hpp"
#include "lego/diffusion_math.hpp"
#include "lego/patch_grid.hpp"
#include "lego/rng.hpp"

namespace lego {

/// How one example's noise level enters the network. A brick sees
/// in_scale * x_t and its raw output F becomes skip_scale * x_t + out_scale * F.
/// fallback_scale * x_t is the estimate when no brick runs.
struct NoiseLevel {
  double time_input = 0.0;
  double in_scale = 1.0;
  double skip_scale = 0.0;
  double out_scale = 1.0;
  double fallback_scale = 1.0;
};

/// DDPM: bricks predict x0 directly; the fallback is x0_from_eps with a zero
/// noise prediction.
inline NoiseLevel ddpm_level_alpha(double alpha, double time_input) {
  if (!(alpha > 0.0)) throw DomainError(detail::concat("ddpm level: alpha must be > 0, got ", alpha));
  return {time_input, 1.0, 0.0, 1.0, 1.0 / std::sqrt(alpha)};
}

inline NoiseLevel ddpm_level(const NoiseSchedule& s, int t) { return ddpm_level_alpha(s.alpha(t), double(t)); }

inline NoiseLevel edm_level(double sigma, const EdmParams& p) {
  const auto c = edm_precondition(sigma, p);
  return {c.c_noise, c.c_in, c.c_skip, c.c_out, c.c_skip};
}

// ---- parameters and state --------------------------------------------------

template <typename T>
struct StackParams {
  CondParams<T> cond;
  std::vector<BrickParams<T>> bricks;

  static StackParams zeros(const StackConfig& c) {
    StackParams p;
    p.cond = CondParams<T>::zeros(std::size_t(c.model_dim()), std::size_t(c.time_freq_dim),
                                  std::size_t(c.num_classes));
    for (const auto& b : c.bricks) p.bricks.push_back(BrickParams<T>::zeros(b, std::size_t(c.channels)));
    return p;
  }

  static StackParams initialized(const StackConfig& c, std::uint64_t seed) {
    StackParams p;
    Rng rng(derive_seed(seed, 0));
    p.cond = CondParams<T>::initialized(std::size_t(c.model_dim()), std::size_t(c.time_freq_dim),
                                        std::size_t(c.num_classes), rng);
    for (std::size_t k = 0; k < c.bricks.size(); ++k) {
      Rng brng(derive_seed(seed, 1 + k));
      p.bricks.push_back(BrickParams<T>::initialized(c.bricks[k], std::size_t(c.channels), brng));
    }
    return p;
  }

  std::vector<Named<T>> named() {
    std::vector<Named<T>> out;
    cond.collect(out, "cond.");
    for (std::size_t k = 0; k < bricks.size(); ++k) bricks[k].collect(out, "bricks." + std::to_string(k + 1) + ".");
    return out;
  }
  std::vector<Named<T>> named() const { return const_cast<StackParams*>(this)->named(); }

  void set_zero() {
    for (auto& n : named()) n.tensor->fill(T(0));
  }
};

/// A black-box x0 predictor occupying one brick slot at full resolution.
/// Parameters and a backward hook are optional; frozen bricks are never
/// handed to the optimizer.
template <typename T>
class ExternalBrick {
 public:
  virtual ~ExternalBrick() = default;
  virtual Shape resolution() const = 0;
  virtual Tensor<T> predict(const Tensor<T>& xt, const NoiseLevel& level, int class_id) const = 0;
  virtual std::vector<Named<T>> parameters() { return {}; }
  virtual std::vector<Named<T>> gradients() { return {}; }
  virtual void backward(const Tensor<T>& /*xt*/, const NoiseLevel& /*level*/, int /*class_id*/,
                        const Tensor<T>& /*d_prediction*/) {}

  bool frozen = true;
};

/// Adapter from plain callables. `params` and `grads` are parallel lists owned
/// by the adapter.
template <typename T>
class FunctionBrick : public ExternalBrick<T> {
 public:
  using Predict = std::function<Tensor<T>(const Tensor<T>&, const NoiseLevel&, int)>;
  using Backward = std::function<void(const Tensor<T>&, const NoiseLevel&, int, const Tensor<T>&,
                                      std::vector<Tensor<T>>&)>;

  FunctionBrick(Shape resolution, Predict predict, std::vector<std::pair<std::string, Tensor<T>>> params = {},
                Backward backward = {})
      : resolution_(std::move(resolution)), predict_(std::move(predict)), backward_(std::move(backward)) {
    for (auto& [name, t] : params) {
      names_.push_back(name);
      grads_.push_back(zeros_like(t));
      params_.push_back(std::move(t));
    }
  }

  Shape resolution() const override { return resolution_; }
  Tensor<T> predict(const Tensor<T>& xt, const NoiseLevel& level, int class_id) const override {
    return predict_(xt, level, class_id);
  }
  std::vector<Named<T>> parameters() override { return list(params_); }
  std::vector<Named<T>> gradients() override { return list(grads_); }
  void backward(const Tensor<T>& xt, const NoiseLevel& level, int class_id, const Tensor<T>& d) override {
    if (backward_) backward_(xt, level, class_id, d, grads_);
  }
  const std::vector<Tensor<T>>& values() const { return params_; }

 private:
  std::vector<Named<T>> list(std::vector<Tensor<T>>& v) {
    std::vector<Named<T>> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back({"external." + names_[i], &v[i]});
    return out;
  }

  Shape resolution_;
  Predict predict_;
  Backward backward_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_, grads_;
};

/// theta = {theta_k}: native brick parameters plus the shared embedder, bound
/// to a configuration by hash. Slots holding an external brick ignore their
/// native parameters.
template <typename T>
struct StackState {
  StackParams<T> params;
  std::vector<std::shared_ptr<ExternalBrick<T>>> external;
  std::string config_hash;

  bool is_external(std::size_t k) const { return k < external.size() && external[k] != nullptr; }
};

template <typename T = float>
StackState<T> init_state(const StackConfig& config, std::uint64_t seed) {
  config.validate();
  StackState<T> s;
  s.params = StackParams<T>::initialized(config, seed);
  s.external.assign(config.bricks.size(), nullptr);
  s.config_hash = config_hash(config);
  return s;
}

template <typename T>
void check_state(const StackState<T>& state, const StackConfig& config) {
  const std::string h = config_hash(config);
  if (state.config_hash != h) {
    throw StructuralError(detail::concat("stack state bound to config ", state.config_hash, ", got config ", h));
  }
  if (state.params.bricks.size() != config.bricks.size()) {
    throw StructuralError(detail::concat("stack state holds ", state.params.bricks.size(), " bricks, config has ",
                                         config.bricks.size()));
  }
}

/// Places `predictor` in brick slot `position` (1-based).
template <typename T>
void wrap_external_brick(StackState<T>& state, const StackConfig& config, std::shared_ptr<ExternalBrick<T>> predictor,
                         int position, bool frozen) {
  check_state(state, config);
  if (position < 1 || position > config.K()) {
    throw IndexError(detail::concat("external brick position ", position, " outside [1, ", config.K(), "]"));
  }
  const Shape want{std::size_t(config.height), std::size_t(config.width), std::size_t(config.channels)};
  if (predictor->resolution() != want) {
    throw ShapeError(detail::concat("external brick resolution ", detail::shape_str(predictor->resolution()),
                                    " does not match stack ", detail::shape_str(want)));
  }
  predictor->frozen = frozen;
  state.external.resize(config.bricks.size());
  state.external[std::size_t(position - 1)] = std::move(predictor);
}

/// Every tensor the optimizer may update, paired with its gradient slot.
template <typename T>
struct TrainableSet {
  std::vector<Named<T>> params, grads;
};

template <typename T>
TrainableSet<T> trainable(StackState<T>& state, StackParams<T>& grads) {
  TrainableSet<T> out;
  auto add = [&](std::vector<Named<T>> p, std::vector<Named<T>> g) {
    out.params.insert(out.params.end(), p.begin(), p.end());
    out.grads.insert(out.grads.end(), g.begin(), g.end());
  };
  {
    std::vector<Named<T>> p, g;
    state.params.cond.collect(p, "cond.");
    grads.cond.collect(g, "cond.");
    add(std::move(p), std::move(g));
  }
  for (std::size_t k = 0; k < state.params.bricks.size(); ++k) {
    const std::string prefix = "bricks." + std::to_string(k + 1) + ".";
    if (state.is_external(k)) {
      auto& ext = *state.external[k];
      if (!ext.frozen) add(ext.parameters(), ext.gradients());
      continue;
    }
    std::vector<Named<T>> p, g;
    state.params.bricks[k].collect(p, prefix);
    grads.bricks[k].collect(g, prefix);
    add(std::move(p), std::move(g));
  }
  return out;
}

// ---- forward ---------------------------------------------------------------

namespace detail {

/// Writes one r x r x (2C+2) brick input: [in_scale * x_t, prev (or 0), coords].
template <typename T>
void write_brick_input(const Tensor<T>& xt, double in_scale, const Tensor<T>* prev, const Tensor<T>& coords,
                       const PatchGrid& g, PatchIndex p, T* dst) {
  const std::size_t r = g.r(), C = xt.dim(2), cin = 2 * C + 2, r0 = g.row0(p), c0 = g.col0(p);
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      T* o = dst + (y * r + x) * cin;
      const T* src = &xt(r0 + y, c0 + x, 0);
      for (std::size_t c = 0; c < C; ++c) o[c] = in_scale == 1.0 ? src[c] : static_cast<T>(in_scale * double(src[c]));
      if (prev) {
        const T* pv = &(*prev)(r0 + y, c0 + x, 0);
        for (std::size_t c = 0; c < C; ++c) o[C + c] = pv[c];
      } else {
        for (std::size_t c = 0; c < C; ++c) o[C + c] = T(0);
      }
      o[2 * C] = coords(r0 + y, c0 + x, 0);
      o[2 * C + 1] = coords(r0 + y, c0 + x, 1);
    }
  }
}

/// dst patch = skip * x_t + out * F
template <typename T>
void compose_patch(const Tensor<T>& xt, const NoiseLevel& lv, const T* F, const PatchGrid& g, PatchIndex p,
                   Tensor<T>& dst) {
  const std::size_t r = g.r(), C = xt.dim(2), r0 = g.row0(p), c0 = g.col0(p);
  const bool plain = lv.skip_scale == 0.0 && lv.out_scale == 1.0;
  for (std::size_t y = 0; y < r; ++y) {
    const T* x = &xt(r0 + y, c0, 0);
    T* o = &dst(r0 + y, c0, 0);
    const T* f = F + y * r * C;
    for (std::size_t i = 0; i < r * C; ++i) {
      o[i] = plain ? f[i] : static_cast<T>(lv.skip_scale * double(x[i]) + lv.out_scale * double(f[i]));
    }
  }
}

template <typename T>
Tensor<T> coord_tensor(const StackConfig& c) {
  return coord_grid(std::size_t(c.height), std::size_t(c.width)).values.template cast<T>();
}

template <typename T>
Tensor<T> with_flag(const Tensor<T>& base, const Tensor<T>& no_prev) {
  Tensor<T> out = base;
  const std::size_t B = base.dim(0), d = base.dim(1);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < d; ++i) out(b, i) += no_prev[i];
  return out;
}

template <typename T>
void check_batch(const std::vector<Tensor<T>>& xs, const StackConfig& c, const char* what) {
  const Shape want{std::size_t(c.height), std::size_t(c.width), std::size_t(c.channels)};
  for (const auto& x : xs) {
    if (x.shape() != want) {
      throw ShapeError(concat(what, ": image ", shape_str(x.shape()), " does not match configured ", shape_str(want)));
    }
  }
}

}  // namespace detail

template <typename T>
struct StackOutput {
  std::vector<Tensor<T>> x0_hat;
  bool fallback = false;  // no brick was active
};

/// Full-image x0 estimates for a batch. `active` holds one flag per brick
/// (bottom to top); empty means all bricks run.
template <typename T>
StackOutput<T> stack_forward(const std::vector<Tensor<T>>& xt, const std::vector<NoiseLevel>& levels,
                             const std::vector<int>& classes, const StackState<T>& state, const StackConfig& config,
                             const std::vector<bool>& active = {}) {
  check_state(state, config);
  detail::check_batch(xt, config, "stack_forward");
  const std::size_t B = xt.size(), K = config.bricks.size();
  if (levels.size() != B || classes.size() != B) {
    throw ShapeError(detail::concat("stack_forward: ", B, " images but ", levels.size(), " levels and ",
                                    classes.size(), " class ids"));
  }
  if (!active.empty() && active.size() != K) {
    throw ShapeError(detail::concat("stack_forward: active set has ", active.size(), " flags for ", K, " bricks"));
  }
  StackOutput<T> out;
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) any = any || active.empty() || active[k];
  if (!any || B == 0) {
    out.fallback = !any;
    for (std::size_t b = 0; b < B; ++b) {
      Tensor<T> z(xt[b].shape());
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<T>(levels[b].fallback_scale * double(xt[b][i]));
      out.x0_hat.push_back(std::move(z));
    }
    return out;
  }

  std::vector<Condition> conds(B);
  for (std::size_t b = 0; b < B; ++b) conds[b] = {levels[b].time_input, classes[b]};
  CondCache<T> ccache;
  const Tensor<T> base = cond_forward(state.params.cond, conds, ccache);
  const Tensor<T> flagged = detail::with_flag(base, state.params.cond.no_prev);
  const Tensor<T> coords = detail::coord_tensor<T>(config);
  const std::size_t C = std::size_t(config.channels), cin = 2 * C + 2;

  std::vector<Tensor<T>> z;  // empty until the first active brick runs
  for (std::size_t k = 0; k < K; ++k) {
    if (!active.empty() && !active[k]) continue;
    if (state.is_external(k)) {
      std::vector<Tensor<T>> next;
      for (std::size_t b = 0; b < B; ++b) next.push_back(state.external[k]->predict(xt[b], levels[b], classes[b]));
      z = std::move(next);
      continue;
    }
    const BrickSpec& spec = config.bricks[k];
    const PatchGrid grid(std::size_t(config.height), std::size_t(config.width), std::size_t(spec.r));
    const std::size_t n = grid.count(), per = std::size_t(spec.r * spec.r);
    BrickBatch<T> batch;
    batch.count = B * n;
    batch.input.resize(batch.count * per * cin);
    batch.cond_row.resize(batch.count);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = b * n + i;
        batch.cond_row[row] = b;
        detail::write_brick_input(xt[b], levels[b].in_scale, z.empty() ? nullptr : &z[b], coords, grid, grid.at(i),
                                  batch.input.data() + row * per * cin);
      }
    }
    BrickCache<T> cache;
    Buffer<T> F;
    brick_forward_batch(spec, state.params.bricks[k], batch, z.empty() ? flagged : base, cache, F);
    std::vector<Tensor<T>> next(B, Tensor<T>(xt[0].shape()));
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        detail::compose_patch(xt[b], levels[b], F.data() + (b * n + i) * per * C, grid, grid.at(i), next[b]);
      }
    }
    z = std::move(next);
  }
  out.x0_hat = std::move(z);
  return out;
}

/// Single-image convenience overload.
template <typename T>
Tensor<T> stack_forward(const Tensor<T>& xt, const NoiseLevel& level, int class_id, const StackState<T>& state,
                        const StackConfig& config, const std::vector<bool>& active = {}) {
  return stack_forward(std::vector<Tensor<T>>{xt}, {level}, {class_id}, state, config, active).x0_hat.front();
}

// ---- training loss ---------------------------------------------------------

/// Everything random about one loss evaluation, drawn up front so the loss
/// itself is a deterministic function of (draw, x0, state).
template <typename T>
struct TrainingDraw {
  std::vector<Tensor<T>> xt;
  std::vector<NoiseLevel> levels;
  std::vector<int> classes;                        // after the null-class drop
  std::vector<double> noise_coord;                 // t (ddpm) or sigma (edm), for diagnostics
  std::vector<std::vector<double>> weights;        // [b][k]
  std::vector<std::vector<std::vector<PatchIndex>>> patches;  // [k][b]
};

template <typename T>
TrainingDraw<T> draw_training_batch(const std::vector<Tensor<T>>& x0, const std::vector<int>& classes,
                                    const StackConfig& config, const NoiseSchedule& schedule, Rng& rng) {
  detail::check_batch(x0, config, "training_loss");
  if (classes.size() != x0.size()) {
    throw ShapeError(detail::concat("training_loss: ", x0.size(), " images but ", classes.size(), " labels"));
  }
  const std::size_t B = x0.size(), K = config.bricks.size();
  TrainingDraw<T> d;
  for (std::size_t b = 0; b < B; ++b) {
    if (classes[b] >= config.num_classes) {
      throw IndexError(detail::concat("training_loss: label ", classes[b], " outside [0, ", config.num_classes, ")"));
    }
    Tensor<T> eps(x0[b].shape());
    std::vector<double> w(K);
    if (config.parameterization == Parameterization::ddpm) {
      const int t = uniform_int(rng, 1, schedule.T());
      d.levels.push_back(ddpm_level(schedule, t));
      d.noise_coord.push_back(t);
      for (std::size_t k = 0; k < K; ++k) w[k] = loss_weight(config.weights, schedule, t, int(k) + 1);
      fill_normal(eps.values(), rng);
      d.xt.push_back(q_sample_alpha(x0[b], schedule.alpha(t), eps));
    } else {
      const double n = std::normal_distribution<double>(0.0, 1.0)(rng);
      const double sigma = std::exp(config.edm.p_mean + config.edm.p_std * n);
      d.levels.push_back(edm_level(sigma, config.edm));
      d.noise_coord.push_back(sigma);
      for (auto& v : w) v = edm_loss_weight(sigma, config.edm);
      fill_normal(eps.values(), rng);
      Tensor<T> xt(x0[b].shape());
      for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<T>(double(x0[b][i]) + sigma * double(eps[i]));
      d.xt.push_back(std::move(xt));
    }
    const bool drop = uniform01(rng) < config.class_drop_prob;
    d.classes.push_back(drop || classes[b] < 0 ? -1 : classes[b]);
    d.weights.push_back(std::move(w));
  }
  d.patches.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& spec = config.bricks[k];
    const PatchGrid grid(std::size_t(config.height), std::size_t(config.width), std::size_t(spec.r));
    const double frac = spec.kind == BrickKind::patch ? config.patch_fraction : 1.0;
    for (std::size_t b = 0; b < B; ++b) d.patches[k].push_back(sample_patch_indices(grid, frac, rng));
  }
  return d;
}

struct LossResult {
  double total = 0.0;
  std::vector<double> per_brick;  // batch-mean weighted MSE of each brick
};

/// Average over bricks of each brick's weighted patch MSE. Missing inputs from
/// the brick below are filled with x0. When `grads` is given, gradients of
/// `total` are accumulated into it (and into unfrozen external bricks).
template <typename T>
LossResult training_loss_on(const TrainingDraw<T>& draw, const std::vector<Tensor<T>>& x0, StackState<T>& state,
                            const StackConfig& config, StackParams<T>* grads = nullptr) {
  check_state(state, config);
  const std::size_t B = x0.size(), K = config.bricks.size(), C = std::size_t(config.channels), cin = 2 * C + 2;
  LossResult res;
  res.per_brick.assign(K, 0.0);
  if (B == 0) return res;

  std::vector<Condition> conds(B);
  for (std::size_t b = 0; b < B; ++b) conds[b] = {draw.levels[b].time_input, draw.classes[b]};
  CondCache<T> ccache;
  const Tensor<T> base = cond_forward(state.params.cond, conds, ccache);
  const Tensor<T> flagged = detail::with_flag(base, state.params.cond.no_prev);
  const Tensor<T> coords = detail::coord_tensor<T>(config);

  struct BrickRun {
    BrickBatch<T> batch;
    BrickCache<T> cache;
    Buffer<T> dF;          // d total / d raw brick output, per sampled patch
    std::vector<Tensor<T>> dz;  // per-image d total / d z^(k) from the loss term
    bool flag = false;
  };
  std::vector<BrickRun> runs(K);
  std::vector<std::vector<Tensor<T>>> z(K);  // filled full-resolution outputs
  const double inv_kb = 1.0 / (double(K) * double(B));

  for (std::size_t k = 0; k < K; ++k) {
    const BrickSpec& spec = config.bricks[k];
    const PatchGrid grid(std::size_t(config.height), std::size_t(config.width), std::size_t(spec.r));
    const std::size_t per = std::size_t(spec.r * spec.r);
    const auto& sel = draw.patches[k];
    auto& run = runs[k];
    std::vector<Tensor<T>> pred(B);
    Buffer<T> buf(per * C);

    if (state.is_external(k)) {
      for (std::size_t b = 0; b < B; ++b) pred[b] = state.external[k]->predict(draw.xt[b], draw.levels[b], draw.classes[b]);
      z[k] = pred;
    } else {
      std::size_t rows = 0;
      for (const auto& s : sel) rows += s.size();
      run.batch.count = rows;
      run.batch.input.resize(rows * per * cin);
      run.batch.cond_row.resize(rows);
      run.flag = k == 0;
      std::size_t row = 0;
      for (std::size_t b = 0; b < B; ++b) {
        for (const auto& p : sel[b]) {
          run.batch.cond_row[row] = b;
          detail::write_brick_input(draw.xt[b], draw.levels[b].in_scale, k == 0 ? nullptr : &z[k - 1][b], coords, grid,
                                    p, run.batch.input.data() + row * per * cin);
          ++row;
        }
      }
      Buffer<T> F;
      brick_forward_batch(spec, state.params.bricks[k], run.batch, run.flag ? flagged : base, run.cache, F);
      row = 0;
      for (std::size_t b = 0; b < B; ++b) {
        pred[b] = x0[b];  // unsampled patches fall back to x0
        for (const auto& p : sel[b]) {
          detail::compose_patch(draw.xt[b], draw.levels[b], F.data() + row * per * C, grid, p, pred[b]);
          ++row;
        }
      }
      z[k] = pred;
      run.dF.assign(rows * per * C, T(0));
    }

    // loss on the sampled patches
    run.dz.assign(B, Tensor<T>());
    double brick_sum = 0.0;
    std::size_t row = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const double n = double(sel[b].size() * per * C);
      const double lambda = draw.weights[b][k];
      double sq = 0.0;
      if (grads) run.dz[b] = Tensor<T>(x0[b].shape());
      for (const auto& p : sel[b]) {
        const std::size_t r0 = grid.row0(p), c0 = grid.col0(p), r = grid.r();
        for (std::size_t y = 0; y < r; ++y) {
          for (std::size_t x = 0; x < r; ++x) {
            for (std::size_t c = 0; c < C; ++c) {
              const double diff = double(pred[b](r0 + y, c0 + x, c)) - double(x0[b](r0 + y, c0 + x, c));
              sq += diff * diff;
              if (grads) run.dz[b](r0 + y, c0 + x, c) = static_cast<T>(inv_kb * lambda * 2.0 * diff / n);
            }
          }
        }
        ++row;
      }
      const double term = lambda * sq / n;
      if (!std::isfinite(term)) {
        throw NumericError(detail::concat("non-finite loss at ",
                                          config.parameterization == Parameterization::ddpm ? "t=" : "sigma=",
                                          draw.noise_coord[b], ", brick k=", k + 1, ", batch index ", b));
      }
      brick_sum += term;
    }
    res.per_brick[k] = brick_sum / double(B);
    res.total += res.per_brick[k] / double(K);
  }

  if (!grads) return res;

  // backward, top to bottom; dz[k] accumulates the contribution of brick k+1
  Tensor<T> dbase({B, std::size_t(config.model_dim())});
  const bool e2e = config.training == TrainingMode::end_to_end;
  for (std::size_t k = K; k-- > 0;) {
    const BrickSpec& spec = config.bricks[k];
    const PatchGrid grid(std::size_t(config.height), std::size_t(config.width), std::size_t(spec.r));
    const std::size_t per = std::size_t(spec.r * spec.r);
    auto& run = runs[k];
    const auto& sel = draw.patches[k];

    if (state.is_external(k)) {
      auto& ext = *state.external[k];
      if (!ext.frozen) {
        for (std::size_t b = 0; b < B; ++b) ext.backward(draw.xt[b], draw.levels[b], draw.classes[b], run.dz[b]);
      }
      continue;
    }
    std::size_t row = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const double out_scale = draw.levels[b].out_scale;
      for (const auto& p : sel[b]) {
        T* dF = run.dF.data() + row * per * C;
        extract_patch(run.dz[b], grid, p, dF);
        if (out_scale != 1.0) {
          for (std::size_t i = 0; i < per * C; ++i) dF[i] = static_cast<T>(out_scale * double(dF[i]));
        }
        ++row;
      }
    }
    const bool want_input = e2e && k > 0 && !runs[k - 1].dz.empty();
    Buffer<T> dinput;
    Tensor<T> dcond({B, std::size_t(config.model_dim())});
    brick_backward_batch(spec, state.params.bricks[k], run.batch, run.flag ? flagged : base, run.cache, run.dF,
                         grads->bricks[k], want_input ? &dinput : nullptr, dcond);
    for (std::size_t i = 0; i < dbase.size(); ++i) dbase[i] += dcond[i];
    if (run.flag) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < dcond.dim(1); ++i) grads->cond.no_prev[i] += dcond(b, i);
    }
    if (want_input) {
      // previous-prediction channels flow into z^(k-1); pixels filled from x0
      // are masked out when brick k-1 reads its own sampled patches.
      row = 0;
      for (std::size_t b = 0; b < B; ++b) {
        auto& dz_prev = runs[k - 1].dz[b];
        for (const auto& p : sel[b]) {
          const T* src = dinput.data() + row * per * cin;
          const std::size_t r0 = grid.row0(p), c0 = grid.col0(p), r = grid.r();
          for (std::size_t y = 0; y < r; ++y)
            for (std::size_t x = 0; x < r; ++x)
              for (std::size_t c = 0; c < C; ++c) dz_prev(r0 + y, c0 + x, c) += src[(y * r + x) * cin + C + c];
          ++row;
        }
      }
    }
  }
  cond_backward(state.params.cond, ccache, dbase, grads->cond);
  return res;
}

template <typename T>
LossResult training_loss(const std::vector<Tensor<T>>& x0, const std::vector<int>& classes, StackState<T>& state,
                         const StackConfig& config, const NoiseSchedule& schedule, Rng& rng,
                         StackParams<T>* grads = nullptr) {
  const auto draw = draw_training_batch(x0, classes, config, schedule, rng);
  return training_loss_on(draw, x0, state, config, grads);
}

}  // namespace lego
