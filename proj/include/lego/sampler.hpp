// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "lego/diffusion_math.hpp"
#include "lego/skip.hpp"
#include "lego/stack.hpp"

namespace lego {

/// (1 - s) * uncond + s * cond; exact at s = 0 and s = 1.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& out_cond, const Tensor<T>& out_uncond, double scale) {
  require_same_shape(out_cond.shape(), out_uncond.shape(), "cfg_combine");
  Tensor<T> out(out_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>((1.0 - scale) * double(out_uncond[i]) + scale * double(out_cond[i]));
  }
  return out;
}

inline void cfg_combine_inplace(std::vector<double>& cond, const std::vector<double>& uncond, double scale) {
  if (cond.size() != uncond.size()) {
    throw ShapeError(detail::concat("cfg_combine: ", cond.size(), " vs ", uncond.size(), " values"));
  }
  for (std::size_t i = 0; i < cond.size(); ++i) cond[i] = (1.0 - scale) * uncond[i] + scale * cond[i];
}

/// x = a * x0 + s * eps at the current noise level: (sqrt(alpha), sqrt(1-alpha))
/// for DDPM, (1, sigma) for EDM.
struct EpsFrame {
  double a = 1.0;
  double s = 1.0;
};

/// Noise prediction for a batch sharing one noise level, in double.
template <typename T>
using EpsModel = std::function<std::vector<std::vector<double>>(const std::vector<Tensor<T>>& x, const NoiseLevel& level,
                                                                const EpsFrame& frame, const std::vector<bool>& active)>;

template <typename T>
using NoiseSource = std::function<void(std::span<T>)>;

template <typename T>
NoiseSource<T> rng_noise(Rng& rng) {
  return [&rng](std::span<T> out) { fill_normal(out, rng); };
}

/// eps implied by an x0 estimate.
template <typename T>
std::vector<double> eps_of(const Tensor<T>& x, const Tensor<T>& x0_hat, const EpsFrame& f) {
  std::vector<double> e(x.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = (double(x[i]) - f.a * double(x0_hat[i])) / f.s;
  return e;
}

/// Stack network as an eps model. Every image, and with a guidance scale its
/// null-class pass, is evaluated in its own forward call: GEMM blocking depends
/// on the row count, so batching images together would make an image's result
/// depend on its batch mates, the worker split and whether guidance is on.
/// `nfe` counts evaluations per image.
template <typename T>
EpsModel<T> stack_eps_model(const StackState<T>& state, const StackConfig& config, std::vector<int> classes,
                            std::optional<double> cfg_scale, std::size_t* nfe) {
  return [&state, &config, classes = std::move(classes), cfg_scale, nfe](
             const std::vector<Tensor<T>>& x, const NoiseLevel& level, const EpsFrame& frame,
             const std::vector<bool>& active) {
    const std::size_t B = x.size();
    if (classes.size() != B) {
      throw ShapeError(detail::concat("eps model: ", B, " images but ", classes.size(), " class ids"));
    }
    const std::vector<NoiseLevel> levels{level};
    auto x0_hat = [&](const Tensor<T>& xb, int cls) {
      return std::move(stack_forward(std::vector<Tensor<T>>{xb}, levels, {cls}, state, config, active).x0_hat[0]);
    };
    std::vector<std::vector<double>> eps(B);
    for (std::size_t b = 0; b < B; ++b) {
      eps[b] = eps_of(x[b], x0_hat(x[b], classes[b]), frame);
      if (cfg_scale) cfg_combine_inplace(eps[b], eps_of(x[b], x0_hat(x[b], -1), frame), *cfg_scale);
    }
    if (nfe) *nfe += cfg_scale ? 2 : 1;
    return eps;
  };
}

// ---- DDPM ------------------------------------------------------------------

/// Ascending uniform-stride subset of 1..T with n entries, always containing T
/// (and 1 when n > 1).
inline std::vector<int> ddpm_timesteps(int T, int n) {
  if (n < 1 || n > T) throw ParameterError(detail::concat("ddpm sampler: steps must be in [1, ", T, "], got ", n));
  std::vector<int> ts(std::size_t(n), T);
  for (int i = 0; i < n && n > 1; ++i) {
    ts[std::size_t(i)] = 1 + int(std::lround(double(i) * double(T - 1) / double(n - 1)));
  }
  return ts;
}

/// One strided reverse step from an eps prediction. `z` is null at the final
/// step, which returns the posterior mean.
template <typename T>
void ddpm_update(Tensor<T>& x, const std::vector<double>& eps, double alpha_t, double alpha_prev, const T* z) {
  const auto c = posterior_coefficients(alpha_t, alpha_prev);
  const double inv = 1.0 / std::sqrt(alpha_t), k = std::sqrt(1.0 - alpha_t) / std::sqrt(alpha_t);
  const double sd = std::sqrt(c.variance);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = double(x[i]);
    const double x0 = xi * inv - k * eps[i];
    double v = c.x0_coef * x0 + c.xt_coef * xi;
    if (z) v += sd * double(z[i]);
    x[i] = static_cast<T>(v);
  }
}

template <typename T>
void require_finite(const std::vector<Tensor<T>>& xs, std::size_t step, const char* who) {
  for (const auto& x : xs)
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!std::isfinite(double(x[i]))) throw NumericError(detail::concat(who, ": non-finite value at step ", step));
}

template <typename T>
struct SampleResult {
  std::vector<Tensor<T>> images;
  std::size_t nfe = 0;  // network evaluations per image
};

/// Ancestral sampling over the strided sub-chain. One noise source per image.
template <typename T>
std::vector<Tensor<T>> ddpm_sample_eps(const EpsModel<T>& model, const Shape& shape, const NoiseSchedule& schedule,
                                       const SkipSchedule& skip, int n_steps, std::vector<NoiseSource<T>>& noise) {
  if (skip.T != schedule.T()) {
    throw ConfigError(detail::concat("ddpm sampler: skip schedule spans T=", skip.T, ", schedule has T=", schedule.T()));
  }
  const auto ts = ddpm_timesteps(schedule.T(), n_steps);
  const std::size_t B = noise.size();
  std::vector<Tensor<T>> x(B, Tensor<T>(shape));
  for (std::size_t b = 0; b < B; ++b) noise[b](x[b].values());
  Tensor<T> z(shape);
  for (std::size_t i = ts.size(); i-- > 0;) {
    const int t = ts[i];
    const double at = schedule.alpha(t), ap = i > 0 ? schedule.alpha(ts[i - 1]) : 1.0;
    const auto eps = model(x, ddpm_level_alpha(at, double(t)), {std::sqrt(at), std::sqrt(1.0 - at)}, skip.active(t));
    for (std::size_t b = 0; b < B; ++b) {
      if (i > 0) noise[b](z.values());
      ddpm_update(x[b], eps[b], at, ap, i > 0 ? z.data() : nullptr);
    }
    require_finite(x, ts.size() - i, "ddpm_sample");
  }
  return x;
}

/// Splits `count` images across worker threads. Every image draws from its own
/// stream derived from one value of `rng`, so results do not depend on the
/// worker count.
template <typename T, typename Run>
std::vector<Tensor<T>> run_partitioned(std::size_t count, int workers, Rng& rng, Run&& run) {
  const std::uint64_t base = rng();
  std::vector<Rng> streams;
  for (std::size_t b = 0; b < count; ++b) streams.emplace_back(derive_seed(base, b));
  std::vector<Tensor<T>> out(count);
  const std::size_t W = std::max<std::size_t>(1, std::min<std::size_t>(std::size_t(std::max(workers, 1)), count));
  auto job = [&](std::size_t lo, std::size_t hi) {
    std::vector<NoiseSource<T>> noise;
    for (std::size_t b = lo; b < hi; ++b) noise.push_back(rng_noise<T>(streams[b]));
    auto imgs = run(lo, hi, noise);
    for (std::size_t b = lo; b < hi; ++b) out[b] = std::move(imgs[b - lo]);
  };
  if (W == 1) {
    job(0, count);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(W);
  for (std::size_t w = 0; w < W; ++w) {
    const std::size_t lo = count * w / W, hi = count * (w + 1) / W;
    pool.emplace_back([&, w, lo, hi] {
      try {
        job(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

template <typename T>
SampleResult<T> ddpm_sample(const StackState<T>& state, const StackConfig& config, const NoiseSchedule& schedule,
                            const SkipSchedule& skip, std::optional<double> cfg_scale, int n_steps,
                            const std::vector<int>& classes, Rng& rng, int workers = 1) {
  if (config.parameterization != Parameterization::ddpm) throw ConfigError("ddpm_sample: stack is configured for edm");
  const Shape shape{std::size_t(config.height), std::size_t(config.width), std::size_t(config.channels)};
  std::vector<std::size_t> nfe(classes.size(), 0);
  SampleResult<T> res;
  res.images = run_partitioned<T>(classes.size(), workers, rng, [&](std::size_t lo, std::size_t hi, auto& noise) {
    std::vector<int> cls(classes.begin() + long(lo), classes.begin() + long(hi));
    auto model = stack_eps_model(state, config, cls, cfg_scale, &nfe[lo]);
    return ddpm_sample_eps<T>(model, shape, schedule, skip, n_steps, noise);
  });
  res.nfe = classes.empty() ? 0 : nfe[0];
  return res;
}

// ---- EDM -------------------------------------------------------------------

struct EdmSamplerParams {
  int steps = 18;
  double s_churn = 0.0;
  double s_min = 0.0;
  double s_max = std::numeric_limits<double>::infinity();
  double s_noise = 1.0;

  void validate() const {
    if (steps < 1 || s_churn < 0.0 || s_min < 0.0 || s_min > s_max) {
      throw ParameterError(detail::concat("edm sampler: need steps >= 1, s_churn >= 0, 0 <= s_min <= s_max; got steps=",
                                          steps, " s_churn=", s_churn, " s_min=", s_min, " s_max=", s_max));
    }
  }
};

/// Called after every Heun step with (step index, sigma reached, state).
template <typename T>
using StepObserver = std::function<void(int, double, const std::vector<Tensor<T>>&)>;

/// Stochastic second-order Heun sampler. Step i uses the skip schedule at
/// t = steps - i, so `skip.T` must equal `sp.steps`.
template <typename T>
std::vector<Tensor<T>> edm_heun_sample_eps(const EpsModel<T>& model, const Shape& shape, const EdmParams& edm,
                                           const EdmSamplerParams& sp, const SkipSchedule& skip,
                                           std::vector<NoiseSource<T>>& noise, const StepObserver<T>& observe = {}) {
  sp.validate();
  if (skip.T != sp.steps) {
    throw ConfigError(detail::concat("edm sampler: skip schedule spans T=", skip.T, ", sampler has ", sp.steps, " steps"));
  }
  const auto sig = edm_sigma_grid(edm, sp.steps);
  const std::size_t B = noise.size(), N = std::size_t(sp.steps);
  std::vector<Tensor<T>> x(B, Tensor<T>(shape));
  for (std::size_t b = 0; b < B; ++b) {
    noise[b](x[b].values());
    for (auto& v : x[b].values()) v = static_cast<T>(double(v) * sig[0]);
  }
  const double gamma_max = std::min(sp.s_churn / double(N), std::sqrt(2.0) - 1.0);
  Tensor<T> z(shape);
  std::vector<Tensor<T>> xhat(B), xnext(B);
  for (std::size_t i = 0; i < N; ++i) {
    const double t_cur = sig[i], t_next = sig[i + 1];
    const auto active = skip.active(int(N - i));
    const double gamma = (t_cur >= sp.s_min && t_cur <= sp.s_max) ? gamma_max : 0.0;
    const double t_hat = t_cur + gamma * t_cur;
    for (std::size_t b = 0; b < B; ++b) {
      xhat[b] = x[b];
      if (gamma > 0.0) {
        noise[b](z.values());
        const double k = std::sqrt(t_hat * t_hat - t_cur * t_cur) * sp.s_noise;
        for (std::size_t j = 0; j < z.size(); ++j) xhat[b][j] = static_cast<T>(double(x[b][j]) + k * double(z[j]));
      }
    }
    const auto d = model(xhat, edm_level(t_hat, edm), {1.0, t_hat}, active);
    for (std::size_t b = 0; b < B; ++b) {
      xnext[b] = Tensor<T>(shape);
      for (std::size_t j = 0; j < z.size(); ++j) {
        xnext[b][j] = static_cast<T>(double(xhat[b][j]) + (t_next - t_hat) * d[b][j]);
      }
    }
    if (i + 1 < N) {
      const auto d2 = model(xnext, edm_level(t_next, edm), {1.0, t_next}, active);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < z.size(); ++j) {
          xnext[b][j] =
              static_cast<T>(double(xhat[b][j]) + (t_next - t_hat) * (0.5 * d[b][j] + 0.5 * d2[b][j]));
        }
      }
    }
    x.swap(xnext);
    require_finite(x, i + 1, "edm_heun_sample");
    if (observe) observe(int(i), t_next, x);
  }
  return x;
}

template <typename T>
SampleResult<T> edm_heun_sample(const StackState<T>& state, const StackConfig& config, const EdmParams& edm,
                                const EdmSamplerParams& sp, const SkipSchedule& skip, std::optional<double> cfg_scale,
                                const std::vector<int>& classes, Rng& rng, int workers = 1) {
  if (config.parameterization != Parameterization::edm) throw ConfigError("edm_heun_sample: stack is configured for ddpm");
  const Shape shape{std::size_t(config.height), std::size_t(config.width), std::size_t(config.channels)};
  std::vector<std::size_t> nfe(classes.size(), 0);
  SampleResult<T> res;
  res.images = run_partitioned<T>(classes.size(), workers, rng, [&](std::size_t lo, std::size_t hi, auto& noise) {
    std::vector<int> cls(classes.begin() + long(lo), classes.begin() + long(hi));
    auto model = stack_eps_model(state, config, cls, cfg_scale, &nfe[lo]);
    return edm_heun_sample_eps<T>(model, shape, edm, sp, skip, noise);
  });
  res.nfe = classes.empty() ? 0 : nfe[0];
  return res;
}

}  // namespace lego
