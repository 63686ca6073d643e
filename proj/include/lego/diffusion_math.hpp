// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lego/errors.hpp"
#include "lego/tensor.hpp"

namespace lego {

/// Discrete-time schedule of cumulative signal fractions. alpha(0) is pinned
/// to 1 so that boundary formulas at t = 1 stay total. Stored in double.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// `alphas` holds alpha(1..T).
  explicit NoiseSchedule(const std::vector<double>& alphas) {
    if (alphas.empty()) throw ParameterError("schedule: T must be >= 1");
    alpha_.reserve(alphas.size() + 1);
    alpha_.push_back(1.0);
    alpha_.insert(alpha_.end(), alphas.begin(), alphas.end());
    beta_.assign(alpha_.size(), 0.0);
    for (std::size_t t = 1; t < alpha_.size(); ++t) {
      if (!(alpha_[t] > 0.0) || !(alpha_[t] < alpha_[t - 1])) {
        throw ParameterError(detail::concat("schedule: alpha must be strictly decreasing in (0,1]; ",
                                            "violated at t=", t, " (alpha=", alpha_[t], ")"));
      }
      beta_[t] = 1.0 - alpha_[t] / alpha_[t - 1];
    }
  }

  int T() const noexcept { return static_cast<int>(alpha_.size()) - 1; }

  double alpha(int t) const {
    check(t, 0);
    return alpha_[static_cast<std::size_t>(t)];
  }
  double beta(int t) const {
    check(t, 1);
    return beta_[static_cast<std::size_t>(t)];
  }
  const std::vector<double>& alphas() const noexcept { return alpha_; }

 private:
  void check(int t, int lo) const {
    if (t < lo || t > T()) {
      throw IndexError(detail::concat("timestep ", t, " outside [", lo, ", ", T(), "]"));
    }
  }

  std::vector<double> alpha_;
  std::vector<double> beta_;
};

/// Per-step betas interpolate linearly over t = 1..T; alpha is their running
/// product of (1 - beta).
inline NoiseSchedule make_linear_schedule(int T = 1000, double beta_start = 1e-4,
                                          double beta_end = 0.02) {
  if (T < 1) throw ParameterError(detail::concat("linear schedule: T must be >= 1, got ", T));
  if (!(beta_start > 0.0)) {
    throw ParameterError(detail::concat("linear schedule: beta_start must be > 0, got ", beta_start));
  }
  if (!(beta_end >= beta_start)) {
    throw ParameterError(detail::concat("linear schedule: beta_end must be >= beta_start, got ",
                                        beta_end));
  }
  if (!(beta_end < 1.0)) {
    throw ParameterError(detail::concat("linear schedule: beta_end must be < 1, got ", beta_end));
  }
  std::vector<double> alphas(static_cast<std::size_t>(T));
  double acc = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
    acc *= 1.0 - beta;
    alphas[static_cast<std::size_t>(t - 1)] = acc;
  }
  return NoiseSchedule(alphas);
}

inline double snr_of_alpha(double alpha) {
  if (alpha >= 1.0) throw DomainError("snr: degenerate zero-noise step (alpha = 1)");
  return alpha / (1.0 - alpha);
}

inline double snr(const NoiseSchedule& schedule, int t) {
  if (t < 1 || t > schedule.T()) {
    throw IndexError(detail::concat("snr: timestep ", t, " outside [1, ", schedule.T(), "]"));
  }
  return snr_of_alpha(schedule.alpha(t));
}

/// sqrt(alpha) * x0 + sqrt(1 - alpha) * eps, for an explicit signal level.
template <typename T>
Tensor<T> q_sample_alpha(const Tensor<T>& x0, double alpha, const Tensor<T>& eps) {
  require_same_shape(x0.shape(), eps.shape(), "q_sample");
  const double a = std::sqrt(alpha), b = std::sqrt(1.0 - alpha);
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(a * double(x0[i]) + b * double(eps[i]));
  }
  return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                   const NoiseSchedule& schedule) {
  return q_sample_alpha(x0, schedule.alpha(t), eps);
}

/// Coefficients of q(x_{t'} | x_t, x0) between two signal levels with
/// alpha_prev >= alpha_t. Used for both unit and strided steps.
struct PosteriorCoefficients {
  double x0_coef = 0.0;
  double xt_coef = 0.0;
  double variance = 0.0;
};

inline PosteriorCoefficients posterior_coefficients(double alpha_t, double alpha_prev) {
  if (!(alpha_t > 0.0) || !(alpha_prev >= alpha_t) || alpha_prev > 1.0 || alpha_t >= 1.0) {
    throw DomainError(detail::concat("posterior: need 0 < alpha_t <= alpha_prev <= 1, alpha_t < 1; ",
                                     "got alpha_t=", alpha_t, " alpha_prev=", alpha_prev));
  }
  const double step = 1.0 - alpha_t / alpha_prev;
  PosteriorCoefficients c;
  c.x0_coef = std::sqrt(alpha_prev) / (1.0 - alpha_t) * step;
  c.xt_coef = (1.0 - alpha_prev) * std::sqrt(alpha_t) / ((1.0 - alpha_t) * std::sqrt(alpha_prev));
  c.variance = (1.0 - alpha_prev) / (1.0 - alpha_t) * step;
  return c;
}

template <typename T>
struct Posterior {
  Tensor<T> mean;
  double variance = 0.0;
};

template <typename T>
Posterior<T> posterior_params(const Tensor<T>& x0, const Tensor<T>& xt, int t,
                              const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.T()) {
    throw IndexError(detail::concat("posterior: timestep ", t, " outside [1, ", schedule.T(), "]"));
  }
  require_same_shape(x0.shape(), xt.shape(), "posterior_params");
  const auto c = posterior_coefficients(schedule.alpha(t), schedule.alpha(t - 1));
  Posterior<T> p{Tensor<T>(x0.shape()), c.variance};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    p.mean[i] = static_cast<T>(c.x0_coef * double(x0[i]) + c.xt_coef * double(xt[i]));
  }
  return p;
}

template <typename T>
Tensor<T> x0_from_eps_alpha(const Tensor<T>& xt, const Tensor<T>& eps_hat, double alpha) {
  if (!(alpha > 0.0)) throw DomainError(detail::concat("x0_from_eps: alpha must be > 0, got ", alpha));
  require_same_shape(xt.shape(), eps_hat.shape(), "x0_from_eps");
  const double inv = 1.0 / std::sqrt(alpha), k = std::sqrt(1.0 - alpha) / std::sqrt(alpha);
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(double(xt[i]) * inv - k * double(eps_hat[i]));
  }
  return out;
}

template <typename T>
Tensor<T> x0_from_eps(const Tensor<T>& xt, const Tensor<T>& eps_hat, int t,
                      const NoiseSchedule& schedule) {
  return x0_from_eps_alpha(xt, eps_hat, schedule.alpha(t));
}

/// Inverse of x0_from_eps: the noise implied by an x0 estimate.
template <typename T>
Tensor<T> eps_from_x0_alpha(const Tensor<T>& xt, const Tensor<T>& x0_hat, double alpha) {
  if (!(alpha > 0.0) || !(alpha < 1.0)) {
    throw DomainError(detail::concat("eps_from_x0: alpha must be in (0,1), got ", alpha));
  }
  require_same_shape(xt.shape(), x0_hat.shape(), "eps_from_x0");
  const double a = std::sqrt(alpha), b = std::sqrt(1.0 - alpha);
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>((double(xt[i]) - a * double(x0_hat[i])) / b);
  }
  return out;
}

enum class WeightMode { unit, snr_delta, custom };

struct LossWeights {
  WeightMode mode = WeightMode::unit;
  /// custom table keyed by (t, k); k is the 1-based brick index.
  std::map<std::pair<int, int>, double> table;
};

inline double loss_weight(const LossWeights& weights, const NoiseSchedule& schedule, int t, int k) {
  if (t < 1 || t > schedule.T()) {
    throw IndexError(detail::concat("loss_weight: timestep ", t, " outside [1, ", schedule.T(), "]"));
  }
  switch (weights.mode) {
    case WeightMode::unit:
      return 1.0;
    case WeightMode::snr_delta: {
      if (t == 1) throw DomainError("loss_weight: snr-delta is unbounded at t = 1 (SNR_0 infinite)");
      return (snr(schedule, t - 1) - snr(schedule, t)) / 2.0;
    }
    case WeightMode::custom: {
      auto it = weights.table.find({t, k});
      if (it == weights.table.end()) {
        throw ConfigError(detail::concat("loss_weight: no custom weight for (t=", t, ", k=", k, ")"));
      }
      if (!(it->second > 0.0) || !std::isfinite(it->second)) {
        throw ConfigError(detail::concat("loss_weight: custom weight for (t=", t, ", k=", k,
                                         ") must be positive and finite"));
      }
      return it->second;
    }
  }
  return 1.0;
}

/// (SNR_{t-1} - SNR_t) / 2 evaluated directly on two signal levels.
inline double snr_delta_weight(double alpha_prev, double alpha_t) {
  return (snr_of_alpha(alpha_prev) - snr_of_alpha(alpha_t)) / 2.0;
}

struct EdmParams {
  double sigma_data = 0.5;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  /// log-normal training noise distribution
  double p_mean = -1.2;
  double p_std = 1.2;

  void validate() const {
    if (!(sigma_data > 0) || !(sigma_min > 0) || !(sigma_max > sigma_min) || !(rho > 0) ||
        !(p_std > 0)) {
      throw ParameterError(detail::concat("edm params: need sigma_data, sigma_min, rho, p_std > 0 and ",
                                          "sigma_min < sigma_max; got sigma_data=", sigma_data,
                                          " sigma_min=", sigma_min, " sigma_max=", sigma_max,
                                          " rho=", rho));
    }
  }
};

struct EdmCoefficients {
  double c_skip = 0.0;
  double c_out = 0.0;
  double c_in = 0.0;
  double c_noise = 0.0;
};

inline EdmCoefficients edm_precondition(double sigma, const EdmParams& p) {
  if (!(sigma > 0.0)) {
    throw DomainError(detail::concat("edm_precondition: c_noise needs sigma > 0, got ", sigma));
  }
  const double s2 = sigma * sigma, d2 = p.sigma_data * p.sigma_data;
  EdmCoefficients c;
  c.c_skip = d2 / (s2 + d2);
  c.c_out = sigma * p.sigma_data / std::sqrt(s2 + d2);
  c.c_in = 1.0 / std::sqrt(s2 + d2);
  c.c_noise = std::log(sigma) / 4.0;
  return c;
}

/// Loss weight that makes the preconditioned objective unit-variance.
inline double edm_loss_weight(double sigma, const EdmParams& p) {
  const double sd = p.sigma_data;
  return (sigma * sigma + sd * sd) / ((sigma * sd) * (sigma * sd));
}

/// rho-warped sigma grid over `steps` points, followed by a terminal 0.
inline std::vector<double> edm_sigma_grid(const EdmParams& p, int steps) {
  p.validate();
  if (steps < 1) throw ParameterError(detail::concat("edm grid: steps must be >= 1, got ", steps));
  std::vector<double> sigmas(static_cast<std::size_t>(steps) + 1, 0.0);
  const double hi = std::pow(p.sigma_max, 1.0 / p.rho), lo = std::pow(p.sigma_min, 1.0 / p.rho);
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : double(i) / double(steps - 1);
    sigmas[static_cast<std::size_t>(i)] = std::pow(hi + frac * (lo - hi), p.rho);
  }
  return sigmas;
}

}  // namespace lego
