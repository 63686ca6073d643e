// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Row-major layer primitives with explicit backward passes. Activations are
// laid out as [rows x features]; weights follow the (out x in) convention.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "lego/tensor.hpp"

namespace lego::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

inline constexpr double kLayerNormEps = 1e-6;

/// Y[n x out] = X[n x in] W^T + b
template <typename T>
void linear_forward(const T* X, std::size_t n, const Tensor<T>& W, const Tensor<T>& b, T* Y) {
  const auto out = static_cast<Eigen::Index>(W.dim(0)), in = static_cast<Eigen::Index>(W.dim(1));
  ConstMatMap<T> x(X, static_cast<Eigen::Index>(n), in);
  ConstMatMap<T> w(W.data(), out, in);
  MatMap<T> y(Y, static_cast<Eigen::Index>(n), out);
  y.noalias() = x * w.transpose();
  y.rowwise() += ConstVecMap<T>(b.data(), out);
}

/// Accumulates dW, db; writes (or adds, if `accumulate`) dX when non-null.
template <typename T>
void linear_backward(const T* X, std::size_t n, const Tensor<T>& W, const T* dY, T* dX,
                     Tensor<T>& dW, Tensor<T>& db, bool accumulate = false) {
  const auto out = static_cast<Eigen::Index>(W.dim(0)), in = static_cast<Eigen::Index>(W.dim(1));
  const auto rows = static_cast<Eigen::Index>(n);
  ConstMatMap<T> x(X, rows, in);
  ConstMatMap<T> dy(dY, rows, out);
  MatMap<T>(dW.data(), out, in).noalias() += dy.transpose() * x;
  VecMap<T>(db.data(), out) += dy.colwise().sum();
  if (dX) {
    MatMap<T> dx(dX, rows, in);
    if (accumulate) {
      dx.noalias() += dy * ConstMatMap<T>(W.data(), out, in);
    } else {
      dx.noalias() = dy * ConstMatMap<T>(W.data(), out, in);
    }
  }
}

/// Affine-free layer norm. Stores normalized rows and per-row 1/std.
template <typename T>
void layernorm_forward(const T* X, std::size_t n, std::size_t D, T* Xhat, T* rstd) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = X + r * D;
    T mean = 0;
    for (std::size_t i = 0; i < D; ++i) mean += x[i];
    mean /= T(D);
    T var = 0;
    for (std::size_t i = 0; i < D; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= T(D);
    const T rs = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[r] = rs;
    T* y = Xhat + r * D;
    for (std::size_t i = 0; i < D; ++i) y[i] = (x[i] - mean) * rs;
  }
}

/// dX += rstd * (dXhat - mean(dXhat) - Xhat * mean(dXhat * Xhat))
template <typename T>
void layernorm_backward(const T* Xhat, const T* rstd, const T* dXhat, std::size_t n, std::size_t D,
                        T* dX) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xh = Xhat + r * D;
    const T* g = dXhat + r * D;
    T mg = 0, mgx = 0;
    for (std::size_t i = 0; i < D; ++i) {
      mg += g[i];
      mgx += g[i] * xh[i];
    }
    mg /= T(D);
    mgx /= T(D);
    T* dx = dX + r * D;
    for (std::size_t i = 0; i < D; ++i) dx[i] += rstd[r] * (g[i] - mg - xh[i] * mgx);
  }
}

/// Elementwise tanh-GELU over n values.
template <typename T>
void gelu_forward(const T* x, std::size_t n, T* y) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> X(x, static_cast<Eigen::Index>(n));
  constexpr T k = T(0.7978845608028654);
  Eigen::Map<Arr>(y, static_cast<Eigen::Index>(n)) = T(0.5) * X * (T(1) + (k * (X + T(0.044715) * X.cube())).tanh());
}

/// dx = dy * gelu'(x).
template <typename T>
void gelu_backward(const T* x, const T* dy, std::size_t n, T* dx) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> X(x, static_cast<Eigen::Index>(n)), G(dy, static_cast<Eigen::Index>(n));
  constexpr T k = T(0.7978845608028654);
  const Arr th = (k * (X + T(0.044715) * X.cube())).tanh();
  Eigen::Map<Arr>(dx, static_cast<Eigen::Index>(n)) =
      G * (T(0.5) * (T(1) + th) + T(0.5) * X * (T(1) - th.square()) * k * (T(1) + T(3 * 0.044715) * X.square()));
}

template <typename T>
inline T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

/// Multi-head self-attention over independent sequences of length S.
/// qkv rows are [q | k | v], each of width d; probs is [seqs x heads x S x S].
template <typename T>
void attention_forward(const T* qkv, std::size_t seqs, std::size_t S, std::size_t d,
                       std::size_t heads, T* out, T* probs) {
  const auto dh = static_cast<Eigen::Index>(d / heads), n = static_cast<Eigen::Index>(S);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d)), out_stride(static_cast<Eigen::Index>(d));
  const T scale = T(1) / std::sqrt(T(dh));
  for (std::size_t p = 0; p < seqs; ++p) {
    const T* base = qkv + p * S * 3 * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * std::size_t(dh);
      ConstStridedMap<T> q(base + off, n, dh, in_stride), k(base + d + off, n, dh, in_stride),
          v(base + 2 * d + off, n, dh, in_stride);
      MatMap<T> a(probs + ((p * heads + h) * S) * S, n, n);
      a.noalias() = q * k.transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = a.row(i).array();
        row = ((row - row.maxCoeff()) * scale).exp();
        row /= row.sum();
      }
      StridedMap<T>(out + p * S * d + off, n, dh, out_stride).noalias() = a * v;
    }
  }
}

/// Writes dqkv (overwrites).
template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dout, std::size_t seqs,
                        std::size_t S, std::size_t d, std::size_t heads, T* dqkv) {
  const auto dh = static_cast<Eigen::Index>(d / heads), n = static_cast<Eigen::Index>(S);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d)), out_stride(static_cast<Eigen::Index>(d));
  const T scale = T(1) / std::sqrt(T(dh));
  RowMat<T> da(n, n);
  for (std::size_t p = 0; p < seqs; ++p) {
    const T* base = qkv + p * S * 3 * d;
    T* dbase = dqkv + p * S * 3 * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * std::size_t(dh);
      ConstStridedMap<T> q(base + off, n, dh, in_stride), k(base + d + off, n, dh, in_stride),
          v(base + 2 * d + off, n, dh, in_stride), go(dout + p * S * d + off, n, dh, out_stride);
      ConstMatMap<T> a(probs + ((p * heads + h) * S) * S, n, n);
      StridedMap<T>(dbase + 2 * d + off, n, dh, in_stride).noalias() = a.transpose() * go;
      da.noalias() = go * v.transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        const T dot = (da.row(i).array() * a.row(i).array()).sum();
        da.row(i).array() = a.row(i).array() * (da.row(i).array() - dot) * scale;
      }
      StridedMap<T>(dbase + off, n, dh, in_stride).noalias() = da * k;
      StridedMap<T>(dbase + d + off, n, dh, in_stride).noalias() = da.transpose() * q;
    }
  }
}

/// [cos(t f_0..), sin(t f_0..)] with f_i = 10000^{-i/half}.
template <typename T>
void timestep_embedding(double t, std::size_t dim, T* out) {
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
    out[i] = static_cast<T>(std::cos(t * f));
    out[half + i] = static_cast<T>(std::sin(t * f));
  }
  if (dim % 2) out[dim - 1] = T(0);
}

}  // namespace lego::nn
