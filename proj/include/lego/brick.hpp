// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "lego/config.hpp"
#include "lego/nn.hpp"
#include "lego/rng.hpp"
#include "lego/tensor.hpp"

namespace lego {

/// Non-owning (name, tensor) handle; the unit of checkpointing and optimization.
template <typename T>
struct Named {
  std::string name;
  Tensor<T>* tensor;
};

namespace detail {

template <typename T>
void xavier_uniform(Tensor<T>& w, Rng& rng) {
  const double fan_out = double(w.dim(0)), fan_in = double(w.dim(1));
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : w.values()) v = static_cast<T>(u(rng));
}

template <typename T>
void normal_init(Tensor<T>& w, double stddev, Rng& rng) {
  fill_normal(w.values(), rng);
  for (auto& v : w.values()) v = static_cast<T>(double(v) * stddev);
}

}  // namespace detail

// ---- parameters ------------------------------------------------------------

template <typename T>
struct BlockParams {
  Tensor<T> qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b, ada_w, ada_b;

  static BlockParams zeros(std::size_t d, std::size_t hidden) {
    return {Tensor<T>({3 * d, d}), Tensor<T>({3 * d}), Tensor<T>({d, d}),      Tensor<T>({d}),
            Tensor<T>({hidden, d}), Tensor<T>({hidden}), Tensor<T>({d, hidden}), Tensor<T>({d}),
            Tensor<T>({6 * d, d}), Tensor<T>({6 * d})};
  }

  void collect(std::vector<Named<T>>& out, const std::string& prefix) {
    out.push_back({prefix + "attn.qkv.weight", &qkv_w});
    out.push_back({prefix + "attn.qkv.bias", &qkv_b});
    out.push_back({prefix + "attn.proj.weight", &proj_w});
    out.push_back({prefix + "attn.proj.bias", &proj_b});
    out.push_back({prefix + "mlp.fc1.weight", &fc1_w});
    out.push_back({prefix + "mlp.fc1.bias", &fc1_b});
    out.push_back({prefix + "mlp.fc2.weight", &fc2_w});
    out.push_back({prefix + "mlp.fc2.bias", &fc2_b});
    out.push_back({prefix + "adaLN.weight", &ada_w});
    out.push_back({prefix + "adaLN.bias", &ada_b});
  }
};

/// Token embedding, DiT blocks, and the adaLN + linear decoder of one brick.
/// Shapes depend only on the spec and the image channel count.
template <typename T>
struct BrickParams {
  Tensor<T> embed_w, embed_b, pos;
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_ada_w, final_ada_b, out_w, out_b;

  static BrickParams zeros(const BrickSpec& spec, std::size_t image_channels) {
    const std::size_t d = std::size_t(spec.d), l2 = std::size_t(spec.l * spec.l);
    const std::size_t cin = 2 * image_channels + 2;
    BrickParams p;
    p.embed_w = Tensor<T>({d, l2 * cin});
    p.embed_b = Tensor<T>({d});
    p.pos = Tensor<T>({std::size_t(spec.tokens()), d});
    for (int i = 0; i < spec.depth; ++i) p.blocks.push_back(BlockParams<T>::zeros(d, std::size_t(spec.hidden())));
    p.final_ada_w = Tensor<T>({2 * d, d});
    p.final_ada_b = Tensor<T>({2 * d});
    p.out_w = Tensor<T>({l2 * image_channels, d});
    p.out_b = Tensor<T>({l2 * image_channels});
    return p;
  }

  /// Xavier linears, small learned positions and small shift/scale
  /// modulation weights. The two gate chunks of every block and the decoder
  /// start at exactly zero, so each block is the identity and the brick
  /// outputs zeros; the conditioning still reaches the decoder input, which
  /// keeps class and time visible after the first update.
  static BrickParams initialized(const BrickSpec& spec, std::size_t image_channels, Rng& rng) {
    BrickParams p = zeros(spec, image_channels);
    const std::size_t d = std::size_t(spec.d);
    detail::xavier_uniform(p.embed_w, rng);
    detail::normal_init(p.pos, 0.02, rng);
    for (auto& b : p.blocks) {
      detail::xavier_uniform(b.qkv_w, rng);
      detail::xavier_uniform(b.proj_w, rng);
      detail::xavier_uniform(b.fc1_w, rng);
      detail::xavier_uniform(b.fc2_w, rng);
      detail::normal_init(b.ada_w, 0.02, rng);
      for (std::size_t gate : {2, 5}) std::fill_n(b.ada_w.data() + gate * d * d, d * d, T(0));
    }
    detail::normal_init(p.final_ada_w, 0.02, rng);
    return p;
  }

  void collect(std::vector<Named<T>>& out, const std::string& prefix) {
    out.push_back({prefix + "embed.weight", &embed_w});
    out.push_back({prefix + "embed.bias", &embed_b});
    out.push_back({prefix + "pos", &pos});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect(out, prefix + "blocks." + std::to_string(i) + ".");
    }
    out.push_back({prefix + "final.adaLN.weight", &final_ada_w});
    out.push_back({prefix + "final.adaLN.bias", &final_ada_b});
    out.push_back({prefix + "final.linear.weight", &out_w});
    out.push_back({prefix + "final.linear.bias", &out_b});
  }
};

/// Per-example conditioning input. class_id < 0 selects the null class.
struct Condition {
  double time_input = 0.0;
  int class_id = -1;
};

/// Shared embedder: sinusoidal time features -> 2-layer MLP, plus a class
/// table with a trailing null row and the "no previous prediction" flag.
template <typename T>
struct CondParams {
  Tensor<T> t_w1, t_b1, t_w2, t_b2, class_table, no_prev;

  static CondParams zeros(std::size_t d, std::size_t freq_dim, std::size_t num_classes) {
    return {Tensor<T>({d, freq_dim}), Tensor<T>({d}), Tensor<T>({d, d}), Tensor<T>({d}),
            Tensor<T>({num_classes + 1, d}), Tensor<T>({d})};
  }

  static CondParams initialized(std::size_t d, std::size_t freq_dim, std::size_t num_classes, Rng& rng) {
    CondParams p = zeros(d, freq_dim, num_classes);
    detail::normal_init(p.t_w1, 0.02, rng);
    detail::normal_init(p.t_w2, 0.02, rng);
    detail::normal_init(p.class_table, 0.02, rng);
    detail::normal_init(p.no_prev, 0.02, rng);
    return p;
  }

  std::size_t null_class() const { return class_table.dim(0) - 1; }

  void collect(std::vector<Named<T>>& out, const std::string& prefix) {
    out.push_back({prefix + "t_embed.fc1.weight", &t_w1});
    out.push_back({prefix + "t_embed.fc1.bias", &t_b1});
    out.push_back({prefix + "t_embed.fc2.weight", &t_w2});
    out.push_back({prefix + "t_embed.fc2.bias", &t_b2});
    out.push_back({prefix + "class_embed", &class_table});
    out.push_back({prefix + "no_prev", &no_prev});
  }
};

template <typename T>
struct CondCache {
  Buffer<T> freq, h1, s1;
  std::vector<std::size_t> rows;
};

/// Returns the [B x d] conditioning vectors (time + class, no flag).
template <typename T>
Tensor<T> cond_forward(const CondParams<T>& p, const std::vector<Condition>& conds, CondCache<T>& cache) {
  const std::size_t B = conds.size(), d = p.t_b1.size(), F = p.t_w1.dim(1);
  cache.freq.assign(B * F, T(0));
  cache.h1.assign(B * d, T(0));
  cache.s1.assign(B * d, T(0));
  cache.rows.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    nn::timestep_embedding(conds[b].time_input, F, cache.freq.data() + b * F);
    const int c = conds[b].class_id;
    if (c >= int(p.null_class())) {
      throw IndexError(detail::concat("class id ", c, " outside [0, ", p.null_class(), ")"));
    }
    cache.rows[b] = c < 0 ? p.null_class() : std::size_t(c);
  }
  nn::linear_forward(cache.freq.data(), B, p.t_w1, p.t_b1, cache.h1.data());
  for (std::size_t i = 0; i < B * d; ++i) cache.s1[i] = nn::silu(cache.h1[i]);
  Tensor<T> out({B, d});
  nn::linear_forward(cache.s1.data(), B, p.t_w2, p.t_b2, out.data());
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = &p.class_table(cache.rows[b], 0);
    for (std::size_t i = 0; i < d; ++i) out(b, i) += row[i];
  }
  return out;
}

template <typename T>
void cond_backward(const CondParams<T>& p, const CondCache<T>& cache, const Tensor<T>& dout,
                   CondParams<T>& g) {
  const std::size_t B = dout.dim(0), d = dout.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    T* row = &g.class_table(cache.rows[b], 0);
    for (std::size_t i = 0; i < d; ++i) row[i] += dout(b, i);
  }
  Buffer<T> ds1(B * d), dh1(B * d);
  nn::linear_backward(cache.s1.data(), B, p.t_w2, dout.data(), ds1.data(), g.t_w2, g.t_b2);
  for (std::size_t i = 0; i < B * d; ++i) dh1[i] = ds1[i] * nn::silu_grad(cache.h1[i]);
  nn::linear_backward(cache.freq.data(), B, p.t_w1, dh1.data(), static_cast<T*>(nullptr), g.t_w1, g.t_b1);
}

// ---- forward / backward ----------------------------------------------------

/// A batch of brick inputs: `count` patches of r x r x (2C+2), each tagged
/// with the row of its conditioning vector.
template <typename T>
struct BrickBatch {
  std::size_t count = 0;
  Buffer<T> input;
  std::vector<std::size_t> cond_row;
};

template <typename T>
struct BlockCache {
  Buffer<T> x_in, ada, ln1, rstd1, h1, qkv, probs, attn, proj, ln2, rstd2, h2, fc1, act, fc2;
};

template <typename T>
struct BrickCache {
  Buffer<T> fields, cond_silu, x_final, fada, lnf, rstdf, hf;
  std::vector<BlockCache<T>> blocks;
};

namespace detail {

/// Moves r x r x C patches into / out of token-major l x l x C fields.
template <typename T, bool ToFields>
void shuffle_fields(const BrickSpec& spec, std::size_t P, std::size_t C, const T* src, T* dst) {
  const std::size_t r = std::size_t(spec.r), l = std::size_t(spec.l), F = r / l, S = F * F;
  const std::size_t per_patch = r * r * C, per_token = l * l * C;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t fy = 0; fy < F; ++fy) {
      for (std::size_t fx = 0; fx < F; ++fx) {
        const std::size_t tok = p * S + fy * F + fx;
        for (std::size_t py = 0; py < l; ++py) {
          const std::size_t pix = ((fy * l + py) * r + fx * l) * C;
          T* a = nullptr;
          const T* b = nullptr;
          if constexpr (ToFields) {
            a = dst + tok * per_token + py * l * C;
            b = src + p * per_patch + pix;
          } else {
            a = dst + p * per_patch + pix;
            b = src + tok * per_token + py * l * C;
          }
          std::memcpy(a, b, sizeof(T) * l * C);
        }
      }
    }
  }
}

/// y[n] = x[n] * (1 + scale[b(n)]) + shift[b(n)], with shift/scale read from a
/// [B x chunks*d] modulation matrix at the given chunk offsets.
template <typename T>
void modulate(const T* x, const Buffer<T>& mod, std::size_t width, std::size_t shift_chunk,
              std::size_t scale_chunk, const std::vector<std::size_t>& cond_row, std::size_t S,
              std::size_t N, std::size_t d, T* y) {
  for (std::size_t n = 0; n < N; ++n) {
    const T* m = mod.data() + cond_row[n / S] * width;
    const T* shift = m + shift_chunk * d;
    const T* scale = m + scale_chunk * d;
    for (std::size_t i = 0; i < d; ++i) y[n * d + i] = x[n * d + i] * (T(1) + scale[i]) + shift[i];
  }
}

template <typename T>
void modulate_backward(const T* x, const T* dy, const Buffer<T>& mod, Buffer<T>& dmod,
                       std::size_t width, std::size_t shift_chunk, std::size_t scale_chunk,
                       const std::vector<std::size_t>& cond_row, std::size_t S, std::size_t N,
                       std::size_t d, T* dx) {
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t b = cond_row[n / S];
    const T* scale = mod.data() + b * width + scale_chunk * d;
    T* dshift = dmod.data() + b * width + shift_chunk * d;
    T* dscale = dmod.data() + b * width + scale_chunk * d;
    for (std::size_t i = 0; i < d; ++i) {
      const T g = dy[n * d + i];
      dx[n * d + i] = g * (T(1) + scale[i]);
      dscale[i] += g * x[n * d + i];
      dshift[i] += g;
    }
  }
}

/// x[n] += gate[b(n)] * branch[n]
template <typename T>
void gated_add(T* x, const T* branch, const Buffer<T>& mod, std::size_t width, std::size_t gate_chunk,
               const std::vector<std::size_t>& cond_row, std::size_t S, std::size_t N, std::size_t d) {
  for (std::size_t n = 0; n < N; ++n) {
    const T* gate = mod.data() + cond_row[n / S] * width + gate_chunk * d;
    for (std::size_t i = 0; i < d; ++i) x[n * d + i] += gate[i] * branch[n * d + i];
  }
}

template <typename T>
void gated_add_backward(const T* dx, const T* branch, const Buffer<T>& mod, Buffer<T>& dmod,
                        std::size_t width, std::size_t gate_chunk, const std::vector<std::size_t>& cond_row,
                        std::size_t S, std::size_t N, std::size_t d, T* dbranch) {
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t b = cond_row[n / S];
    const T* gate = mod.data() + b * width + gate_chunk * d;
    T* dgate = dmod.data() + b * width + gate_chunk * d;
    for (std::size_t i = 0; i < d; ++i) {
      dbranch[n * d + i] = dx[n * d + i] * gate[i];
      dgate[i] += dx[n * d + i] * branch[n * d + i];
    }
  }
}

}  // namespace detail

inline void check_brick_params_shape(const BrickSpec& spec, std::size_t image_channels,
                                     const Shape& embed_shape, std::size_t blocks) {
  const std::size_t cin = 2 * image_channels + 2;
  const Shape want{std::size_t(spec.d), std::size_t(spec.l * spec.l) * cin};
  if (embed_shape != want) {
    throw ShapeError(detail::concat("brick params: tensor 'embed.weight' has shape ", detail::shape_str(embed_shape),
                                    ", spec requires ", detail::shape_str(want)));
  }
  if (blocks != std::size_t(spec.depth)) {
    throw ShapeError(detail::concat("brick params: ", blocks, " blocks but spec depth is ", spec.depth));
  }
}

/// Runs the brick over a batch of patches. `cond` is [B x d]; `out` receives
/// count x r x r x C predictions in patch-major HWC order.
template <typename T>
void brick_forward_batch(const BrickSpec& spec, const BrickParams<T>& p, const BrickBatch<T>& batch,
                         const Tensor<T>& cond, BrickCache<T>& cache, Buffer<T>& out) {
  const std::size_t d = std::size_t(spec.d), S = std::size_t(spec.tokens()), P = batch.count, N = P * S;
  const std::size_t l2 = std::size_t(spec.l * spec.l), C = p.out_w.dim(0) / l2;
  const std::size_t cin = p.embed_w.dim(1) / l2, hd = std::size_t(spec.hidden()), B = cond.dim(0);
  check_brick_params_shape(spec, C, p.embed_w.shape(), p.blocks.size());
  if (batch.input.size() != P * std::size_t(spec.r * spec.r) * cin) {
    throw ShapeError(detail::concat("brick_forward: input holds ", batch.input.size(), " values, expected ",
                                    P, " patches of ", spec.r, "x", spec.r, "x", cin));
  }
  if (cond.rank() != 2 || cond.dim(1) != d) {
    throw ShapeError(detail::concat("brick_forward: conditioning ", detail::shape_str(cond.shape()),
                                    " must be [B x ", d, "]"));
  }
  const auto& rows = batch.cond_row;

  cache.fields.resize(N * l2 * cin);
  detail::shuffle_fields<T, true>(spec, P, cin, batch.input.data(), cache.fields.data());
  Buffer<T> x(N * d);
  nn::linear_forward(cache.fields.data(), N, p.embed_w, p.embed_b, x.data());
  for (std::size_t n = 0; n < N; ++n) {
    const T* pos = &p.pos((n % S), 0);
    for (std::size_t i = 0; i < d; ++i) x[n * d + i] += pos[i];
  }
  cache.cond_silu.resize(B * d);
  for (std::size_t i = 0; i < B * d; ++i) cache.cond_silu[i] = nn::silu(cond[i]);

  cache.blocks.resize(p.blocks.size());
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& bp = p.blocks[bi];
    auto& c = cache.blocks[bi];
    c.x_in = x;
    c.ada.resize(B * 6 * d);
    nn::linear_forward(cache.cond_silu.data(), B, bp.ada_w, bp.ada_b, c.ada.data());
    c.ln1.resize(N * d);
    c.rstd1.resize(N);
    nn::layernorm_forward(x.data(), N, d, c.ln1.data(), c.rstd1.data());
    c.h1.resize(N * d);
    detail::modulate(c.ln1.data(), c.ada, 6 * d, 0, 1, rows, S, N, d, c.h1.data());
    c.qkv.resize(N * 3 * d);
    nn::linear_forward(c.h1.data(), N, bp.qkv_w, bp.qkv_b, c.qkv.data());
    c.attn.resize(N * d);
    c.probs.resize(P * std::size_t(spec.heads) * S * S);
    nn::attention_forward(c.qkv.data(), P, S, d, std::size_t(spec.heads), c.attn.data(), c.probs.data());
    c.proj.resize(N * d);
    nn::linear_forward(c.attn.data(), N, bp.proj_w, bp.proj_b, c.proj.data());
    detail::gated_add(x.data(), c.proj.data(), c.ada, 6 * d, 2, rows, S, N, d);

    c.ln2.resize(N * d);
    c.rstd2.resize(N);
    nn::layernorm_forward(x.data(), N, d, c.ln2.data(), c.rstd2.data());
    c.h2.resize(N * d);
    detail::modulate(c.ln2.data(), c.ada, 6 * d, 3, 4, rows, S, N, d, c.h2.data());
    c.fc1.resize(N * hd);
    nn::linear_forward(c.h2.data(), N, bp.fc1_w, bp.fc1_b, c.fc1.data());
    c.act.resize(N * hd);
    nn::gelu_forward(c.fc1.data(), N * hd, c.act.data());
    c.fc2.resize(N * d);
    nn::linear_forward(c.act.data(), N, bp.fc2_w, bp.fc2_b, c.fc2.data());
    detail::gated_add(x.data(), c.fc2.data(), c.ada, 6 * d, 5, rows, S, N, d);
  }

  cache.x_final = std::move(x);
  cache.fada.resize(B * 2 * d);
  nn::linear_forward(cache.cond_silu.data(), B, p.final_ada_w, p.final_ada_b, cache.fada.data());
  cache.lnf.resize(N * d);
  cache.rstdf.resize(N);
  nn::layernorm_forward(cache.x_final.data(), N, d, cache.lnf.data(), cache.rstdf.data());
  cache.hf.resize(N * d);
  detail::modulate(cache.lnf.data(), cache.fada, 2 * d, 0, 1, rows, S, N, d, cache.hf.data());
  Buffer<T> tok_out(N * l2 * C);
  nn::linear_forward(cache.hf.data(), N, p.out_w, p.out_b, tok_out.data());
  out.resize(P * std::size_t(spec.r * spec.r) * C);
  detail::shuffle_fields<T, false>(spec, P, C, tok_out.data(), out.data());
}

/// Accumulates parameter gradients into `g` and conditioning gradients into
/// `dcond` ([B x d]); writes input gradients when `dinput` is non-null.
template <typename T>
void brick_backward_batch(const BrickSpec& spec, const BrickParams<T>& p, const BrickBatch<T>& batch,
                          const Tensor<T>& cond, const BrickCache<T>& cache, const Buffer<T>& dout,
                          BrickParams<T>& g, Buffer<T>* dinput, Tensor<T>& dcond) {
  const std::size_t d = std::size_t(spec.d), S = std::size_t(spec.tokens()), P = batch.count, N = P * S;
  const std::size_t l2 = std::size_t(spec.l * spec.l), C = p.out_w.dim(0) / l2;
  const std::size_t cin = p.embed_w.dim(1) / l2, hd = std::size_t(spec.hidden()), B = cond.dim(0);
  const auto& rows = batch.cond_row;

  Buffer<T> dtok(N * l2 * C);
  detail::shuffle_fields<T, true>(spec, P, C, dout.data(), dtok.data());
  Buffer<T> dh(N * d), dx(N * d, T(0)), dln(N * d), dcs(B * d, T(0));

  nn::linear_backward(cache.hf.data(), N, p.out_w, dtok.data(), dh.data(), g.out_w, g.out_b);
  Buffer<T> dfada(B * 2 * d, T(0));
  detail::modulate_backward(cache.lnf.data(), dh.data(), cache.fada, dfada, 2 * d, 0, 1, rows, S, N, d,
                            dln.data());
  nn::layernorm_backward(cache.lnf.data(), cache.rstdf.data(), dln.data(), N, d, dx.data());
  nn::linear_backward(cache.cond_silu.data(), B, p.final_ada_w, dfada.data(), dcs.data(), g.final_ada_w,
                      g.final_ada_b, true);

  Buffer<T> dbranch(N * d), dact(N * hd), dfc1(N * hd), dqkv(N * 3 * d), dattn(N * d), dada;
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& bp = p.blocks[bi];
    auto& gb = g.blocks[bi];
    const auto& c = cache.blocks[bi];
    dada.assign(B * 6 * d, T(0));

    detail::gated_add_backward(dx.data(), c.fc2.data(), c.ada, dada, 6 * d, 5, rows, S, N, d, dbranch.data());
    nn::linear_backward(c.act.data(), N, bp.fc2_w, dbranch.data(), dact.data(), gb.fc2_w, gb.fc2_b);
    nn::gelu_backward(c.fc1.data(), dact.data(), N * hd, dfc1.data());
    nn::linear_backward(c.h2.data(), N, bp.fc1_w, dfc1.data(), dh.data(), gb.fc1_w, gb.fc1_b);
    detail::modulate_backward(c.ln2.data(), dh.data(), c.ada, dada, 6 * d, 3, 4, rows, S, N, d, dln.data());
    nn::layernorm_backward(c.ln2.data(), c.rstd2.data(), dln.data(), N, d, dx.data());

    detail::gated_add_backward(dx.data(), c.proj.data(), c.ada, dada, 6 * d, 2, rows, S, N, d, dbranch.data());
    nn::linear_backward(c.attn.data(), N, bp.proj_w, dbranch.data(), dattn.data(), gb.proj_w, gb.proj_b);
    nn::attention_backward(c.qkv.data(), c.probs.data(), dattn.data(), P, S, d, std::size_t(spec.heads),
                           dqkv.data());
    nn::linear_backward(c.h1.data(), N, bp.qkv_w, dqkv.data(), dh.data(), gb.qkv_w, gb.qkv_b);
    detail::modulate_backward(c.ln1.data(), dh.data(), c.ada, dada, 6 * d, 0, 1, rows, S, N, d, dln.data());
    nn::layernorm_backward(c.ln1.data(), c.rstd1.data(), dln.data(), N, d, dx.data());

    nn::linear_backward(cache.cond_silu.data(), B, bp.ada_w, dada.data(), dcs.data(), gb.ada_w, gb.ada_b, true);
  }

  for (std::size_t n = 0; n < N; ++n) {
    T* gp = &g.pos(n % S, 0);
    for (std::size_t i = 0; i < d; ++i) gp[i] += dx[n * d + i];
  }
  if (dinput) {
    Buffer<T> dfields(N * l2 * cin);
    nn::linear_backward(cache.fields.data(), N, p.embed_w, dx.data(), dfields.data(), g.embed_w, g.embed_b);
    dinput->resize(P * std::size_t(spec.r * spec.r) * cin);
    detail::shuffle_fields<T, false>(spec, P, cin, dfields.data(), dinput->data());
  } else {
    nn::linear_backward(cache.fields.data(), N, p.embed_w, dx.data(), static_cast<T*>(nullptr), g.embed_w,
                        g.embed_b);
  }
  for (std::size_t i = 0; i < B * d; ++i) dcond[i] += dcs[i] * nn::silu_grad(cond[i]);
}

// ---- single-patch surface --------------------------------------------------

/// Token sequence ((r/l)^2 x d) of one r x r x (2C+2) input patch, including
/// learned slot positions.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& patch, const BrickSpec& spec, const BrickParams<T>& p) {
  const std::size_t l2 = std::size_t(spec.l * spec.l), cin = p.embed_w.dim(1) / l2;
  const Shape want{std::size_t(spec.r), std::size_t(spec.r), cin};
  if (patch.shape() != want) {
    throw ShapeError(detail::concat("tokenize: patch ", detail::shape_str(patch.shape()), " but brick expects ",
                                    detail::shape_str(want)));
  }
  const std::size_t S = std::size_t(spec.tokens()), d = std::size_t(spec.d);
  Buffer<T> fields(S * l2 * cin);
  detail::shuffle_fields<T, true>(spec, 1, cin, patch.data(), fields.data());
  Tensor<T> tokens({S, d});
  nn::linear_forward(fields.data(), S, p.embed_w, p.embed_b, tokens.data());
  for (std::size_t n = 0; n < S; ++n)
    for (std::size_t i = 0; i < d; ++i) tokens(n, i) += p.pos(n, i);
  return tokens;
}

/// Concatenates [x_t, previous prediction, coordinates] channel-wise. An empty
/// `prev` encodes the absent lower brick as zeros.
template <typename T>
Tensor<T> brick_input(const Tensor<T>& xt_patch, const Tensor<T>& prev_patch, const Tensor<T>& coords) {
  require_image(xt_patch.shape(), "brick_input");
  const std::size_t r0 = xt_patch.dim(0), r1 = xt_patch.dim(1), C = xt_patch.dim(2);
  if (!prev_patch.empty()) require_same_shape(xt_patch.shape(), prev_patch.shape(), "brick_input(prev)");
  require_same_shape(Shape{r0, r1, 2}, coords.shape(), "brick_input(coords)");
  Tensor<T> in({r0, r1, 2 * C + 2});
  for (std::size_t y = 0; y < r0; ++y) {
    for (std::size_t x = 0; x < r1; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        in(y, x, c) = xt_patch(y, x, c);
        in(y, x, C + c) = prev_patch.empty() ? T(0) : prev_patch(y, x, c);
      }
      in(y, x, 2 * C) = coords(y, x, 0);
      in(y, x, 2 * C + 1) = coords(y, x, 1);
    }
  }
  return in;
}

/// One patch through one brick. `cond_vector` is the d-wide conditioning
/// vector (time + class, plus the no-previous flag when prev is empty).
template <typename T>
Tensor<T> brick_forward(const Tensor<T>& xt_patch, const Tensor<T>& prev_patch, const Tensor<T>& coords,
                        const Tensor<T>& cond_vector, const BrickSpec& spec, const BrickParams<T>& p) {
  if (xt_patch.rank() != 3 || xt_patch.dim(0) != std::size_t(spec.r) || xt_patch.dim(1) != std::size_t(spec.r)) {
    throw ShapeError(detail::concat("brick_forward: patch ", detail::shape_str(xt_patch.shape()),
                                    " does not match brick size ", spec.r));
  }
  BrickBatch<T> batch;
  batch.count = 1;
  batch.input = brick_input(xt_patch, prev_patch, coords).storage();
  batch.cond_row = {0};
  BrickCache<T> cache;
  Buffer<T> out;
  brick_forward_batch(spec, p, batch, cond_vector.reshaped({1, cond_vector.size()}), cache, out);
  return Tensor<T>({std::size_t(spec.r), std::size_t(spec.r), xt_patch.dim(2)}, std::move(out));
}

}  // namespace lego
