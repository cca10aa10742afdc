// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations for tests. Written independently of
// the library kernels: per-token vectors, complex-number rotations, one head
// and one query at a time, long double accumulation.
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <vector>

#include "mlaforge/config.hpp"
#include "mlaforge/rope.hpp"
#include "mlaforge/tensorio.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Sets = std::vector<std::vector<std::vector<std::uint32_t>>>;  // [layer][group] rotated subspaces

inline Sets all_sets(const mlaforge::ModelConfig& cfg) {
  std::vector<std::uint32_t> all;
  for (std::uint32_t k = 0; k < cfg.d_h / 2; ++k) all.push_back(k);
  return Sets(cfg.n_layers, std::vector<std::vector<std::uint32_t>>(cfg.n_g, all));
}

inline Sets from_selection(const mlaforge::RopeSelection& sel) { return sel.sets; }

// Angle of subspace k at position p, as exp(-(2k/d_h) ln base) * p.
inline double angle(std::uint32_t k, std::uint32_t d_h, double base, double p) {
  return p * std::exp(-(2.0 * k / d_h) * std::log(base));
}

// Rotates pairs in place with complex multiplication.
inline void rope(double* x, std::uint32_t d_h, double base, const std::vector<std::uint32_t>& set, double p) {
  for (std::uint32_t k : set) {
    std::complex<double> z(x[2 * k], x[2 * k + 1]);
    z *= std::polar(1.0, angle(k, d_h, base, p));
    x[2 * k] = z.real();
    x[2 * k + 1] = z.imag();
  }
}

inline Vec vecmat(const Vec& x, const mlaforge::MatrixD& w) {
  Vec y(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < w.rows(); ++i) acc += static_cast<long double>(x[i]) * w(i, j);
    y[j] = static_cast<double>(acc);
  }
  return y;
}

inline Vec rmsnorm(const Vec& x, const mlaforge::MatrixD& weight) {
  long double ss = 0.0L;
  for (double v : x) ss += static_cast<long double>(v) * v;
  const double inv = 1.0 / std::sqrt(static_cast<double>(ss / x.size()) + 1e-6);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * weight(0, i);
  return y;
}

// hook(layer, position, pre-RoPE q (n_h*d_h), pre-RoPE k (n_g*d_h))
using QkHook = std::function<void(std::uint32_t, std::size_t, const Vec&, const Vec&)>;

struct Output {
  std::vector<Vec> logits;                    // [position][vocab]
  std::vector<std::vector<Vec>> attn;         // [layer][position][d]
};

// Source-checkpoint forward with RoPE on `sets` only.
inline Output forward(const mlaforge::ModelConfig& cfg, const mlaforge::TensorStore& store,
                      const std::vector<std::uint32_t>& tokens, const Sets& sets, const QkHook& hook = {}) {
  using mlaforge::layer_name;
  const std::size_t n = tokens.size();
  const std::uint32_t dh = cfg.d_h;
  const mlaforge::MatrixD embed = store.get_as<double>("embed");
  std::vector<Vec> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = Vec(embed.row(tokens[t]).begin(), embed.row(tokens[t]).end());
  Output out;
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    auto W = [&](const char* leaf) { return store.get_as<double>(layer_name(l, leaf)); };
    const auto norm1 = W("norm1"), norm2 = W("norm2"), wq = W("Wq"), wk = W("Wk"), wv = W("Wv"), wo = W("Wo"),
               up = W("mlp.up"), down = W("mlp.down");
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec h = rmsnorm(x[t], norm1);
      q[t] = vecmat(h, wq);
      k[t] = vecmat(h, wk);
      v[t] = vecmat(h, wv);
      if (hook) hook(l, t, q[t], k[t]);
      for (std::uint32_t hd = 0; hd < cfg.n_h; ++hd)
        rope(q[t].data() + hd * dh, dh, cfg.rope_base, sets[l][hd * cfg.n_g / cfg.n_h], static_cast<double>(t));
      for (std::uint32_t g = 0; g < cfg.n_g; ++g)
        rope(k[t].data() + g * dh, dh, cfg.rope_base, sets[l][g], static_cast<double>(t));
    }
    std::vector<Vec> attn(n);
    for (std::size_t i = 0; i < n; ++i) {
      Vec o(cfg.n_h * dh, 0.0);
      for (std::uint32_t hd = 0; hd < cfg.n_h; ++hd) {
        const std::uint32_t g = hd * cfg.n_g / cfg.n_h;
        std::vector<long double> s(i + 1);
        long double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          long double acc = 0.0L;
          for (std::uint32_t c = 0; c < dh; ++c) acc += static_cast<long double>(q[i][hd * dh + c]) * k[j][g * dh + c];
          s[j] = acc / std::sqrt(static_cast<long double>(dh));
          mx = std::max(mx, s[j]);
        }
        long double z = 0.0L;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::uint32_t c = 0; c < dh; ++c) {
          long double acc = 0.0L;
          for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v[j][g * dh + c];
          o[hd * dh + c] = static_cast<double>(acc);
        }
      }
      attn[i] = vecmat(o, wo);
    }
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < cfg.d; ++c) x[t][c] += attn[t][c];
      Vec u = vecmat(rmsnorm(x[t], norm2), up);
      for (double& e : u) e = e / (1.0 + std::exp(-e));
      const Vec m = vecmat(u, down);
      for (std::size_t c = 0; c < cfg.d; ++c) x[t][c] += m[c];
    }
    out.attn.push_back(std::move(attn));
  }
  const auto lm = store.get_as<double>("lm_head");
  for (std::size_t t = 0; t < n; ++t) out.logits.push_back(vecmat(x[t], lm));
  return out;
}

// Per query head mean over every (sequence, position) of |q chunk| |k chunk|,
// from materialized pre-RoPE vectors. [layer][head][subspace]
inline std::vector<std::vector<Vec>> head_scores(const mlaforge::ModelConfig& cfg, const mlaforge::TensorStore& store,
                                                 const std::vector<std::vector<std::uint32_t>>& corpus) {
  struct Sample {
    Vec q, k;
  };
  std::vector<std::vector<Sample>> per_layer(cfg.n_layers);
  for (const auto& seq : corpus) {
    forward(cfg, store, seq, all_sets(cfg), [&](std::uint32_t l, std::size_t, const Vec& q, const Vec& k) {
      per_layer[l].push_back({q, k});
    });
  }
  const std::uint32_t dh = cfg.d_h;
  std::vector<std::vector<Vec>> out(cfg.n_layers, std::vector<Vec>(cfg.n_h, Vec(dh / 2, 0.0)));
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    for (std::uint32_t h = 0; h < cfg.n_h; ++h) {
      const std::uint32_t g = h * cfg.n_g / cfg.n_h;
      for (std::uint32_t c = 0; c < dh / 2; ++c) {
        long double acc = 0.0L;
        for (const Sample& s : per_layer[l]) {
          const long double qa = s.q[h * dh + 2 * c], qb = s.q[h * dh + 2 * c + 1];
          const long double ka = s.k[g * dh + 2 * c], kb = s.k[g * dh + 2 * c + 1];
          acc += std::sqrt(qa * qa + qb * qb) * std::sqrt(ka * ka + kb * kb);
        }
        out[l][h][c] = static_cast<double>(acc / per_layer[l].size());
      }
    }
  }
  return out;
}

inline double max_abs_diff(const std::vector<Vec>& a, const mlaforge::MatrixF& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - static_cast<double>(b(i, j))));
  return m;
}

}  // namespace oracle
