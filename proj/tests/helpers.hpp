#pragma once

// Test-side reference implementations, independent of the engine's compute
// path: naive double-precision loops only.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "promptlab/engine.hpp"
#include "promptlab/model.hpp"

namespace testref {

using promptlab::ModelConfig;
using promptlab::Parameters;
using promptlab::Prompt;

inline std::vector<std::vector<double>> layernorm_ref(const std::vector<std::vector<double>>& x,
                                                      const std::vector<double>& g,
                                                      const std::vector<double>& b) {
  std::vector<std::vector<double>> out(x.size());
  for (std::size_t r = 0; r < x.size(); ++r) {
    const auto& row = x[r];
    double m = 0;
    for (double v : row) m += v;
    m /= static_cast<double>(row.size());
    double var = 0;
    for (double v : row) var += (v - m) * (v - m);
    var /= static_cast<double>(row.size());
    double rs = 1.0 / std::sqrt(var + 1e-5);
    out[r].resize(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) out[r][j] = (row[j] - m) * rs * g[j] + b[j];
  }
  return out;
}

inline double gelu_ref(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
}

inline void rotary_ref(std::vector<double>& head, std::size_t rot, std::int64_t pos) {
  std::size_t half = rot / 2;
  for (std::size_t j = 0; j < half; ++j) {
    double theta = pos * std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(rot));
    double c = std::cos(theta), s = std::sin(theta);
    double a = head[j], b = head[j + half];
    head[j] = a * c - b * s;
    head[j + half] = a * s + b * c;
  }
}

// Full naive forward; returns per-position logits rows.
inline std::vector<std::vector<double>> forward_ref(const Parameters<double>& p, const Prompt& ids) {
  const ModelConfig& cfg = p.config;
  const std::size_t T = ids.size();
  const std::size_t d = static_cast<std::size_t>(cfg.hidden_dim);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = d / H;
  const std::size_t rot = static_cast<std::size_t>(cfg.rotary_dim());

  std::vector<std::vector<double>> x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) x[t][j] = p.wte(ids[t], static_cast<std::int64_t>(j));

  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const auto& L = p.layers[l];
    std::vector<double> g(d), b(d);
    for (std::size_t j = 0; j < d; ++j) {
      g[j] = L.ln_g[static_cast<std::int64_t>(j)];
      b[j] = L.ln_b[static_cast<std::int64_t>(j)];
    }
    auto n = layernorm_ref(x, g, b);

    std::vector<std::vector<double>> q(T, std::vector<double>(d)), k = q, v = q;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < 3 * d; ++c) {
        double acc = L.b_qkv[static_cast<std::int64_t>(c)];
        for (std::size_t j = 0; j < d; ++j)
          acc += n[t][j] * L.w_qkv(static_cast<std::int64_t>(j), static_cast<std::int64_t>(c));
        if (c < d)
          q[t][c] = acc;
        else if (c < 2 * d)
          k[t][c - d] = acc;
        else
          v[t][c - 2 * d] = acc;
      }
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> qh(q[t].begin() + h * hd, q[t].begin() + (h + 1) * hd);
        std::vector<double> kh(k[t].begin() + h * hd, k[t].begin() + (h + 1) * hd);
        rotary_ref(qh, rot, static_cast<std::int64_t>(t));
        rotary_ref(kh, rot, static_cast<std::int64_t>(t));
        std::copy(qh.begin(), qh.end(), q[t].begin() + h * hd);
        std::copy(kh.begin(), kh.end(), k[t].begin() + h * hd);
      }

    std::vector<std::vector<double>> attn_out(T, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> scores(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double s = 0;
          for (std::size_t j = 0; j < hd; ++j) s += q[t][h * hd + j] * k[u][h * hd + j];
          scores[u] = s / std::sqrt(static_cast<double>(hd));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0;
        for (double s : scores) denom += std::exp(s - mx);
        for (std::size_t u = 0; u <= t; ++u) {
          double w = std::exp(scores[u] - mx) / denom;
          for (std::size_t j = 0; j < hd; ++j) attn_out[t][h * hd + j] += w * v[u][h * hd + j];
        }
      }

    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> proj(d);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = L.b_o[static_cast<std::int64_t>(c)];
        for (std::size_t j = 0; j < d; ++j)
          acc += attn_out[t][j] * L.w_o(static_cast<std::int64_t>(j), static_cast<std::int64_t>(c));
        proj[c] = acc;
      }
      std::vector<double> hidden(static_cast<std::size_t>(cfg.ffn_dim));
      for (std::size_t c = 0; c < hidden.size(); ++c) {
        double acc = L.b_fc[static_cast<std::int64_t>(c)];
        for (std::size_t j = 0; j < d; ++j)
          acc += n[t][j] * L.w_fc(static_cast<std::int64_t>(j), static_cast<std::int64_t>(c));
        hidden[c] = gelu_ref(acc);
      }
      for (std::size_t c = 0; c < d; ++c) {
        double acc = L.b_proj[static_cast<std::int64_t>(c)];
        for (std::size_t j = 0; j < hidden.size(); ++j)
          acc += hidden[j] * L.w_proj(static_cast<std::int64_t>(j), static_cast<std::int64_t>(c));
        x[t][c] += proj[c] + acc;
      }
    }
  }

  std::vector<double> gf(d), bf(d);
  for (std::size_t j = 0; j < d; ++j) {
    gf[j] = p.lnf_g[static_cast<std::int64_t>(j)];
    bf[j] = p.lnf_b[static_cast<std::int64_t>(j)];
  }
  auto nf = layernorm_ref(x, gf, bf);
  std::vector<std::vector<double>> logits(T, std::vector<double>(static_cast<std::size_t>(cfg.vocab_size)));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < logits[t].size(); ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j)
        acc += nf[t][j] * p.w_head(static_cast<std::int64_t>(j), static_cast<std::int64_t>(c));
      logits[t][c] = acc;
    }
  return logits;
}

inline std::vector<double> softmax_ref(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double denom = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (auto& v : p) v /= denom;
  return p;
}

inline ModelConfig random_tiny_config(std::mt19937_64& rng) {
  ModelConfig cfg;
  cfg.n_layers = 1 + static_cast<std::int64_t>(rng() % 2);
  cfg.n_heads = 1 + static_cast<std::int64_t>(rng() % 2);
  cfg.hidden_dim = cfg.n_heads * (2 + static_cast<std::int64_t>(rng() % 4)) * 2;
  if (cfg.hidden_dim > 16) cfg.hidden_dim = 16;
  cfg.hidden_dim -= cfg.hidden_dim % cfg.n_heads;
  cfg.ffn_dim = 4 + static_cast<std::int64_t>(rng() % 12);
  cfg.vocab_size = 4 + static_cast<std::int64_t>(rng() % 29);
  cfg.max_seq_len = 32;
  cfg.rotary_fraction = (rng() % 2) ? 0.25 : 1.0;
  return cfg;
}

inline Prompt random_prompt(std::mt19937_64& rng, std::int64_t vocab, std::size_t len) {
  Prompt p(len);
  for (auto& id : p) id = static_cast<promptlab::TokenId>(rng() % static_cast<std::uint64_t>(vocab));
  return p;
}

}  // namespace testref
