#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "promptlab/model.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/tensor.hpp"
#include "promptlab/vocab.hpp"

namespace promptlab {

constexpr double kLayerNormEps = 1e-5;
constexpr double kRotaryBase = 10000.0;

// Zero a feature subset of the residual stream at one layer's output,
// final position only.
struct AblationMask {
  std::int64_t layer = 0;  // 1-based, matching h^(l)
  std::vector<std::int64_t> features;

  void validate(const ModelConfig& cfg) const {
    require(layer >= 1 && layer <= cfg.n_layers, "ablation layer out of range");
    std::vector<std::int64_t> sorted = features;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      require(sorted[i] >= 0 && sorted[i] < cfg.hidden_dim, "ablation feature index out of range");
      require(i == 0 || sorted[i] != sorted[i - 1], "ablation feature set has duplicates");
    }
  }
};

// Post-block residual states h^(l) for the captured positions.
template <typename T>
struct ActivationTrace {
  std::int64_t n_layers = 0;
  std::int64_t hidden_dim = 0;
  std::vector<std::int64_t> positions;
  std::vector<std::vector<T>> states;  // [layer * positions.size() + pos_index]

  std::span<const T> at(std::int64_t layer, std::int64_t position) const {
    require(layer >= 1 && layer <= n_layers, "trace layer out of range");
    auto it = std::find(positions.begin(), positions.end(), position);
    require(it != positions.end(), "position not captured in trace");
    auto pi = static_cast<std::size_t>(it - positions.begin());
    return states[static_cast<std::size_t>(layer - 1) * positions.size() + pi];
  }
};

template <typename T>
struct ForwardOptions {
  std::vector<std::int64_t> capture_positions;  // residual-stream capture
  const AblationMask* mask = nullptr;
  std::int64_t logits_from = 0;  // skip LM-head rows below this position
};

// Everything the backward pass reads. Also the plain forward output.
template <typename T>
struct ForwardCache {
  std::int64_t seq_len = 0;
  Prompt ids;
  struct Layer {
    Tensor<T> x_in;            // residual input
    Tensor<T> mean, rstd;      // LayerNorm row stats
    Tensor<T> n;               // normalized block input
    Tensor<T> qkv;             // post-rotary projections
    Tensor<T> att;             // (heads*T) x T causal attention probabilities
    Tensor<T> ctx;             // concatenated head outputs, pre-W_o
    Tensor<T> fc_pre, fc_act;  // MLP hidden pre/post GELU
  };
  std::vector<Layer> layers;
  Tensor<T> x_final;
  Tensor<T> mean_f, rstd_f;
  Tensor<T> nf;
  Tensor<T> logits;  // rows below logits_from are left zero
  ActivationTrace<T> trace;
};

namespace detail {

template <typename T>
void layernorm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, Tensor<T>& out,
               Tensor<T>& mean, Tensor<T>& rstd) {
  const std::int64_t rows = x.rows(), d = x.cols();
  out = Tensor<T>(rows, d);
  mean = Tensor<T>(rows);
  rstd = Tensor<T>(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    double m = 0;
    for (std::int64_t j = 0; j < d; ++j) m += static_cast<double>(x(r, j));
    m /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      double dv = static_cast<double>(x(r, j)) - m;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    mean[r] = static_cast<T>(m);
    rstd[r] = static_cast<T>(rs);
    for (std::int64_t j = 0; j < d; ++j)
      out(r, j) = static_cast<T>((static_cast<double>(x(r, j)) - m) * rs *
                                     static_cast<double>(g[j]) +
                                 static_cast<double>(b[j]));
  }
}

// d_x for y = g * xhat + b given upstream d_y; accumulates d_g, d_b.
template <typename T>
void layernorm_backward(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& mean,
                        const Tensor<T>& rstd, const Tensor<T>& dy, Tensor<T>& dx_acc,
                        Tensor<T>& dg, Tensor<T>& db) {
  const std::int64_t rows = x.rows(), d = x.cols();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double m = mean[r], rs = rstd[r];
    double sum_dyg = 0, sum_dyg_xhat = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      double xhat = (static_cast<double>(x(r, j)) - m) * rs;
      double dyg = static_cast<double>(dy(r, j)) * static_cast<double>(g[j]);
      sum_dyg += dyg;
      sum_dyg_xhat += dyg * xhat;
      dg[j] += static_cast<T>(static_cast<double>(dy(r, j)) * xhat);
      db[j] += static_cast<T>(dy(r, j));
    }
    sum_dyg /= static_cast<double>(d);
    sum_dyg_xhat /= static_cast<double>(d);
    for (std::int64_t j = 0; j < d; ++j) {
      double xhat = (static_cast<double>(x(r, j)) - m) * rs;
      double dyg = static_cast<double>(dy(r, j)) * static_cast<double>(g[j]);
      dx_acc(r, j) += static_cast<T>(rs * (dyg - sum_dyg - xhat * sum_dyg_xhat));
    }
  }
}

template <typename T>
T gelu(T x) {
  const double c = std::sqrt(2.0 / M_PI);
  double v = static_cast<double>(x);
  return static_cast<T>(0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
}

template <typename T>
T gelu_grad(T x) {
  const double c = std::sqrt(2.0 / M_PI);
  double v = static_cast<double>(x);
  double u = c * (v + 0.044715 * v * v * v);
  double th = std::tanh(u);
  double sech2 = 1.0 - th * th;
  return static_cast<T>(0.5 * (1.0 + th) + 0.5 * v * sech2 * c * (1.0 + 3 * 0.044715 * v * v));
}

// NeoX half-split rotary: dims j and j+rot/2 form a pair rotated by
// pos * base^(-2j/rot). sign=-1 applies the inverse rotation (backward).
template <typename T>
void apply_rotary(T* head_vec, std::int64_t rot_dim, std::int64_t pos, int sign) {
  const std::int64_t half = rot_dim / 2;
  for (std::int64_t j = 0; j < half; ++j) {
    double freq = std::pow(kRotaryBase, -2.0 * static_cast<double>(j) / static_cast<double>(rot_dim));
    double theta = static_cast<double>(pos) * freq * sign;
    double c = std::cos(theta), s = std::sin(theta);
    double a = head_vec[j], b = head_vec[j + half];
    head_vec[j] = static_cast<T>(a * c - b * s);
    head_vec[j + half] = static_cast<T>(a * s + b * c);
  }
}

}  // namespace detail

template <typename T>
void forward_cache(const Parameters<T>& params, const Prompt& ids, ForwardCache<T>& cache,
                   const ForwardOptions<T>& opts = {}) {
  const ModelConfig& cfg = params.config;
  const std::int64_t Tn = static_cast<std::int64_t>(ids.size());
  require(Tn >= 1, "forward: empty token sequence");
  if (Tn > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(Tn) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (TokenId id : ids) require(id >= 0 && id < cfg.vocab_size, "forward: token id out of range");
  if (opts.mask) opts.mask->validate(cfg);

  const std::int64_t d = cfg.hidden_dim, H = cfg.n_heads, hd = cfg.head_dim();
  const std::int64_t rot = cfg.rotary_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  cache.seq_len = Tn;
  cache.ids = ids;
  cache.layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
  cache.trace = {};
  cache.trace.n_layers = cfg.n_layers;
  cache.trace.hidden_dim = d;
  cache.trace.positions = opts.capture_positions;
  for (std::int64_t p : cache.trace.positions)
    require(p >= 0 && p < Tn, "capture position out of range");
  cache.trace.states.resize(static_cast<std::size_t>(cfg.n_layers) * cache.trace.positions.size());

  Tensor<T> x(Tn, d);
  for (std::int64_t t = 0; t < Tn; ++t)
    for (std::int64_t j = 0; j < d; ++j) x(t, j) = params.wte(ids[t], j);

  for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
    auto& L = params.layers[static_cast<std::size_t>(l)];
    auto& C = cache.layers[static_cast<std::size_t>(l)];
    C.x_in = x;
    detail::layernorm(C.x_in, L.ln_g, L.ln_b, C.n, C.mean, C.rstd);

    C.qkv = Tensor<T>(Tn, 3 * d);
    as_mat(C.qkv) = as_mat(C.n) * as_mat(L.w_qkv);
    as_mat(C.qkv).rowwise() += as_vec(L.b_qkv).transpose();
    for (std::int64_t t = 0; t < Tn; ++t)
      for (std::int64_t h = 0; h < H; ++h) {
        detail::apply_rotary(&C.qkv(t, h * hd), rot, t, +1);          // q
        detail::apply_rotary(&C.qkv(t, d + h * hd), rot, t, +1);      // k
      }

    C.att = Tensor<T>(H * Tn, Tn);
    C.ctx = Tensor<T>(Tn, d);
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t t = 0; t < Tn; ++t) {
        const T* q = &C.qkv(t, h * hd);
        double maxs = -1e300;
        std::vector<double> srow(static_cast<std::size_t>(t + 1));
        for (std::int64_t u = 0; u <= t; ++u) {
          const T* k = &C.qkv(u, d + h * hd);
          double s = 0;
          for (std::int64_t j = 0; j < hd; ++j)
            s += static_cast<double>(q[j]) * static_cast<double>(k[j]);
          s *= static_cast<double>(scale);
          srow[static_cast<std::size_t>(u)] = s;
          maxs = std::max(maxs, s);
        }
        double denom = 0;
        for (std::int64_t u = 0; u <= t; ++u)
          denom += std::exp(srow[static_cast<std::size_t>(u)] - maxs);
        T* arow = &C.att(h * Tn + t, 0);
        for (std::int64_t u = 0; u <= t; ++u)
          arow[u] = static_cast<T>(std::exp(srow[static_cast<std::size_t>(u)] - maxs) / denom);
        T* out = &C.ctx(t, h * hd);
        for (std::int64_t j = 0; j < hd; ++j) {
          double acc = 0;
          for (std::int64_t u = 0; u <= t; ++u)
            acc += static_cast<double>(arow[u]) * static_cast<double>(C.qkv(u, 2 * d + h * hd + j));
          out[j] = static_cast<T>(acc);
        }
      }
    }

    C.fc_pre = Tensor<T>(Tn, cfg.ffn_dim);
    as_mat(C.fc_pre) = as_mat(C.n) * as_mat(L.w_fc);
    as_mat(C.fc_pre).rowwise() += as_vec(L.b_fc).transpose();
    C.fc_act = C.fc_pre;
    for (auto& v : C.fc_act.v) v = detail::gelu(v);

    // h^(l) = h^(l-1) + MHSA(ln(h)) + MLP(ln(h)), both branches off one norm
    as_mat(x).noalias() += as_mat(C.ctx) * as_mat(L.w_o);
    as_mat(x).rowwise() += as_vec(L.b_o).transpose();
    as_mat(x).noalias() += as_mat(C.fc_act) * as_mat(L.w_proj);
    as_mat(x).rowwise() += as_vec(L.b_proj).transpose();

    if (opts.mask && opts.mask->layer == l + 1)
      for (std::int64_t f : opts.mask->features) x(Tn - 1, f) = T(0);

    if (!x.all_finite())
      throw NumericError("forward: non-finite residual state after layer " + std::to_string(l + 1));

    for (std::size_t pi = 0; pi < cache.trace.positions.size(); ++pi) {
      auto& slot = cache.trace.states[static_cast<std::size_t>(l) * cache.trace.positions.size() + pi];
      slot.assign(static_cast<std::size_t>(d), T(0));
      for (std::int64_t j = 0; j < d; ++j) slot[static_cast<std::size_t>(j)] = x(cache.trace.positions[pi], j);
    }
  }

  cache.x_final = x;
  detail::layernorm(cache.x_final, params.lnf_g, params.lnf_b, cache.nf, cache.mean_f, cache.rstd_f);
  cache.logits = Tensor<T>(Tn, cfg.vocab_size);
  const std::int64_t t0 = std::clamp<std::int64_t>(opts.logits_from, 0, Tn);
  if (t0 < Tn) {
    MatMap<T> lg(&cache.logits(t0, 0), Tn - t0, cfg.vocab_size);
    ConstMatMap<T> nf(&cache.nf(t0, 0), Tn - t0, d);
    lg.noalias() = nf * as_mat(params.w_head);
  }
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ActivationTrace<T> trace;
};

template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const Prompt& ids,
                         const ForwardOptions<T>& opts = {}) {
  ForwardCache<T> cache;
  forward_cache(params, ids, cache, opts);
  return {std::move(cache.logits), std::move(cache.trace)};
}

// Log-softmax of one logits row, 64-bit accumulation.
template <typename T>
double row_logprob(const Tensor<T>& logits, std::int64_t row, TokenId target) {
  const std::int64_t V = logits.cols();
  double maxv = -1e300;
  for (std::int64_t v = 0; v < V; ++v) maxv = std::max(maxv, static_cast<double>(logits(row, v)));
  double denom = 0;
  for (std::int64_t v = 0; v < V; ++v) denom += std::exp(static_cast<double>(logits(row, v)) - maxv);
  return static_cast<double>(logits(row, target)) - maxv - std::log(denom);
}

template <typename T>
std::vector<double> row_softmax(const Tensor<T>& logits, std::int64_t row) {
  const std::int64_t V = logits.cols();
  std::vector<double> p(static_cast<std::size_t>(V));
  double maxv = -1e300;
  for (std::int64_t v = 0; v < V; ++v) maxv = std::max(maxv, static_cast<double>(logits(row, v)));
  double denom = 0;
  for (std::int64_t v = 0; v < V; ++v) {
    p[static_cast<std::size_t>(v)] = std::exp(static_cast<double>(logits(row, v)) - maxv);
    denom += p[static_cast<std::size_t>(v)];
  }
  for (auto& x : p) x /= denom;
  return p;
}

// -log P(continuation | prompt) under teacher forcing.
template <typename T>
double nll_loss(const Parameters<T>& params, const Prompt& prompt, const Prompt& continuation) {
  require(!continuation.empty(), "nll_loss: empty continuation");
  require(!prompt.empty(), "nll_loss: empty prompt");
  Prompt ids = prompt;
  ids.insert(ids.end(), continuation.begin(), continuation.end());
  ForwardOptions<T> opts;
  opts.logits_from = static_cast<std::int64_t>(prompt.size()) - 1;
  ForwardCache<T> cache;
  forward_cache(params, ids, cache, opts);
  double nll = 0;
  const std::int64_t k = static_cast<std::int64_t>(prompt.size());
  for (std::size_t i = 0; i < continuation.size(); ++i)
    nll -= row_logprob(cache.logits, k - 1 + static_cast<std::int64_t>(i), continuation[i]);
  return nll;
}

// One teacher-forced prediction target within a sequence.
struct LossTerm {
  std::int64_t position;  // logits row
  TokenId target;
  double weight = 1.0;
};

// Reverse pass over a cached forward. Parameter gradients are accumulated
// into `grads` (caller zeroes); the gradient w.r.t. the embedded input
// vectors lands in *demb when given.
template <typename T>
void backward(const Parameters<T>& params, const ForwardCache<T>& cache,
              std::span<const LossTerm> losses, Parameters<T>& grads,
              Tensor<T>* demb = nullptr) {
  const ModelConfig& cfg = params.config;
  const std::int64_t Tn = cache.seq_len, d = cfg.hidden_dim, H = cfg.n_heads, hd = cfg.head_dim();
  const std::int64_t rot = cfg.rotary_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Tensor<T> dlogits(Tn, cfg.vocab_size);
  for (const auto& term : losses) {
    require(term.position >= 0 && term.position < Tn, "loss position out of range");
    auto p = row_softmax(cache.logits, term.position);
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v)
      dlogits(term.position, v) += static_cast<T>(term.weight * p[static_cast<std::size_t>(v)]);
    dlogits(term.position, term.target) -= static_cast<T>(term.weight);
  }

  as_mat(grads.w_head).noalias() += as_mat(cache.nf).transpose() * as_mat(dlogits);
  Tensor<T> dnf(Tn, d);
  as_mat(dnf).noalias() = as_mat(dlogits) * as_mat(params.w_head).transpose();

  Tensor<T> dx(Tn, d);
  detail::layernorm_backward(cache.x_final, params.lnf_g, cache.mean_f, cache.rstd_f, dnf, dx,
                             grads.lnf_g, grads.lnf_b);

  for (std::int64_t l = cfg.n_layers - 1; l >= 0; --l) {
    auto& L = params.layers[static_cast<std::size_t>(l)];
    auto& G = grads.layers[static_cast<std::size_t>(l)];
    auto& C = cache.layers[static_cast<std::size_t>(l)];

    // MLP branch
    Tensor<T> dfc_act(Tn, cfg.ffn_dim);
    as_mat(dfc_act).noalias() = as_mat(dx) * as_mat(L.w_proj).transpose();
    as_mat(G.w_proj).noalias() += as_mat(C.fc_act).transpose() * as_mat(dx);
    as_vec(G.b_proj) += as_mat(dx).colwise().sum().transpose();
    Tensor<T> dfc_pre = dfc_act;
    for (std::int64_t i = 0; i < dfc_pre.size(); ++i)
      dfc_pre[i] = dfc_act[i] * detail::gelu_grad(C.fc_pre[i]);
    as_mat(G.w_fc).noalias() += as_mat(C.n).transpose() * as_mat(dfc_pre);
    as_vec(G.b_fc) += as_mat(dfc_pre).colwise().sum().transpose();
    Tensor<T> dn(Tn, d);
    as_mat(dn).noalias() = as_mat(dfc_pre) * as_mat(L.w_fc).transpose();

    // attention branch
    Tensor<T> dctx(Tn, d);
    as_mat(dctx).noalias() = as_mat(dx) * as_mat(L.w_o).transpose();
    as_mat(G.w_o).noalias() += as_mat(C.ctx).transpose() * as_mat(dx);
    as_vec(G.b_o) += as_mat(dx).colwise().sum().transpose();

    Tensor<T> dqkv(Tn, 3 * d);
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t t = 0; t < Tn; ++t) {
        const T* arow = &C.att(h * Tn + t, 0);
        const T* dctx_row = &dctx(t, h * hd);
        // d_att and the softmax Jacobian, then scores -> q,k
        std::vector<double> datt(static_cast<std::size_t>(t + 1));
        double dot = 0;
        for (std::int64_t u = 0; u <= t; ++u) {
          double acc = 0;
          for (std::int64_t j = 0; j < hd; ++j)
            acc += static_cast<double>(dctx_row[j]) * static_cast<double>(C.qkv(u, 2 * d + h * hd + j));
          datt[static_cast<std::size_t>(u)] = acc;
          dot += acc * static_cast<double>(arow[u]);
          for (std::int64_t j = 0; j < hd; ++j)
            dqkv(u, 2 * d + h * hd + j) += static_cast<T>(static_cast<double>(arow[u]) *
                                                          static_cast<double>(dctx_row[j]));
        }
        for (std::int64_t u = 0; u <= t; ++u) {
          double ds = static_cast<double>(arow[u]) * (datt[static_cast<std::size_t>(u)] - dot) *
                      static_cast<double>(scale);
          for (std::int64_t j = 0; j < hd; ++j) {
            dqkv(t, h * hd + j) += static_cast<T>(ds * static_cast<double>(C.qkv(u, d + h * hd + j)));
            dqkv(u, d + h * hd + j) += static_cast<T>(ds * static_cast<double>(C.qkv(t, h * hd + j)));
          }
        }
      }
    }
    for (std::int64_t t = 0; t < Tn; ++t)
      for (std::int64_t h = 0; h < H; ++h) {
        detail::apply_rotary(&dqkv(t, h * hd), rot, t, -1);
        detail::apply_rotary(&dqkv(t, d + h * hd), rot, t, -1);
      }
    as_mat(G.w_qkv).noalias() += as_mat(C.n).transpose() * as_mat(dqkv);
    as_vec(G.b_qkv) += as_mat(dqkv).colwise().sum().transpose();
    as_mat(dn).noalias() += as_mat(dqkv) * as_mat(L.w_qkv).transpose();

    Tensor<T> dx_in(Tn, d);
    dx_in = dx;  // residual passthrough
    detail::layernorm_backward(C.x_in, L.ln_g, C.mean, C.rstd, dn, dx_in, G.ln_g, G.ln_b);
    dx = std::move(dx_in);
  }

  for (std::int64_t t = 0; t < Tn; ++t)
    for (std::int64_t j = 0; j < d; ++j) grads.wte(cache.ids[static_cast<std::size_t>(t)], j) += dx(t, j);
  if (demb) *demb = std::move(dx);
}

template <typename T>
Parameters<T> backward_params(const Parameters<T>& params, const Prompt& prompt,
                              const Prompt& continuation) {
  require(!continuation.empty(), "backward_params: empty continuation");
  Prompt ids = prompt;
  ids.insert(ids.end(), continuation.begin(), continuation.end());
  const std::int64_t k = static_cast<std::int64_t>(prompt.size());
  ForwardOptions<T> opts;
  opts.logits_from = k - 1;
  ForwardCache<T> cache;
  forward_cache(params, ids, cache, opts);
  std::vector<LossTerm> losses;
  for (std::size_t i = 0; i < continuation.size(); ++i)
    losses.push_back({k - 1 + static_cast<std::int64_t>(i), continuation[i], 1.0});
  auto grads = Parameters<T>::zeros(params.config);
  backward(params, cache, losses, grads);
  grads.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    if (!t.all_finite()) throw NumericError("backward_params: non-finite gradient in " + name);
  });
  return grads;
}

// Continuations sampled from P_LM(.|source), the Eq.-style KL estimator input.
struct ContinuationSet {
  Prompt source;
  std::vector<Prompt> continuations;
  std::uint64_t seed = 0;
};

struct SamplingConfig {
  std::int64_t n = 32;
  std::int64_t max_len = 32;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 0;
};

template <typename T>
ContinuationSet sample_continuations(const Parameters<T>& params, const Prompt& prompt,
                                     const SamplingConfig& sc) {
  require(sc.n >= 1, "sample_continuations: n must be >= 1");
  require(sc.max_len >= 1, "sample_continuations: max_len must be >= 1");
  require(sc.temperature > 0.0, "sample_continuations: temperature must be > 0");
  require(!prompt.empty(), "sample_continuations: empty prompt");
  ContinuationSet set;
  set.source = prompt;
  set.seed = sc.seed;
  set.continuations.resize(static_cast<std::size_t>(sc.n));
  const TokenId eos = Vocab::kEos;
  for (std::int64_t i = 0; i < sc.n; ++i) {
    Rng rng(derive_seed(sc.seed, "continuation", static_cast<std::uint64_t>(i)));
    Prompt ids = prompt;
    Prompt& cont = set.continuations[static_cast<std::size_t>(i)];
    while (static_cast<std::int64_t>(cont.size()) < sc.max_len &&
           static_cast<std::int64_t>(ids.size()) < params.config.max_seq_len) {
      ForwardOptions<T> opts;
      opts.logits_from = static_cast<std::int64_t>(ids.size()) - 1;
      auto res = forward(params, ids, opts);
      const std::int64_t last = static_cast<std::int64_t>(ids.size()) - 1;
      TokenId next;
      if (sc.greedy) {
        next = 0;
        for (std::int64_t v = 1; v < params.config.vocab_size; ++v)
          if (res.logits(last, v) > res.logits(last, next)) next = static_cast<TokenId>(v);
      } else {
        auto p = row_softmax(res.logits, last);
        if (sc.temperature != 1.0) {
          double denom = 0;
          for (auto& x : p) {
            x = std::pow(x, 1.0 / sc.temperature);
            denom += x;
          }
          for (auto& x : p) x /= denom;
        }
        double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double cum = 0;
        next = static_cast<TokenId>(p.size() - 1);
        for (std::size_t v = 0; v < p.size(); ++v) {
          cum += p[v];
          if (r < cum) {
            next = static_cast<TokenId>(v);
            break;
          }
        }
      }
      cont.push_back(next);
      ids.push_back(next);
      if (next == eos) break;
    }
    if (cont.empty()) cont.push_back(eos);  // context exhausted before any token
  }
  return set;
}

// Gradient of the summed continuation NLL w.r.t. the one-hot token choice at
// each prompt position: k x V.
template <typename T>
Tensor<T> input_token_gradients(const Parameters<T>& params, const Prompt& prompt,
                                const ContinuationSet& conts) {
  const std::int64_t k = static_cast<std::int64_t>(prompt.size());
  require(k >= 1, "input_token_gradients: empty prompt");
  Tensor<T> demb_sum(k, params.config.hidden_dim);
  for (const Prompt& cont : conts.continuations) {
    require(!cont.empty(), "input_token_gradients: empty continuation");
    Prompt ids = prompt;
    ids.insert(ids.end(), cont.begin(), cont.end());
    ForwardOptions<T> opts;
    opts.logits_from = k - 1;
    ForwardCache<T> cache;
    forward_cache(params, ids, cache, opts);
    std::vector<LossTerm> losses;
    for (std::size_t i = 0; i < cont.size(); ++i)
      losses.push_back({k - 1 + static_cast<std::int64_t>(i), cont[i], 1.0});
    auto grads = Parameters<T>::zeros(params.config);
    Tensor<T> demb;
    backward(params, cache, losses, grads, &demb);
    for (std::int64_t t = 0; t < k; ++t)
      for (std::int64_t j = 0; j < params.config.hidden_dim; ++j) demb_sum(t, j) += demb(t, j);
  }
  Tensor<T> out(k, params.config.vocab_size);
  as_mat(out).noalias() = as_mat(demb_sum) * as_mat(params.wte).transpose();
  return out;
}

// Probability vector over V, entries nonnegative and summing to 1.
using NextTokenDistribution = std::vector<double>;

// Project an intermediate residual state through the final LayerNorm and LM
// head: the layer-l next-token reading of the stream.
template <typename T>
NextTokenDistribution logit_lens(const Parameters<T>& params, const ActivationTrace<T>& trace,
                                 std::int64_t layer, std::int64_t position) {
  auto h = trace.at(layer, position);
  const std::int64_t d = params.config.hidden_dim, V = params.config.vocab_size;
  double m = 0;
  for (std::int64_t j = 0; j < d; ++j) m += static_cast<double>(h[static_cast<std::size_t>(j)]);
  m /= static_cast<double>(d);
  double var = 0;
  for (std::int64_t j = 0; j < d; ++j) {
    double dv = static_cast<double>(h[static_cast<std::size_t>(j)]) - m;
    var += dv * dv;
  }
  var /= static_cast<double>(d);
  double rs = 1.0 / std::sqrt(var + kLayerNormEps);
  std::vector<double> nf(static_cast<std::size_t>(d));
  for (std::int64_t j = 0; j < d; ++j)
    nf[static_cast<std::size_t>(j)] = (static_cast<double>(h[static_cast<std::size_t>(j)]) - m) * rs *
                                          static_cast<double>(params.lnf_g[j]) +
                                      static_cast<double>(params.lnf_b[j]);
  std::vector<double> logits(static_cast<std::size_t>(V), 0.0);
  for (std::int64_t v = 0; v < V; ++v) {
    double acc = 0;
    for (std::int64_t j = 0; j < d; ++j)
      acc += nf[static_cast<std::size_t>(j)] * static_cast<double>(params.w_head(j, v));
    logits[static_cast<std::size_t>(v)] = acc;
  }
  double maxv = *std::max_element(logits.begin(), logits.end());
  double denom = 0;
  for (auto& x : logits) {
    x = std::exp(x - maxv);
    denom += x;
  }
  for (auto& x : logits) x /= denom;
  return logits;
}

}  // namespace promptlab
