#pragma once

// Activation-space experiments: last-token feature extraction, mean-difference
// feature ranking, sparse logistic probes with baselines, causal feature
// ablation with top-10 overlap, and layer-wise divergence profiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "engine.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "twin.hpp"

namespace promptlab {

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

// One row per prompt: the final-position residual state h^(l).
struct FeatureMatrix {
  std::int64_t layer = 0;
  Tensor<double> x;             // n x d
  std::vector<int> labels;      // natural = 1, optimized/baseline = 0
};

template <typename T>
FeatureMatrix extract_features(const Parameters<T>& params,
                               const std::vector<Prompt>& prompts,
                               std::int64_t layer) {
  require(!prompts.empty(), "extract_features: no prompts");
  require(layer >= 1 && layer <= params.config.n_layers,
          "extract_features: layer out of range");
  const std::int64_t d = params.config.hidden_dim;
  FeatureMatrix fm;
  fm.layer = layer;
  fm.x = Tensor<double>({static_cast<std::int64_t>(prompts.size()), d});
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto& p = prompts[i];
    const auto last = static_cast<std::int64_t>(p.size()) - 1;
    ForwardOptions<T> opts;
    opts.capture_positions = {last};
    opts.logits_from = last;  // logits are not needed here
    auto res = forward(params, p, opts);
    auto row = res.trace.at(layer, last);
    for (std::int64_t j = 0; j < d; ++j)
      fm.x(static_cast<std::int64_t>(i), j) = static_cast<double>(row[static_cast<std::size_t>(j)]);
  });
  return fm;
}

// ---------------------------------------------------------------------------
// Mean-difference feature ranking
// ---------------------------------------------------------------------------

struct MmdRanking {
  std::vector<double> delta;        // signed mean_natural - mean_optimized
  std::vector<std::int64_t> order;  // feature indices, |delta| descending
};

namespace detail {

inline MmdRanking mmd_rank_rows(const Tensor<double>& x,
                                const std::vector<std::size_t>& class1_rows,
                                const std::vector<std::size_t>& class0_rows) {
  require(!class1_rows.empty() && !class0_rows.empty(),
          "mmd_rank: a class is empty");
  const std::int64_t d = x.shape[1];
  MmdRanking r;
  r.delta.assign(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t j = 0; j < d; ++j) {
    double m1 = 0, m0 = 0;
    for (std::size_t i : class1_rows) m1 += x(static_cast<std::int64_t>(i), j);
    for (std::size_t i : class0_rows) m0 += x(static_cast<std::int64_t>(i), j);
    r.delta[static_cast<std::size_t>(j)] =
        m1 / static_cast<double>(class1_rows.size()) -
        m0 / static_cast<double>(class0_rows.size());
  }
  r.order.resize(static_cast<std::size_t>(d));
  std::iota(r.order.begin(), r.order.end(), std::int64_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return std::abs(r.delta[static_cast<std::size_t>(a)]) >
                            std::abs(r.delta[static_cast<std::size_t>(b)]);
                   });
  return r;
}

}  // namespace detail

inline MmdRanking mmd_rank(const FeatureMatrix& natural,
                           const FeatureMatrix& optimized) {
  require(natural.x.shape[1] == optimized.x.shape[1],
          "mmd_rank: feature width mismatch");
  require(natural.layer == optimized.layer, "mmd_rank: layer mismatch");
  Tensor<double> joined({natural.x.shape[0] + optimized.x.shape[0], natural.x.shape[1]});
  std::vector<std::size_t> rows1, rows0;
  std::int64_t r = 0;
  for (std::int64_t i = 0; i < natural.x.shape[0]; ++i, ++r) {
    rows1.push_back(static_cast<std::size_t>(r));
    for (std::int64_t j = 0; j < natural.x.shape[1]; ++j) joined(r, j) = natural.x(i, j);
  }
  for (std::int64_t i = 0; i < optimized.x.shape[0]; ++i, ++r) {
    rows0.push_back(static_cast<std::size_t>(r));
    for (std::int64_t j = 0; j < optimized.x.shape[1]; ++j) joined(r, j) = optimized.x(i, j);
  }
  return detail::mmd_rank_rows(joined, rows1, rows0);
}

// ---------------------------------------------------------------------------
// Sparse logistic probes
// ---------------------------------------------------------------------------

struct ProbeResult {
  std::int64_t layer = 0;
  std::int64_t k = 0;
  std::string type;  // optimized-vs-natural | natural-vs-natural | natural-vs-random
  double test_acc = 0.0;
  double train_acc = 0.0;
  std::int64_t n_class0 = 0;
  std::int64_t n_class1 = 0;
  // fitted model, for export and leakage audits
  std::vector<std::int64_t> features;   // top-k by train-split ranking
  std::vector<double> coef;             // per selected feature (z-scored space)
  double bias = 0.0;
  std::vector<double> feat_mean;        // train-split standardization
  std::vector<double> feat_std;
};

// Stratified 80/20 split, feature ranking and standardization computed on the
// training rows only, then an L2 logistic regression fit by plain gradient
// descent: at most 100 iterations, gradient tolerance 1e-4.
inline ProbeResult train_probe(const FeatureMatrix& fm, std::int64_t k,
                               std::uint64_t seed, const std::string& type = "") {
  const std::int64_t n = fm.x.shape[0];
  const std::int64_t d = fm.x.shape[1];
  require(static_cast<std::int64_t>(fm.labels.size()) == n,
          "train_probe: labels do not match rows");
  require(k >= 1 && k <= d, "train_probe: k out of range");

  std::vector<std::size_t> class_rows[2];
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = fm.labels[static_cast<std::size_t>(i)];
    require(y == 0 || y == 1, "train_probe: labels must be 0/1");
    class_rows[y].push_back(static_cast<std::size_t>(i));
  }
  require(class_rows[0].size() >= 2 && class_rows[1].size() >= 2,
          "train_probe: need at least 2 examples per class");

  std::vector<std::size_t> train, test, train1, train0;
  for (int y = 0; y < 2; ++y) {
    auto rows = class_rows[y];
    Rng rng(derive_seed(seed, "probe-split", static_cast<std::uint64_t>(y)));
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t n_train = std::max<std::size_t>(1, rows.size() * 8 / 10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i < n_train) {
        train.push_back(rows[i]);
        (y == 1 ? train1 : train0).push_back(rows[i]);
      } else {
        test.push_back(rows[i]);
      }
    }
  }

  auto ranking = detail::mmd_rank_rows(fm.x, train1, train0);

  ProbeResult res;
  res.layer = fm.layer;
  res.k = k;
  res.type = type;
  res.n_class0 = static_cast<std::int64_t>(class_rows[0].size());
  res.n_class1 = static_cast<std::int64_t>(class_rows[1].size());
  res.features.assign(ranking.order.begin(), ranking.order.begin() + k);

  // standardize selected features by train statistics
  res.feat_mean.assign(static_cast<std::size_t>(k), 0.0);
  res.feat_std.assign(static_cast<std::size_t>(k), 0.0);
  for (std::int64_t j = 0; j < k; ++j) {
    const std::int64_t f = res.features[static_cast<std::size_t>(j)];
    double m = 0;
    for (std::size_t i : train) m += fm.x(static_cast<std::int64_t>(i), f);
    m /= static_cast<double>(train.size());
    double s2 = 0;
    for (std::size_t i : train) {
      const double dlt = fm.x(static_cast<std::int64_t>(i), f) - m;
      s2 += dlt * dlt;
    }
    res.feat_mean[static_cast<std::size_t>(j)] = m;
    res.feat_std[static_cast<std::size_t>(j)] =
        std::max(std::sqrt(s2 / static_cast<double>(train.size())), 1e-8);
  }
  auto zrow = [&](std::size_t i, std::int64_t j) {
    return (fm.x(static_cast<std::int64_t>(i), res.features[static_cast<std::size_t>(j)]) -
            res.feat_mean[static_cast<std::size_t>(j)]) /
           res.feat_std[static_cast<std::size_t>(j)];
  };

  // Newton (IRLS) on the regularized logistic loss. Plain first-order steps
  // make almost no progress in the iteration budget; second-order steps reach
  // the optimum well within it. A small uniform ridge keeps the Hessian
  // solvable when the classes are separable and the curvature collapses.
  constexpr double kL2 = 1e-3;
  const std::int64_t m = k + 1;  // weights + bias
  Eigen::MatrixXd xt(static_cast<Eigen::Index>(train.size()), m);
  Eigen::VectorXd yt(static_cast<Eigen::Index>(train.size()));
  for (std::size_t r = 0; r < train.size(); ++r) {
    for (std::int64_t j = 0; j < k; ++j) xt(static_cast<Eigen::Index>(r), j) = zrow(train[r], j);
    xt(static_cast<Eigen::Index>(r), k) = 1.0;
    yt(static_cast<Eigen::Index>(r)) = fm.labels[train[r]] == 1 ? 1.0 : -1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(train.size());
  Eigen::VectorXd w = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(m, kL2);
  reg(k) = 0.0;  // bias is not penalized
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd score = xt * w;
    const Eigen::VectorXd sig = (1.0 + (yt.array() * score.array()).exp()).inverse().matrix();
    const Eigen::VectorXd grad =
        -inv_n * (xt.transpose() * (yt.array() * sig.array()).matrix()) +
        (reg.array() * w.array()).matrix();
    if (grad.lpNorm<Eigen::Infinity>() < 1e-4) break;
    const Eigen::VectorXd curv = (sig.array() * (1.0 - sig.array())).matrix();
    Eigen::MatrixXd hess = inv_n * (xt.transpose() * curv.asDiagonal() * xt);
    hess.diagonal() += reg;
    hess.diagonal().array() += 1e-9;
    w -= hess.ldlt().solve(grad);
  }
  res.coef.assign(static_cast<std::size_t>(k), 0.0);
  for (std::int64_t j = 0; j < k; ++j) res.coef[static_cast<std::size_t>(j)] = w(j);
  res.bias = w(k);

  auto accuracy = [&](const std::vector<std::size_t>& rows) {
    std::int64_t correct = 0;
    for (std::size_t i : rows) {
      double score = res.bias;
      for (std::int64_t j = 0; j < k; ++j)
        score += res.coef[static_cast<std::size_t>(j)] * zrow(i, j);
      const int pred = score > 0 ? 1 : 0;
      if (pred == fm.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(rows.size());
  };
  res.train_acc = accuracy(train);
  res.test_acc = accuracy(test);
  return res;
}

inline std::vector<std::int64_t> default_probe_ks(std::int64_t d) {
  std::vector<std::int64_t> ks;
  for (std::int64_t k : {std::int64_t{1}, std::int64_t{2}, std::int64_t{4},
                         std::int64_t{8}, std::int64_t{16}, std::int64_t{32},
                         std::int64_t{64}, d})
    if (k >= 1 && k <= d && (ks.empty() || ks.back() != k)) ks.push_back(k);
  return ks;
}

template <typename T>
std::vector<ProbeResult> probe_sweep(const Parameters<T>& params,
                                     const std::vector<PromptPair>& pairs,
                                     const std::vector<std::int64_t>& layers,
                                     std::vector<std::int64_t> ks,
                                     bool baselines, std::uint64_t seed) {
  require(pairs.size() >= 20, "probe_sweep: need at least 20 pairs");
  if (ks.empty()) ks = default_probe_ks(params.config.hidden_dim);

  std::vector<Prompt> naturals, optimized, randoms;
  for (const auto& pr : pairs) {
    naturals.push_back(pr.original);
    optimized.push_back(pr.optimized);
  }
  if (baselines) {
    // uniform-random token sequences matching the natural length distribution
    for (std::size_t i = 0; i < naturals.size(); ++i) {
      Rng rng(derive_seed(seed, "random-prompt", static_cast<std::uint64_t>(i)));
      std::uniform_int_distribution<TokenId> pick(
          3, static_cast<TokenId>(params.config.vocab_size - 1));
      Prompt p(naturals[i].size());
      for (auto& t : p) t = pick(rng);
      randoms.push_back(std::move(p));
    }
  }

  std::vector<ProbeResult> grid;
  for (std::int64_t layer : layers) {
    auto nat = extract_features(params, naturals, layer);
    auto opt = extract_features(params, optimized, layer);

    auto run = [&](const FeatureMatrix& a1, const FeatureMatrix& a0,
                   const std::string& type) {
      FeatureMatrix fm;
      fm.layer = layer;
      fm.x = Tensor<double>({a1.x.shape[0] + a0.x.shape[0], a1.x.shape[1]});
      std::int64_t r = 0;
      for (std::int64_t i = 0; i < a1.x.shape[0]; ++i, ++r) {
        fm.labels.push_back(1);
        for (std::int64_t j = 0; j < fm.x.shape[1]; ++j) fm.x(r, j) = a1.x(i, j);
      }
      for (std::int64_t i = 0; i < a0.x.shape[0]; ++i, ++r) {
        fm.labels.push_back(0);
        for (std::int64_t j = 0; j < fm.x.shape[1]; ++j) fm.x(r, j) = a0.x(i, j);
      }
      for (std::int64_t k : ks)
        grid.push_back(train_probe(
            fm, k,
            derive_seed(seed, type, static_cast<std::uint64_t>(layer)), type));
    };

    run(nat, opt, "optimized-vs-natural");
    if (baselines) {
      // natural-vs-other-natural: alternate rows into two pseudo-classes
      std::vector<Prompt> half1, half0;
      for (std::size_t i = 0; i < naturals.size(); ++i)
        (i % 2 == 0 ? half1 : half0).push_back(naturals[i]);
      run(extract_features(params, half1, layer),
          extract_features(params, half0, layer), "natural-vs-natural");
      run(nat, extract_features(params, randoms, layer), "natural-vs-random");
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Causal feature ablation
// ---------------------------------------------------------------------------

namespace detail {

// top-m token ids by probability, ties toward the lower id
inline std::vector<TokenId> top_tokens(const NextTokenDistribution& dist,
                                       std::size_t m) {
  std::vector<TokenId> ids(dist.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  m = std::min(m, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(m),
                    ids.end(), [&](TokenId a, TokenId b) {
                      if (dist[static_cast<std::size_t>(a)] != dist[static_cast<std::size_t>(b)])
                        return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)];
                      return a < b;
                    });
  ids.resize(m);
  return ids;
}

}  // namespace detail

// |top10(clean) ∩ top10(ablated)| / 10, measured at the final position.
// Models with fewer than 10 vocabulary entries use top-V instead.
template <typename T>
double intervene_overlap(const Parameters<T>& params, const Prompt& prompt,
                         std::int64_t layer,
                         const std::vector<std::int64_t>& features) {
  const auto last = static_cast<std::int64_t>(prompt.size()) - 1;
  ForwardOptions<T> clean_opts;
  clean_opts.logits_from = last;
  auto clean = row_softmax(forward(params, prompt, clean_opts).logits, last);

  NextTokenDistribution ablated;
  if (features.empty()) {
    ablated = clean;
  } else {
    AblationMask mask{layer, features};
    mask.validate(params.config);
    ForwardOptions<T> opts;
    opts.logits_from = last;
    opts.mask = &mask;
    ablated = row_softmax(forward(params, prompt, opts).logits, last);
  }

  const std::size_t m = std::min<std::size_t>(10, static_cast<std::size_t>(params.config.vocab_size));
  auto a = detail::top_tokens(clean, m);
  auto b = detail::top_tokens(ablated, m);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<TokenId> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                        std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(m);
}

// Cross-pair reading: the intervened prompt's top tokens against its twin's
// clean top tokens.
template <typename T>
double intervene_overlap_cross(const Parameters<T>& params, const Prompt& prompt,
                               const Prompt& reference, std::int64_t layer,
                               const std::vector<std::int64_t>& features) {
  auto dist_of = [&](const Prompt& p, const std::vector<std::int64_t>* feats) {
    const auto last = static_cast<std::int64_t>(p.size()) - 1;
    ForwardOptions<T> opts;
    opts.logits_from = last;
    AblationMask mask;
    if (feats && !feats->empty()) {
      mask = AblationMask{layer, *feats};
      mask.validate(params.config);
      opts.mask = &mask;
    }
    return row_softmax(forward(params, p, opts).logits, last);
  };
  auto clean = dist_of(reference, nullptr);
  auto ablated = dist_of(prompt, &features);
  const std::size_t m = std::min<std::size_t>(10, static_cast<std::size_t>(params.config.vocab_size));
  auto a = detail::top_tokens(clean, m);
  auto b = detail::top_tokens(ablated, m);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<TokenId> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                        std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(m);
}

enum class OverlapMode { Own, Cross };

struct InterventionResult {
  std::int64_t layer = 0;
  std::int64_t k = 0;
  std::string prompt_class;  // natural | optimized
  std::string selection;     // mmd-top | random
  double mean_overlap = 0.0;
  std::uint64_t seed = 0;    // the draw seed for random selections
};

template <typename T>
std::vector<InterventionResult>
intervention_sweep(const Parameters<T>& params,
                   const std::vector<PromptPair>& pairs,
                   const std::vector<std::int64_t>& layers,
                   const std::vector<std::int64_t>& ks, std::uint64_t seed,
                   OverlapMode mode = OverlapMode::Own) {
  require(!pairs.empty(), "intervention_sweep: no pairs");
  const std::int64_t d = params.config.hidden_dim;

  std::vector<Prompt> naturals, optimized;
  for (const auto& pr : pairs) {
    naturals.push_back(pr.original);
    optimized.push_back(pr.optimized);
  }

  std::vector<InterventionResult> grid;
  for (std::int64_t layer : layers) {
    auto ranking = mmd_rank(extract_features(params, naturals, layer),
                            extract_features(params, optimized, layer));
    for (std::int64_t k : ks) {
      require(k >= 0 && k <= d, "intervention_sweep: k out of range");
      std::vector<std::int64_t> top(ranking.order.begin(), ranking.order.begin() + k);

      // one seeded uniform draw of k features, shared across prompts
      const std::uint64_t draw_seed = derive_seed(
          seed, "random-features",
          static_cast<std::uint64_t>(layer) * 100000 + static_cast<std::uint64_t>(k));
      std::vector<std::int64_t> all(static_cast<std::size_t>(d));
      std::iota(all.begin(), all.end(), std::int64_t{0});
      Rng rng(draw_seed);
      std::shuffle(all.begin(), all.end(), rng);
      std::vector<std::int64_t> random_sel(all.begin(), all.begin() + k);

      struct Cell {
        const std::vector<Prompt>* prompts;
        const std::vector<Prompt>* twins;  // clean reference in cross mode
        const std::vector<std::int64_t>* features;
        const char* cls;
        const char* sel;
      };
      const Cell cells[] = {
          {&naturals, &optimized, &top, "natural", "mmd-top"},
          {&optimized, &naturals, &top, "optimized", "mmd-top"},
          {&naturals, &optimized, &random_sel, "natural", "random"},
          {&optimized, &naturals, &random_sel, "optimized", "random"},
      };
      for (const auto& cell : cells) {
        std::vector<double> overlaps(cell.prompts->size());
        parallel_for(cell.prompts->size(), [&](std::size_t i) {
          overlaps[i] =
              mode == OverlapMode::Own
                  ? intervene_overlap(params, (*cell.prompts)[i], layer,
                                      *cell.features)
                  : intervene_overlap_cross(params, (*cell.prompts)[i],
                                            (*cell.twins)[i], layer,
                                            *cell.features);
        });
        const double mean =
            std::accumulate(overlaps.begin(), overlaps.end(), 0.0) /
            static_cast<double>(overlaps.size());
        grid.push_back({layer, k, cell.cls, cell.sel, mean,
                        std::string(cell.sel) == "random" ? draw_seed : 0});
      }
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Layer-wise divergence profile
// ---------------------------------------------------------------------------

struct LayerKLProfile {
  std::string pair_id;
  std::vector<double> kl;  // entry l-1 = divergence at layer l
};

enum class LayerKlMode {
  Exact,    // exact next-token KL between lens distributions
  Sampled,  // Eq.-1-style estimator over sampled continuations, through the lens
};

// Project both prompts' final-position states through the logit lens at every
// layer and compare the resulting next-token distributions.
template <typename T>
LayerKLProfile layerwise_kl(const Parameters<T>& params, const PromptPair& pair,
                            LayerKlMode mode = LayerKlMode::Exact,
                            const ContinuationSet* conts = nullptr) {
  const std::int64_t L = params.config.n_layers;
  LayerKLProfile prof;
  prof.pair_id = std::to_string(pair.id);
  prof.kl.assign(static_cast<std::size_t>(L), 0.0);

  if (mode == LayerKlMode::Exact) {
    auto capture_last = [&](const Prompt& p) {
      ForwardOptions<T> opts;
      const auto last = static_cast<std::int64_t>(p.size()) - 1;
      opts.capture_positions = {last};
      opts.logits_from = last;
      return forward(params, p, opts).trace;
    };
    auto trace_star = capture_last(pair.optimized);
    auto trace_nat = capture_last(pair.original);
    const auto last_star = static_cast<std::int64_t>(pair.optimized.size()) - 1;
    const auto last_nat = static_cast<std::int64_t>(pair.original.size()) - 1;
    for (std::int64_t l = 1; l <= L; ++l) {
      auto q_star = logit_lens(params, trace_star, l, last_star);
      auto q_nat = logit_lens(params, trace_nat, l, last_nat);
      double kl = 0;
      for (std::size_t v = 0; v < q_star.size(); ++v)
        kl += q_star[v] * (std::log(q_star[v]) - std::log(q_nat[v]));
      prof.kl[static_cast<std::size_t>(l - 1)] = std::max(kl, 0.0);
    }
    return prof;
  }

  // Sampled mode: mean over continuations of the lens log-probability gap,
  // accumulated token by token along each continuation.
  require(conts != nullptr && !conts->continuations.empty(),
          "layerwise_kl: sampled mode needs continuations");
  auto lens_logprob = [&](const Prompt& prefix, const Prompt& cont,
                          std::vector<double>& out_per_layer) {
    Prompt full = prefix;
    full.insert(full.end(), cont.begin(), cont.end());
    ForwardOptions<T> opts;
    for (std::size_t i = 0; i < cont.size(); ++i)
      opts.capture_positions.push_back(
          static_cast<std::int64_t>(prefix.size() + i) - 1);
    opts.logits_from = static_cast<std::int64_t>(full.size());
    auto trace = forward(params, full, opts).trace;
    for (std::int64_t l = 1; l <= L; ++l) {
      double lp = 0;
      for (std::size_t i = 0; i < cont.size(); ++i) {
        auto dist = logit_lens(params, trace, l,
                               static_cast<std::int64_t>(prefix.size() + i) - 1);
        lp += std::log(dist[static_cast<std::size_t>(cont[i])]);
      }
      out_per_layer[static_cast<std::size_t>(l - 1)] = lp;
    }
  };
  std::vector<double> lp_star(static_cast<std::size_t>(L));
  std::vector<double> lp_nat(static_cast<std::size_t>(L));
  for (const auto& cont : conts->continuations) {
    lens_logprob(pair.optimized, cont, lp_star);
    lens_logprob(pair.original, cont, lp_nat);
    for (std::int64_t l = 0; l < L; ++l)
      prof.kl[static_cast<std::size_t>(l)] +=
          (lp_star[static_cast<std::size_t>(l)] - lp_nat[static_cast<std::size_t>(l)]) /
          static_cast<double>(conts->continuations.size());
  }
  return prof;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline void save_probe_results_csv(const std::vector<ProbeResult>& grid,
                                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "layer,k,type,test_acc,train_acc\n";
  for (const auto& r : grid)
    out << r.layer << ',' << r.k << ',' << r.type << ',' << r.test_acc << ','
        << r.train_acc << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void save_intervention_csv(const std::vector<InterventionResult>& grid,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "layer,k,class,selection,mean_overlap\n";
  for (const auto& r : grid)
    out << r.layer << ',' << r.k << ',' << r.prompt_class << ',' << r.selection
        << ',' << r.mean_overlap << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void save_layerwise_kl_csv(const std::vector<LayerKLProfile>& profiles,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "pair_id,layer,kl\n";
  for (const auto& prof : profiles)
    for (std::size_t l = 0; l < prof.kl.size(); ++l)
      out << prof.pair_id << ',' << (l + 1) << ',' << prof.kl[l] << '\n';
  if (!out) throw IoError("write failed: " + path);
}

// Manifest JSON plus a little-endian float32 blob at path + ".bin".
// Per-probe blob layout: k coefficients, the bias, k feature means, k feature
// standard deviations; offsets are in floats.
inline void save_probe_weights(const std::vector<ProbeResult>& grid,
                               const std::string& path) {
  nlohmann::json manifest;
  manifest["probes"] = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto& r : grid) {
    nlohmann::json entry;
    entry["layer"] = r.layer;
    entry["k"] = r.k;
    entry["type"] = r.type;
    entry["features"] = r.features;
    entry["offset"] = blob.size();
    entry["count"] = 3 * r.coef.size() + 1;
    manifest["probes"].push_back(entry);
    for (double c : r.coef) blob.push_back(static_cast<float>(c));
    blob.push_back(static_cast<float>(r.bias));
    for (double m : r.feat_mean) blob.push_back(static_cast<float>(m));
    for (double s : r.feat_std) blob.push_back(static_cast<float>(s));
  }
  {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path);
  }
  std::ofstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open for writing: " + path + ".bin");
  bin.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!bin) throw IoError("write failed: " + path + ".bin");
}

}  // namespace promptlab
