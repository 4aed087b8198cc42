#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/engine.hpp"
#include "promptlab/parallel.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/vocab.hpp"

namespace promptlab {

struct GcgConfig {
  std::int64_t prompt_len = 20;
  std::int64_t topk = 256;       // clamped to V
  std::int64_t batch = 128;      // candidate substitutions per step
  std::int64_t max_steps = 500;
  double early_stop = 5.0;       // stop once d_KL drops to this
  double filter = 10.0;          // final keep threshold
  std::uint64_t seed = 0;

  void validate() const {
    if (prompt_len < 1) throw ConfigError("gcg config: prompt_len must be >= 1");
    if (topk < 1) throw ConfigError("gcg config: topk must be >= 1");
    if (batch < 1) throw ConfigError("gcg config: batch must be >= 1");
    if (max_steps < 0) throw ConfigError("gcg config: max_steps must be >= 0");
    if (early_stop <= 0.0 || filter <= 0.0) throw ConfigError("gcg config: thresholds must be positive");
  }
};

inline void to_json(nlohmann::json& j, const GcgConfig& c) {
  j = {{"prompt_len", c.prompt_len}, {"topk", c.topk},           {"batch", c.batch},
       {"max_steps", c.max_steps},   {"early_stop", c.early_stop}, {"filter", c.filter},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GcgConfig& c) {
  GcgConfig d;
  c.prompt_len = j.value("prompt_len", d.prompt_len);
  c.topk = j.value("topk", d.topk);
  c.batch = j.value("batch", d.batch);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.early_stop = j.value("early_stop", d.early_stop);
  c.filter = j.value("filter", d.filter);
  c.seed = j.value("seed", d.seed);
}

struct PromptPair {
  std::int64_t id = 0;
  Prompt original;
  Prompt optimized;
  double d_kl = 0.0;
  std::int64_t steps_used = 0;
  bool converged = false;
  std::uint64_t seed = 0;
  std::vector<double> kl_history;  // best-so-far per step, not serialized
};

// Summed NLL of all continuations given the prompt: the GCG candidate loss.
template <typename T>
double summed_nll(const Parameters<T>& params, const Prompt& prompt, const ContinuationSet& conts) {
  double total = 0;
  for (const Prompt& c : conts.continuations) total += nll_loss(params, prompt, c);
  return total;
}

// Sample estimator of d_KL(p_star || p) over a fixed continuation set. Can go
// negative for finite samples; callers must tolerate that.
template <typename T>
double estimate_kl(const Parameters<T>& params, const Prompt& p_star, const Prompt& p,
                   const ContinuationSet& conts) {
  require(!conts.continuations.empty(), "estimate_kl: empty continuation set");
  double acc = 0;
  for (const Prompt& c : conts.continuations) {
    // log P(d|p*) - log P(d|p); identical prompts cancel term by term
    acc += nll_loss(params, p, c) - nll_loss(params, p_star, c);
  }
  return acc / static_cast<double>(conts.continuations.size());
}

struct GcgStepResult {
  Prompt prompt;
  double loss;
};

// One greedy-coordinate-gradient step: gradient-ranked top-k replacements per
// position, a uniform sample of B distinct (position, candidate) pairs, and
// the strict loss minimizer with the incumbent kept on ties.
template <typename T>
GcgStepResult gcg_step(const Parameters<T>& params, const Prompt& p, const ContinuationSet& conts,
                       std::int64_t topk, std::int64_t batch, std::uint64_t seed) {
  const std::int64_t l = static_cast<std::int64_t>(p.size());
  require(l >= 1, "gcg_step: empty prompt");
  require(batch >= 1, "gcg_step: candidate batch must be >= 1");
  const std::int64_t V = params.config.vocab_size;
  const std::int64_t k = std::min(topk, V);

  Tensor<T> grads = input_token_gradients(params, p, conts);

  // most-negative gradient entries per position, ties to the lower token id
  std::vector<std::vector<TokenId>> candidates(static_cast<std::size_t>(l));
  for (std::int64_t i = 0; i < l; ++i) {
    std::vector<TokenId> ids(static_cast<std::size_t>(V));
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](TokenId a, TokenId b) {
      if (grads(i, a) != grads(i, b)) return grads(i, a) < grads(i, b);
      return a < b;
    });
    ids.resize(static_cast<std::size_t>(k));
    candidates[static_cast<std::size_t>(i)] = std::move(ids);
  }

  // flattened (position, rank) grid; take everything when B covers it
  const std::int64_t grid = l * k;
  std::vector<std::int64_t> chosen(static_cast<std::size_t>(grid));
  std::iota(chosen.begin(), chosen.end(), 0);
  if (batch < grid) {
    Rng rng(seed);
    for (std::int64_t i = 0; i < batch; ++i) {
      std::int64_t j = i + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(grid - i));
      std::swap(chosen[static_cast<std::size_t>(i)], chosen[static_cast<std::size_t>(j)]);
    }
    chosen.resize(static_cast<std::size_t>(batch));
    std::sort(chosen.begin(), chosen.end());  // evaluation order independent of the draw order
  }

  double incumbent_loss = summed_nll(params, p, conts);
  if (!std::isfinite(incumbent_loss)) throw NumericError("gcg_step: non-finite incumbent loss");

  std::vector<double> losses(chosen.size());
  std::vector<std::pair<std::int64_t, TokenId>> subs(chosen.size());
  parallel_for(static_cast<std::int64_t>(chosen.size()), [&](std::int64_t c) {
    std::int64_t flat = chosen[static_cast<std::size_t>(c)];
    std::int64_t pos = flat / k;
    TokenId tok = candidates[static_cast<std::size_t>(pos)][static_cast<std::size_t>(flat % k)];
    subs[static_cast<std::size_t>(c)] = {pos, tok};
    if (tok == p[static_cast<std::size_t>(pos)]) {
      losses[static_cast<std::size_t>(c)] = incumbent_loss;
      return;
    }
    Prompt candidate = p;
    candidate[static_cast<std::size_t>(pos)] = tok;
    losses[static_cast<std::size_t>(c)] = summed_nll(params, candidate, conts);
  });

  GcgStepResult best{p, incumbent_loss};
  std::optional<std::pair<std::int64_t, TokenId>> best_sub;
  for (std::size_t c = 0; c < chosen.size(); ++c) {
    if (!std::isfinite(losses[c])) throw NumericError("gcg_step: non-finite candidate loss");
    if (losses[c] < best.loss) {
      best.loss = losses[c];
      best_sub = subs[c];
    }
  }
  if (best_sub) {
    best.prompt = p;
    best.prompt[static_cast<std::size_t>(best_sub->first)] = best_sub->second;
  }
  return best;
}

// Uniform random token draw avoiding the reserved special ids.
inline Prompt random_prompt_init(std::int64_t len, std::int64_t vocab_size, Rng& rng) {
  require(vocab_size > 3, "random prompt init: vocabulary has no word tokens");
  Prompt p(static_cast<std::size_t>(len));
  for (auto& id : p)
    id = static_cast<TokenId>(3 + rng() % static_cast<std::uint64_t>(vocab_size - 3));
  return p;
}

template <typename T>
PromptPair optimize_twin(const Parameters<T>& params, const Prompt& p_star, const GcgConfig& gcg,
                         const SamplingConfig& sampling,
                         std::optional<Prompt> initial = std::nullopt) {
  require(!p_star.empty(), "optimize_twin: empty source prompt");
  gcg.validate();

  SamplingConfig sc = sampling;
  sc.seed = derive_seed(gcg.seed, "continuations");
  ContinuationSet conts = sample_continuations(params, p_star, sc);

  Prompt p;
  if (initial) {
    p = *initial;
  } else {
    Rng rng(derive_seed(gcg.seed, "prompt-init"));
    p = random_prompt_init(gcg.prompt_len, params.config.vocab_size, rng);
  }

  PromptPair pair;
  pair.original = p_star;
  pair.seed = gcg.seed;
  pair.optimized = p;
  pair.d_kl = estimate_kl(params, p_star, p, conts);
  pair.kl_history.push_back(pair.d_kl);
  pair.steps_used = 0;
  if (pair.d_kl <= gcg.early_stop) {
    pair.converged = true;
    return pair;
  }

  for (std::int64_t step = 1; step <= gcg.max_steps; ++step) {
    auto res = gcg_step(params, p, conts, gcg.topk, gcg.batch,
                        derive_seed(gcg.seed, "gcg-step", static_cast<std::uint64_t>(step)));
    p = std::move(res.prompt);
    double d = estimate_kl(params, p_star, p, conts);
    pair.steps_used = step;
    if (d < pair.d_kl) {
      pair.d_kl = d;
      pair.optimized = p;
    }
    pair.kl_history.push_back(pair.d_kl);
    if (pair.d_kl <= gcg.early_stop) break;
  }
  pair.converged = pair.d_kl <= gcg.early_stop;
  return pair;
}

// Keeps pairs with d_kl <= threshold, preserving order.
struct FilterResult {
  std::vector<PromptPair> kept;
  std::size_t total = 0;
};

inline FilterResult filter_pairs(const std::vector<PromptPair>& pairs, double threshold) {
  require(threshold > 0.0, "filter_pairs: threshold must be positive");
  FilterResult out;
  out.total = pairs.size();
  for (const auto& p : pairs)
    if (p.d_kl <= threshold) out.kept.push_back(p);
  return out;
}

inline void save_pairs_jsonl(const std::vector<PromptPair>& pairs, const Vocab& vocab,
                             const GcgConfig& gcg, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write pairs file: " + path);
  for (const auto& p : pairs) {
    nlohmann::json j = {{"id", p.id},
                        {"original_text", vocab.decode(p.original)},
                        {"original_ids", p.original},
                        {"optimized_ids", p.optimized},
                        {"optimized_text", vocab.decode(p.optimized)},
                        {"d_kl", p.d_kl},
                        {"steps_used", p.steps_used},
                        {"converged", p.converged},
                        {"seeds", {{"gcg", p.seed}}},
                        {"gcg_config", gcg}};
    os << j.dump() << '\n';
  }
}

inline std::vector<PromptPair> load_pairs_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read pairs file: " + path);
  std::vector<PromptPair> pairs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("pairs file parse error: " + std::string(e.what()));
    }
    PromptPair p;
    p.id = j.value("id", static_cast<std::int64_t>(pairs.size()));
    p.original = j.at("original_ids").get<Prompt>();
    p.optimized = j.at("optimized_ids").get<Prompt>();
    p.d_kl = j.at("d_kl").get<double>();
    p.steps_used = j.value("steps_used", std::int64_t{0});
    p.converged = j.value("converged", false);
    if (j.contains("seeds")) p.seed = j["seeds"].value("gcg", std::uint64_t{0});
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace promptlab
