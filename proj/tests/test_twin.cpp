#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "helpers.hpp"
#include "promptlab/twin.hpp"

using namespace promptlab;

TEST_CASE("estimate_kl of a prompt against itself is exactly zero") {
  std::mt19937_64 rng(100);
  for (int trial = 0; trial < 10; ++trial) {
    auto cfg = testref::random_tiny_config(rng);
    auto params = Parameters<float>::init(cfg, rng());
    auto p = testref::random_prompt(rng, cfg.vocab_size, 3 + rng() % 4);
    ContinuationSet conts{p, {}, 0};
    for (int c = 0; c < 4; ++c)
      conts.continuations.push_back(testref::random_prompt(rng, cfg.vocab_size, 1 + rng() % 5));
    CHECK(estimate_kl(params, p, p, conts) == 0.0);
  }
}

TEST_CASE("probability-weighted estimator equals the exact next-token KL") {
  // enumerate every length-1 continuation of a V=4 model and weight each term
  // by its exact sampling probability; the result is the exact KL
  std::mt19937_64 rng(101);
  ModelConfig cfg{.n_layers = 1, .hidden_dim = 8, .ffn_dim = 8, .n_heads = 2,
                  .max_seq_len = 16, .vocab_size = 4};
  auto params = Parameters<double>::init(cfg, 7);
  Prompt p_star{0, 1, 2};
  Prompt p{3, 2, 1};

  auto star_probs = row_softmax(forward(params, p_star).logits, 2);
  auto p_probs = row_softmax(forward(params, p).logits, 2);
  double exact = 0;
  for (std::size_t v = 0; v < 4; ++v)
    exact += star_probs[v] * (std::log(star_probs[v]) - std::log(p_probs[v]));

  double weighted = 0;
  for (TokenId v = 0; v < 4; ++v) {
    ContinuationSet single{p_star, {{v}}, 0};
    weighted += star_probs[static_cast<std::size_t>(v)] * estimate_kl(params, p_star, p, single);
  }
  CHECK_THAT(weighted, Catch::Matchers::WithinAbs(exact, 1e-9));
}

TEST_CASE("estimate_kl propagates context-overflow errors") {
  ModelConfig cfg{.n_layers = 1, .hidden_dim = 4, .ffn_dim = 4, .n_heads = 1,
                  .max_seq_len = 4, .vocab_size = 5};
  auto params = Parameters<float>::zeros(cfg);
  ContinuationSet conts{{0}, {{1, 2, 3, 1}}, 0};
  CHECK_THROWS(estimate_kl(params, Prompt{0}, Prompt{1}, conts));
}

static double brute_force_best(const Parameters<float>& params, const Prompt& p,
                               const ContinuationSet& conts, Prompt& best_prompt) {
  double best = summed_nll(params, p, conts);
  best_prompt = p;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (TokenId v = 0; v < params.config.vocab_size; ++v) {
      Prompt cand = p;
      cand[i] = v;
      double loss = summed_nll(params, cand, conts);
      if (loss < best) {
        best = loss;
        best_prompt = cand;
      }
    }
  return best;
}

TEST_CASE("gcg_step with full coverage matches exhaustive substitution search") {
  std::mt19937_64 rng(102);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig cfg{.n_layers = 1, .hidden_dim = 8, .ffn_dim = 8, .n_heads = 2,
                    .max_seq_len = 32, .vocab_size = 4 + static_cast<std::int64_t>(rng() % 8)};
    auto params = Parameters<float>::init(cfg, rng());
    auto p = testref::random_prompt(rng, cfg.vocab_size, 4);
    ContinuationSet conts{p, {}, 0};
    for (int c = 0; c < 3; ++c)
      conts.continuations.push_back(testref::random_prompt(rng, cfg.vocab_size, 2));

    auto res = gcg_step(params, p, conts, cfg.vocab_size,
                        static_cast<std::int64_t>(p.size()) * cfg.vocab_size, 1);
    Prompt oracle_prompt;
    double oracle_loss = brute_force_best(params, p, conts, oracle_prompt);
    CHECK(res.loss == oracle_loss);
  }
}

TEST_CASE("gcg_step keeps the incumbent on ties") {
  // a zero-weight model scores every prompt equally
  ModelConfig cfg{.n_layers = 1, .hidden_dim = 4, .ffn_dim = 4, .n_heads = 1,
                  .max_seq_len = 16, .vocab_size = 6};
  auto params = Parameters<float>::zeros(cfg);
  Prompt p{3, 4, 5};
  ContinuationSet conts{p, {{1, 2}}, 0};
  auto res = gcg_step(params, p, conts, 6, 18, 9);
  CHECK(res.prompt == p);
  CHECK_THAT(res.loss, Catch::Matchers::WithinAbs(2.0 * std::log(6.0), 1e-9));
}

TEST_CASE("gcg_step is deterministic for a fixed seed") {
  std::mt19937_64 rng(103);
  auto cfg = testref::random_tiny_config(rng);
  auto params = Parameters<float>::init(cfg, 55);
  auto p = testref::random_prompt(rng, cfg.vocab_size, 5);
  ContinuationSet conts{p, {testref::random_prompt(rng, cfg.vocab_size, 3)}, 0};
  auto a = gcg_step(params, p, conts, 3, 4, 77);
  auto b = gcg_step(params, p, conts, 3, 4, 77);
  CHECK(a.prompt == b.prompt);
  CHECK(a.loss == b.loss);
  CHECK_THROWS(gcg_step(params, p, conts, 3, 0, 1));
}

TEST_CASE("optimize_twin converges immediately when seeded with the source prompt") {
  std::mt19937_64 rng(104);
  auto cfg = testref::random_tiny_config(rng);
  auto params = Parameters<float>::init(cfg, 8);
  auto p_star = testref::random_prompt(rng, cfg.vocab_size, 4);
  GcgConfig gcg;
  gcg.prompt_len = 4;
  gcg.max_steps = 10;
  SamplingConfig sc{.n = 3, .max_len = 3, .temperature = 1.0, .greedy = false, .seed = 0};
  auto pair = optimize_twin(params, p_star, gcg, sc, p_star);
  CHECK(pair.converged);
  CHECK(pair.steps_used == 0);
  CHECK(pair.d_kl == 0.0);
}

TEST_CASE("optimize_twin reports a non-increasing best-so-far divergence") {
  std::mt19937_64 rng(105);
  ModelConfig cfg{.n_layers = 1, .hidden_dim = 8, .ffn_dim = 16, .n_heads = 2,
                  .max_seq_len = 32, .vocab_size = 12};
  auto params = Parameters<float>::init(cfg, 21);
  Prompt p_star{4, 5, 6, 7};
  GcgConfig gcg;
  gcg.prompt_len = 4;
  gcg.topk = 6;
  gcg.batch = 8;
  gcg.max_steps = 15;
  gcg.early_stop = 1e-12;  // force the loop to run
  SamplingConfig sc{.n = 4, .max_len = 4, .temperature = 1.0, .greedy = false, .seed = 0};
  // the estimator may start below the threshold for some seeds; find a run
  // that actually iterates
  PromptPair pair;
  for (std::uint64_t seed = 3; seed < 20; ++seed) {
    gcg.seed = seed;
    pair = optimize_twin(params, p_star, gcg, sc);
    if (pair.kl_history.size() >= 2) break;
  }
  REQUIRE(pair.kl_history.size() >= 2);
  for (std::size_t i = 1; i < pair.kl_history.size(); ++i)
    CHECK(pair.kl_history[i] <= pair.kl_history[i - 1]);
  CHECK(pair.converged == (pair.d_kl <= gcg.early_stop));
}

TEST_CASE("protocol constants default to the 500/5.0/10.0 recipe") {
  GcgConfig gcg;
  CHECK(gcg.max_steps == 500);
  CHECK(gcg.early_stop == 5.0);
  CHECK(gcg.filter == 10.0);
  CHECK(gcg.prompt_len == 20);
}

TEST_CASE("filter_pairs keeps the boundary and preserves order") {
  std::vector<PromptPair> pairs(3);
  pairs[0].id = 0;
  pairs[0].d_kl = 9.9;
  pairs[1].id = 1;
  pairs[1].d_kl = 10.0;
  pairs[2].id = 2;
  pairs[2].d_kl = 10.1;
  auto res = filter_pairs(pairs, 10.0);
  REQUIRE(res.kept.size() == 2);
  CHECK(res.kept[0].id == 0);
  CHECK(res.kept[1].id == 1);
  CHECK(res.total == 3);
  CHECK(filter_pairs({}, 10.0).kept.empty());
}

TEST_CASE("prompt pairs round-trip through the JSONL store") {
  std::istringstream cs("tom ran fast . bee sat !");
  Vocab vocab = Vocab::build(cs, 1);
  std::vector<PromptPair> pairs(2);
  pairs[0].id = 0;
  pairs[0].original = vocab.encode("tom ran .");
  pairs[0].optimized = vocab.encode("bee sat !");
  pairs[0].d_kl = 3.25;
  pairs[0].steps_used = 12;
  pairs[0].converged = true;
  pairs[1].id = 1;
  pairs[1].original = vocab.encode("bee ran !");
  pairs[1].optimized = vocab.encode("tom sat .");
  pairs[1].d_kl = 11.5;
  GcgConfig gcg;
  std::string path = "/tmp/promptlab_pairs_test.jsonl";
  save_pairs_jsonl(pairs, vocab, gcg, path);
  auto loaded = load_pairs_jsonl(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].original == pairs[0].original);
  CHECK(loaded[0].optimized == pairs[0].optimized);
  CHECK(loaded[0].d_kl == 3.25);
  CHECK(loaded[0].converged);
  CHECK(loaded[1].d_kl == 11.5);
  CHECK_FALSE(loaded[1].converged);
}
