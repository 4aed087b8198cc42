#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "story_corpus.hpp"
#include "promptlab/trainer.hpp"

using namespace promptlab;

TEST_CASE("lr schedule ramps linearly then decays with a cosine") {
  TrainConfig cfg;
  cfg.lr_peak = 6e-4;
  cfg.warmup_steps = 500;
  const std::int64_t total = 2000;
  CHECK(lr_at(0, cfg, total) == 0.0);
  CHECK(lr_at(500, cfg, total) == cfg.lr_peak);
  CHECK(lr_at(250, cfg, total) == Catch::Approx(cfg.lr_peak * 0.5));
  // closed form at the decay midpoint
  std::int64_t mid = (500 + total) / 2;
  CHECK_THAT(lr_at(mid, cfg, total),
             Catch::Matchers::WithinRel(cfg.lr_peak * 0.5 * (1.0 + std::cos(M_PI / 2.0)), 1e-12));
  CHECK(lr_at(total, cfg, total) == Catch::Approx(0.0).margin(1e-18));
  CHECK_THROWS(lr_at(total + 1, cfg, total));
}

static ModelConfig tiny_model_config() {
  return ModelConfig{.n_layers = 1, .hidden_dim = 4, .ffn_dim = 4, .n_heads = 1,
                     .max_seq_len = 16, .vocab_size = 6};
}

TEST_CASE("adamw leaves parameters unchanged for zero gradients and no decay") {
  auto cfg = tiny_model_config();
  auto params = Parameters<double>::init(cfg, 1);
  auto before = params;
  auto grads = Parameters<double>::zeros(cfg);
  auto state = OptimizerState<double>::zeros(cfg);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  adamw_step(params, grads, state, 0.1, tc);
  bool same = true;
  std::size_t i = 0;
  std::vector<const Tensor<double>*> ref;
  before.for_each_tensor([&](const std::string&, const Tensor<double>& t) { ref.push_back(&t); });
  params.for_each_tensor([&](const std::string&, const Tensor<double>& t) {
    if (t.v != ref[i++]->v) same = false;
  });
  CHECK(same);
  CHECK(state.step == 1);
}

TEST_CASE("adamw single step matches the hand-computed update") {
  auto cfg = tiny_model_config();
  auto params = Parameters<double>::zeros(cfg);
  params.wte(0, 0) = 0.5;
  auto grads = Parameters<double>::zeros(cfg);
  grads.wte(0, 0) = 1.0;
  auto state = OptimizerState<double>::zeros(cfg);
  TrainConfig tc;
  tc.beta1 = 0.9;
  tc.beta2 = 0.95;
  tc.adam_eps = 1e-8;
  tc.weight_decay = 0.0;
  adamw_step(params, grads, state, 0.1, tc);
  // m=0.1, v=0.05; bias-corrected both to 1; update = 1/(1+1e-8)
  double want = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK_THAT(params.wte(0, 0), Catch::Matchers::WithinAbs(want, 1e-9));
}

TEST_CASE("decoupled weight decay shrinks parameters by (1 - lr*wd)") {
  auto cfg = tiny_model_config();
  auto params = Parameters<double>::zeros(cfg);
  params.wte(1, 2) = 2.0;
  auto grads = Parameters<double>::zeros(cfg);
  auto state = OptimizerState<double>::zeros(cfg);
  TrainConfig tc;
  tc.weight_decay = 0.01;
  adamw_step(params, grads, state, 0.1, tc);
  CHECK_THAT(params.wte(1, 2), Catch::Matchers::WithinAbs(2.0 * (1.0 - 0.1 * 0.01), 1e-12));
}

TEST_CASE("adamw rejects non-finite gradients by tensor name") {
  auto cfg = tiny_model_config();
  auto params = Parameters<double>::zeros(cfg);
  auto grads = Parameters<double>::zeros(cfg);
  grads.lnf_g[0] = std::numeric_limits<double>::quiet_NaN();
  auto state = OptimizerState<double>::zeros(cfg);
  TrainConfig tc;
  try {
    adamw_step(params, grads, state, 0.1, tc);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("lnf_g") != std::string::npos);
  }
}

TEST_CASE("paper-recipe configuration passes validation") {
  ModelConfig mc{.n_layers = 6, .hidden_dim = 512, .ffn_dim = 2048, .n_heads = 8,
                 .max_seq_len = 512, .vocab_size = 46137};
  CHECK_NOTHROW(mc.validate());
  TrainConfig tc;
  tc.batch_size = 64;
  tc.max_seq_len = 512;
  tc.epochs = 3;
  tc.lr_peak = 6e-4;
  tc.warmup_steps = 500;
  tc.beta1 = 0.9;
  tc.beta2 = 0.95;
  CHECK_NOTHROW(tc.validate());
}

TEST_CASE("training on a synthetic grammar corpus reduces the loss by 30%") {
  storygen::StoryGen gen(7, {.names = 8, .nouns = 12, .verbs = 10, .adjectives = 8});
  auto lines = gen.lines(200);
  std::ostringstream corpus;
  for (const auto& l : lines) corpus << l << '\n';
  std::istringstream cs(corpus.str());
  Vocab vocab = Vocab::build(cs, 1);

  ModelConfig mc{.n_layers = 2, .hidden_dim = 16, .ffn_dim = 32, .n_heads = 2,
                 .max_seq_len = 64, .vocab_size = vocab.size()};
  TrainConfig tc;
  tc.batch_size = 8;
  tc.max_seq_len = 32;
  tc.epochs = 6;
  tc.lr_peak = 1e-2;
  tc.warmup_steps = 5;
  tc.seed = 11;

  auto result = train<float>(mc, tc, lines, vocab);
  REQUIRE(result.log.size() > 10);
  double initial = result.log.front().loss;
  double final = result.log.back().loss;
  CHECK(final < initial * 0.7);
  CHECK(result.best_epoch_loss <= initial);
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
  storygen::StoryGen gen(9, {.names = 6, .nouns = 8, .verbs = 6, .adjectives = 6});
  auto lines = gen.lines(60);
  std::ostringstream corpus;
  for (const auto& l : lines) corpus << l << '\n';
  std::istringstream cs(corpus.str());
  Vocab vocab = Vocab::build(cs, 1);
  ModelConfig mc{.n_layers = 1, .hidden_dim = 8, .ffn_dim = 16, .n_heads = 2,
                 .max_seq_len = 32, .vocab_size = vocab.size()};
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_seq_len = 16;
  tc.epochs = 2;
  tc.warmup_steps = 2;
  tc.seed = 5;

  auto a = train<float>(mc, tc, lines, vocab);
  auto b = train<float>(mc, tc, lines, vocab);
  std::vector<const Tensor<float>*> ta, tb;
  a.final_params.for_each_tensor([&](const std::string&, const Tensor<float>& t) { ta.push_back(&t); });
  b.final_params.for_each_tensor([&](const std::string&, const Tensor<float>& t) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->v == tb[i]->v);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
}

TEST_CASE("training rejects a corpus shorter than one batch") {
  std::vector<std::string> lines = {"a b c"};
  std::istringstream cs("a b c");
  Vocab vocab = Vocab::build(cs, 1);
  ModelConfig mc{.n_layers = 1, .hidden_dim = 4, .ffn_dim = 4, .n_heads = 1,
                 .max_seq_len = 16, .vocab_size = vocab.size()};
  TrainConfig tc;
  tc.batch_size = 64;
  tc.max_seq_len = 16;
  CHECK_THROWS_AS(train<float>(mc, tc, lines, vocab), ConfigError);
}
