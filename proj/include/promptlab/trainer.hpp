#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/engine.hpp"
#include "promptlab/model.hpp"
#include "promptlab/parallel.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/vocab.hpp"

namespace promptlab {

struct TrainConfig {
  std::int64_t batch_size = 64;
  std::int64_t max_seq_len = 512;
  std::int64_t epochs = 3;
  double lr_peak = 6e-4;
  std::int64_t warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || max_seq_len < 2 || epochs < 1 || warmup_steps < 0)
      throw ConfigError("train config: batch_size/max_seq_len/epochs/warmup_steps out of range");
    if (lr_peak <= 0.0) throw ConfigError("train config: lr_peak must be > 0");
    if (beta1 <= 0.0 || beta1 >= 1.0) throw ConfigError("train config: beta1 must be in (0,1)");
    if (beta2 <= 0.0 || beta2 >= 1.0) throw ConfigError("train config: beta2 must be in (0,1)");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"max_seq_len", c.max_seq_len},
       {"epochs", c.epochs},         {"lr_peak", c.lr_peak},
       {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1},
       {"beta2", c.beta2},           {"weight_decay", c.weight_decay},
       {"adam_eps", c.adam_eps},     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig defaults;
  c.batch_size = j.value("batch_size", defaults.batch_size);
  c.max_seq_len = j.value("max_seq_len", defaults.max_seq_len);
  c.epochs = j.value("epochs", defaults.epochs);
  c.lr_peak = j.value("lr_peak", defaults.lr_peak);
  c.warmup_steps = j.value("warmup_steps", defaults.warmup_steps);
  c.beta1 = j.value("beta1", defaults.beta1);
  c.beta2 = j.value("beta2", defaults.beta2);
  c.weight_decay = j.value("weight_decay", defaults.weight_decay);
  c.adam_eps = j.value("adam_eps", defaults.adam_eps);
  c.seed = j.value("seed", defaults.seed);
}

// Linear warmup to lr_peak, then cosine decay to 0 at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg, std::int64_t total_steps) {
  require(step >= 0, "lr_at: negative step");
  if (step > total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " past total_steps " +
                                std::to_string(total_steps));
  require(cfg.warmup_steps < total_steps, "lr_at: warmup_steps must be < total_steps");
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.lr_peak;
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(total_steps - cfg.warmup_steps);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
struct OptimizerState {
  Parameters<T> m;  // first moments
  Parameters<T> v;  // second moments
  std::int64_t step = 0;

  static OptimizerState zeros(const ModelConfig& cfg) {
    return {Parameters<T>::zeros(cfg), Parameters<T>::zeros(cfg), 0};
  }
};

// Decoupled-weight-decay Adam with bias correction.
template <typename T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, OptimizerState<T>& state,
                double lr, const TrainConfig& cfg) {
  grads.for_each_tensor([&](const std::string& name, const Tensor<T>& g) {
    if (!g.all_finite()) throw NumericError("adamw_step: non-finite gradient in " + name);
  });
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  struct Slot {
    Tensor<T>* p;
    const Tensor<T>* g;
    Tensor<T>* m;
    Tensor<T>* v;
  };
  std::vector<Slot> slots;
  params.for_each_tensor([&](const std::string&, Tensor<T>& t) { slots.push_back({&t, nullptr, nullptr, nullptr}); });
  std::size_t i = 0;
  grads.for_each_tensor([&](const std::string&, const Tensor<T>& t) { slots[i++].g = &t; });
  i = 0;
  state.m.for_each_tensor([&](const std::string&, Tensor<T>& t) { slots[i++].m = &t; });
  i = 0;
  state.v.for_each_tensor([&](const std::string&, Tensor<T>& t) { slots[i++].v = &t; });

  for (auto& s : slots) {
    for (std::int64_t j = 0; j < s.p->size(); ++j) {
      double g = static_cast<double>((*s.g)[j]);
      double m = cfg.beta1 * static_cast<double>((*s.m)[j]) + (1.0 - cfg.beta1) * g;
      double v = cfg.beta2 * static_cast<double>((*s.v)[j]) + (1.0 - cfg.beta2) * g * g;
      (*s.m)[j] = static_cast<T>(m);
      (*s.v)[j] = static_cast<T>(v);
      double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
      double p = static_cast<double>((*s.p)[j]);
      (*s.p)[j] = static_cast<T>(p - lr * (update + cfg.weight_decay * p));
    }
  }
}

struct LossLogRow {
  std::int64_t step;
  double lr;
  double loss;
};

inline void save_loss_log(const std::vector<LossLogRow>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss log: " + path);
  os << "step,lr,loss\n";
  os.precision(10);
  for (const auto& row : log) os << row.step << ',' << row.lr << ',' << row.loss << '\n';
}

template <typename T>
struct TrainResult {
  Parameters<T> final_params;
  Parameters<T> best_params;
  double best_epoch_loss = 0;
  std::vector<LossLogRow> log;
};

// Documents are joined with <eos> separators and chunked to max_seq_len+1 so
// each chunk yields max_seq_len next-token targets.
inline std::vector<Prompt> pack_corpus(const std::vector<std::string>& lines, const Vocab& vocab,
                                       std::int64_t max_seq_len) {
  Prompt stream;
  for (const auto& line : lines) {
    Prompt ids = vocab.encode(line);
    if (ids.empty()) continue;
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(Vocab::kEos);
  }
  std::vector<Prompt> chunks;
  const std::size_t span = static_cast<std::size_t>(max_seq_len) + 1;
  for (std::size_t start = 0; start + 1 < stream.size(); start += static_cast<std::size_t>(max_seq_len)) {
    std::size_t end = std::min(start + span, stream.size());
    if (end - start < 2) break;
    chunks.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                        stream.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return chunks;
}

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                     const std::vector<std::string>& corpus_lines, const Vocab& vocab) {
  model_cfg.validate();
  train_cfg.validate();
  require(model_cfg.vocab_size == vocab.size(), "train: model vocab_size must match vocabulary");
  require(model_cfg.max_seq_len >= train_cfg.max_seq_len, "train: model context shorter than train chunks");

  auto chunks = pack_corpus(corpus_lines, vocab, train_cfg.max_seq_len);
  if (static_cast<std::int64_t>(chunks.size()) < train_cfg.batch_size)
    throw ConfigError("train: corpus yields " + std::to_string(chunks.size()) +
                      " chunks, shorter than one batch of " + std::to_string(train_cfg.batch_size));

  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(chunks.size()) / train_cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * train_cfg.epochs;
  require(train_cfg.warmup_steps < total_steps, "train: warmup_steps must be < total steps");

  TrainResult<T> result;
  result.final_params = Parameters<T>::init(model_cfg, derive_seed(train_cfg.seed, "init"));
  auto state = OptimizerState<T>::zeros(model_cfg);
  Parameters<T>& params = result.final_params;
  result.best_epoch_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  const int workers = worker_count();

  for (std::int64_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(train_cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    std::int64_t epoch_batches = 0;

    for (std::int64_t batch = 0; batch < steps_per_epoch; ++batch) {
      std::vector<const Prompt*> seqs;
      std::int64_t total_targets = 0;
      for (std::int64_t b = 0; b < train_cfg.batch_size; ++b) {
        const Prompt& c = chunks[order[static_cast<std::size_t>(batch * train_cfg.batch_size + b)]];
        seqs.push_back(&c);
        total_targets += static_cast<std::int64_t>(c.size()) - 1;
      }

      // per-worker gradient buffers, combined in worker order
      std::vector<Parameters<T>> worker_grads(
          static_cast<std::size_t>(std::min<std::int64_t>(workers, train_cfg.batch_size)),
          Parameters<T>::zeros(model_cfg));
      std::vector<double> worker_loss(worker_grads.size(), 0.0);
      const std::int64_t nw = static_cast<std::int64_t>(worker_grads.size());
      const double inv_targets = 1.0 / static_cast<double>(total_targets);

      parallel_for(nw, [&](std::int64_t w) {
        std::int64_t lo = train_cfg.batch_size * w / nw;
        std::int64_t hi = train_cfg.batch_size * (w + 1) / nw;
        for (std::int64_t b = lo; b < hi; ++b) {
          const Prompt& ids = *seqs[static_cast<std::size_t>(b)];
          ForwardCache<T> cache;
          forward_cache(params, ids, cache);
          std::vector<LossTerm> losses;
          for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
            losses.push_back({static_cast<std::int64_t>(t), ids[t + 1], inv_targets});
            worker_loss[static_cast<std::size_t>(w)] -=
                row_logprob(cache.logits, static_cast<std::int64_t>(t), ids[t + 1]) * inv_targets;
          }
          backward(params, cache, losses, worker_grads[static_cast<std::size_t>(w)]);
        }
      });

      Parameters<T>& grads = worker_grads[0];
      for (std::size_t w = 1; w < worker_grads.size(); ++w) {
        std::size_t i = 0;
        std::vector<Tensor<T>*> dst;
        grads.for_each_tensor([&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
        worker_grads[w].for_each_tensor([&](const std::string&, const Tensor<T>& t) {
          as_vec(*dst[i++]) += as_vec(t);
        });
      }
      double loss = std::accumulate(worker_loss.begin(), worker_loss.end(), 0.0);

      double lr = lr_at(step, train_cfg, total_steps);
      adamw_step(params, grads, state, lr, train_cfg);
      result.log.push_back({step, lr, loss});
      ++step;
      epoch_loss += loss;
      ++epoch_batches;
    }

    epoch_loss /= static_cast<double>(epoch_batches);
    if (epoch_loss < result.best_epoch_loss) {
      result.best_epoch_loss = epoch_loss;
      result.best_params = params;
    }
  }
  return result;
}

}  // namespace promptlab
