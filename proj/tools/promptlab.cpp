// promptlab: one entry point for the whole pipeline
//   tokenize -> train -> optimize -> influence/zipf/rarity -> probe ->
//   intervene -> lens -> report

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "promptlab/analysis.hpp"
#include "promptlab/engine.hpp"
#include "promptlab/model.hpp"
#include "promptlab/replab.hpp"
#include "promptlab/trainer.hpp"
#include "promptlab/twin.hpp"

namespace fs = std::filesystem;
using namespace promptlab;

namespace {

constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kNumeric = 5,
};

// Primary outputs are written to a temp file and renamed into place so a
// crashed run never leaves a truncated artifact behind.
template <typename WriteFn>
void atomic_write(const fs::path& path, WriteFn&& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp.string());
  fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

struct Manifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  nlohmann::json inputs;
  nlohmann::json outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  // Appended as one JSON line; reruns accumulate history in the same file.
  void write(const fs::path& out_dir) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    nlohmann::json j = {{"command", command}, {"config", config},
                        {"seed", seed},       {"inputs", inputs},
                        {"outputs", outputs}, {"version", kVersion},
                        {"duration_s", secs}};
    std::ofstream os(out_dir / "manifest.jsonl", std::ios::app);
    if (!os) throw IoError("cannot write manifest in " + out_dir.string());
    os << j.dump() << '\n';
  }
};

fs::path prepare_out_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// Model + train config file; missing fields get documented defaults and every
// violation is reported, not just the first.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

RunConfig validate_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }

  RunConfig cfg;
  std::vector<std::string> errors;
  try {
    if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string("model: ") + e.what());
  }
  try {
    if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string("train: ") + e.what());
  }

  auto check = [&errors](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  check(cfg.model.n_layers >= 1, "model.n_layers must be >= 1");
  check(cfg.model.hidden_dim >= 1, "model.hidden_dim must be >= 1");
  check(cfg.model.ffn_dim >= 1, "model.ffn_dim must be >= 1");
  check(cfg.model.n_heads >= 1, "model.n_heads must be >= 1");
  check(cfg.model.max_seq_len >= 2, "model.max_seq_len must be >= 2");
  check(cfg.model.n_heads == 0 || cfg.model.hidden_dim % std::max<std::int64_t>(cfg.model.n_heads, 1) == 0,
        "model.hidden_dim must be divisible by model.n_heads");
  check(cfg.model.rotary_fraction > 0.0 && cfg.model.rotary_fraction <= 1.0,
        "model.rotary_fraction must be in (0, 1]");
  check(cfg.train.batch_size >= 1, "train.batch_size must be >= 1");
  check(cfg.train.max_seq_len >= 2, "train.max_seq_len must be >= 2");
  check(cfg.train.epochs >= 1, "train.epochs must be >= 1");
  check(cfg.train.warmup_steps >= 0, "train.warmup_steps must be >= 0");
  check(cfg.train.lr_peak > 0.0, "train.lr_peak must be > 0");
  check(cfg.train.beta1 > 0.0 && cfg.train.beta1 < 1.0, "train.beta1 must be in (0, 1)");
  check(cfg.train.beta2 > 0.0 && cfg.train.beta2 < 1.0, "train.beta2 must be in (0, 1)");
  check(cfg.train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check(cfg.train.adam_eps > 0.0, "train.adam_eps must be > 0");

  if (!errors.empty()) {
    std::string all = "config validation failed:";
    for (const auto& e : errors) all += "\n  - " + e;
    throw ConfigError(all);
  }
  return cfg;
}

std::vector<std::int64_t> parse_layers(const std::string& spec, std::int64_t n_layers) {
  std::vector<std::int64_t> layers;
  if (spec == "all") {
    for (std::int64_t l = 1; l <= n_layers; ++l) layers.push_back(l);
    return layers;
  }
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      layers.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw ConfigError("--layers: cannot parse '" + item + "'");
    }
  }
  if (layers.empty()) throw ConfigError("--layers: empty list");
  for (std::int64_t l : layers)
    if (l < 1 || l > n_layers)
      throw ConfigError("--layers: layer " + std::to_string(l) + " out of range");
  return layers;
}

std::vector<std::int64_t> parse_ks(const std::string& spec, std::int64_t d) {
  if (spec.empty()) return default_probe_ks(d);
  std::vector<std::int64_t> ks;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "full") {
      ks.push_back(d);
      continue;
    }
    try {
      ks.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw ConfigError("--ks: cannot parse '" + item + "'");
    }
  }
  if (ks.empty()) throw ConfigError("--ks: empty list");
  return ks;
}

std::vector<Prompt> encode_prompt_lines(const std::vector<std::string>& lines,
                                        const Vocab& vocab) {
  std::vector<Prompt> prompts;
  for (const auto& line : lines) {
    auto p = vocab.encode(line);
    if (!p.empty()) prompts.push_back(std::move(p));
  }
  if (prompts.empty()) throw IoError("no non-empty prompts found");
  return prompts;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_tokenize(const std::string& corpus, const std::string& out,
                 std::int64_t min_count) {
  Manifest mf;
  mf.command = "tokenize";
  mf.config = {{"min_count", min_count}};
  mf.inputs = {{"corpus", corpus}};
  auto dir = prepare_out_dir(out);

  auto lines = read_lines(corpus);
  std::stringstream joined;
  for (const auto& l : lines) joined << l << '\n';
  auto vocab = Vocab::build(joined, min_count);
  joined.clear();
  joined.seekg(0);
  auto freq = corpus_frequency(joined, vocab);

  atomic_write(dir / "vocab.txt", [&](const std::string& p) { vocab.save_file(p); });
  atomic_write(dir / "freq.csv", [&](const std::string& p) { save_frequency_csv(freq, p); });
  mf.outputs = {{"vocab", (dir / "vocab.txt").string()},
                {"freq", (dir / "freq.csv").string()}};
  mf.write(dir);
  std::cout << "vocabulary: " << vocab.size() << " tokens, corpus: " << freq.total
            << " occurrences\n";
  return kOk;
}

int cmd_train(const std::string& corpus, const std::string& vocab_path,
              const std::string& config_path, const std::string& out,
              std::uint64_t seed) {
  Manifest mf;
  mf.command = "train";
  mf.seed = seed;
  mf.inputs = {{"corpus", corpus}, {"vocab", vocab_path}, {"config", config_path}};
  auto dir = prepare_out_dir(out);

  auto vocab = Vocab::load_file(vocab_path);
  auto cfg = validate_config(config_path);
  cfg.model.vocab_size = vocab.size();
  cfg.train.seed = derive_seed(seed, "train");
  mf.config = {{"model", cfg.model}, {"train", cfg.train}};

  auto lines = read_lines(corpus);
  auto result = train<float>(cfg.model, cfg.train, lines, vocab);

  atomic_write(dir / "loss_log.csv",
               [&](const std::string& p) { save_loss_log(result.log, p); });
  // checkpoint writes a manifest + blob pair; rename both together
  save_checkpoint(result.best_params, (dir / "model.ckpt.tmp").string());
  fs::rename(dir / "model.ckpt.tmp.bin", dir / "model.ckpt.bin");
  fs::rename(dir / "model.ckpt.tmp", dir / "model.ckpt");

  mf.outputs = {{"checkpoint", (dir / "model.ckpt").string()},
                {"loss_log", (dir / "loss_log.csv").string()},
                {"best_epoch_loss", result.best_epoch_loss}};
  mf.write(dir);
  std::cout << "trained " << result.log.size() << " steps, best epoch loss "
            << result.best_epoch_loss << '\n';
  return kOk;
}

int cmd_optimize(const std::string& checkpoint, const std::string& vocab_path,
                 const std::string& prompts_path, const std::string& out,
                 std::uint64_t seed, GcgConfig gcg, std::int64_t n_conts,
                 std::int64_t cont_len) {
  Manifest mf;
  mf.command = "optimize";
  mf.seed = seed;
  mf.inputs = {{"checkpoint", checkpoint}, {"vocab", vocab_path}, {"prompts", prompts_path}};
  auto dir = prepare_out_dir(out);

  auto params = load_checkpoint<float>(checkpoint);
  auto vocab = Vocab::load_file(vocab_path);
  auto prompts = encode_prompt_lines(read_lines(prompts_path), vocab);

  SamplingConfig sampling{n_conts, cont_len, 1.0, false, 0};
  mf.config = {{"gcg", gcg}, {"n_conts", n_conts}, {"cont_len", cont_len}};

  std::vector<PromptPair> pairs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    GcgConfig per = gcg;
    per.seed = derive_seed(seed, "pair", static_cast<std::uint64_t>(i));
    auto pair = optimize_twin(params, prompts[i], per, sampling);
    pair.id = static_cast<std::int64_t>(i);
    pairs.push_back(std::move(pair));
    std::cout << "prompt " << i << ": d_kl " << pairs.back().d_kl << " after "
              << pairs.back().steps_used << " steps\n";
  }

  auto filtered = filter_pairs(pairs, gcg.filter);
  atomic_write(dir / "pairs.jsonl", [&](const std::string& p) {
    save_pairs_jsonl(filtered.kept, vocab, gcg, p);
  });
  atomic_write(dir / "pairs_all.jsonl", [&](const std::string& p) {
    save_pairs_jsonl(pairs, vocab, gcg, p);
  });
  mf.outputs = {{"pairs", (dir / "pairs.jsonl").string()},
                {"kept", filtered.kept.size()},
                {"total", filtered.total}};
  mf.write(dir);
  std::cout << "kept " << filtered.kept.size() << "/" << filtered.total
            << " pairs at filter " << gcg.filter << '\n';
  return kOk;
}

int cmd_influence(const std::string& checkpoint, const std::string& vocab_path,
                  const std::string& pairs_path, const std::string& out,
                  std::uint64_t seed, std::int64_t n_conts, std::int64_t cont_len,
                  const std::string& which, const std::string& lexicon_path) {
  Manifest mf;
  mf.command = "influence";
  mf.seed = seed;
  mf.inputs = {{"checkpoint", checkpoint}, {"vocab", vocab_path}, {"pairs", pairs_path}};
  mf.config = {{"n_conts", n_conts}, {"cont_len", cont_len}, {"which", which}};
  auto dir = prepare_out_dir(out);

  if (which != "optimized" && which != "original")
    throw ConfigError("--which must be 'optimized' or 'original'");
  auto params = load_checkpoint<float>(checkpoint);
  auto vocab = Vocab::load_file(vocab_path);
  auto pairs = load_pairs_jsonl(pairs_path);
  PosLexicon lexicon =
      lexicon_path.empty() ? default_lexicon() : load_lexicon_csv(lexicon_path);

  std::vector<InfluenceReport> reports;
  for (const auto& pair : pairs) {
    const Prompt& p = which == "optimized" ? pair.optimized : pair.original;
    if (p.size() < 2) continue;
    SamplingConfig sc{n_conts, cont_len, 1.0, false,
                      derive_seed(seed, "influence-conts", static_cast<std::uint64_t>(pair.id))};
    auto conts = sample_continuations(params, p, sc);
    reports.push_back(influence_scores(params, p, conts, vocab,
                                       std::to_string(pair.id), lexicon));
  }
  require(!reports.empty(), "influence: no usable prompts in pairs file");

  atomic_write(dir / "influence.csv",
               [&](const std::string& p) { save_influence_csv(reports, p); });
  atomic_write(dir / "rank_categories.csv", [&](const std::string& p) {
    save_rank_categories_csv(rank_category_table(reports), p);
  });
  mf.outputs = {{"influence", (dir / "influence.csv").string()},
                {"rank_categories", (dir / "rank_categories.csv").string()}};
  mf.write(dir);
  std::cout << "influence reports for " << reports.size() << " prompts\n";
  return kOk;
}

int cmd_zipf(const std::string& pairs_path, const std::string& out) {
  Manifest mf;
  mf.command = "zipf";
  mf.inputs = {{"pairs", pairs_path}};
  auto dir = prepare_out_dir(out);

  auto pairs = load_pairs_jsonl(pairs_path);
  require(!pairs.empty(), "zipf: empty pairs file");
  std::vector<TokenId> opt_tokens, orig_tokens;
  for (const auto& pair : pairs) {
    opt_tokens.insert(opt_tokens.end(), pair.optimized.begin(), pair.optimized.end());
    orig_tokens.insert(orig_tokens.end(), pair.original.begin(), pair.original.end());
  }
  auto opt = zipf_profile(opt_tokens);
  auto orig = zipf_profile(orig_tokens);

  atomic_write(dir / "zipf.csv", [&](const std::string& p) { save_zipf_csv(opt, p); });
  atomic_write(dir / "zipf_original.csv",
               [&](const std::string& p) { save_zipf_csv(orig, p); });
  atomic_write(dir / "entropy.csv", [&](const std::string& p) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot open for writing: " + p);
    os << "set,normalized_entropy\n";
    os << "optimized," << opt.normalized_entropy << '\n';
    os << "original," << orig.normalized_entropy << '\n';
  });
  mf.outputs = {{"zipf", (dir / "zipf.csv").string()},
                {"zipf_original", (dir / "zipf_original.csv").string()},
                {"entropy", (dir / "entropy.csv").string()}};
  mf.write(dir);
  std::cout << "normalized entropy: optimized " << opt.normalized_entropy
            << ", original " << orig.normalized_entropy << '\n';
  return kOk;
}

int cmd_rarity(const std::string& pairs_path, const std::string& freq_path,
               const std::string& out) {
  Manifest mf;
  mf.command = "rarity";
  mf.inputs = {{"pairs", pairs_path}, {"freq", freq_path}};
  auto dir = prepare_out_dir(out);

  auto pairs = load_pairs_jsonl(pairs_path);
  require(!pairs.empty(), "rarity: empty pairs file");
  auto freq = load_frequency_csv(freq_path);

  std::vector<TokenId> opt_tokens, orig_tokens;
  for (const auto& pair : pairs) {
    opt_tokens.insert(opt_tokens.end(), pair.optimized.begin(), pair.optimized.end());
    orig_tokens.insert(orig_tokens.end(), pair.original.begin(), pair.original.end());
  }
  atomic_write(dir / "rarity_cdf.csv", [&](const std::string& p) {
    save_rarity_cdf_csv(corpus_rarity_cdf(opt_tokens, freq), p);
  });
  atomic_write(dir / "rarity_cdf_original.csv", [&](const std::string& p) {
    save_rarity_cdf_csv(corpus_rarity_cdf(orig_tokens, freq), p);
  });
  mf.outputs = {{"rarity_cdf", (dir / "rarity_cdf.csv").string()},
                {"rarity_cdf_original", (dir / "rarity_cdf_original.csv").string()}};
  mf.write(dir);
  return kOk;
}

int cmd_probe(const std::string& checkpoint, const std::string& pairs_path,
              const std::string& out, std::uint64_t seed,
              const std::string& layers_spec, const std::string& ks_spec,
              bool baselines) {
  Manifest mf;
  mf.command = "probe";
  mf.seed = seed;
  mf.inputs = {{"checkpoint", checkpoint}, {"pairs", pairs_path}};
  auto dir = prepare_out_dir(out);

  auto params = load_checkpoint<float>(checkpoint);
  auto pairs = load_pairs_jsonl(pairs_path);
  auto layers = parse_layers(layers_spec, params.config.n_layers);
  auto ks = parse_ks(ks_spec, params.config.hidden_dim);
  mf.config = {{"layers", layers}, {"ks", ks}, {"baselines", baselines}};

  auto grid = probe_sweep(params, pairs, layers, ks, baselines,
                          derive_seed(seed, "probe"));
  atomic_write(dir / "probe_results.csv",
               [&](const std::string& p) { save_probe_results_csv(grid, p); });
  // weights manifest + blob pair, renamed together
  save_probe_weights(grid, (dir / "probe_weights.json.tmp").string());
  fs::rename(dir / "probe_weights.json.tmp.bin", dir / "probe_weights.json.bin");
  fs::rename(dir / "probe_weights.json.tmp", dir / "probe_weights.json");

  mf.outputs = {{"probe_results", (dir / "probe_results.csv").string()},
                {"probe_weights", (dir / "probe_weights.json").string()}};
  mf.write(dir);
  std::cout << "probe grid: " << grid.size() << " cells\n";
  return kOk;
}

int cmd_intervene(const std::string& checkpoint, const std::string& pairs_path,
                  const std::string& out, std::uint64_t seed,
                  const std::string& layers_spec, const std::string& ks_spec,
                  const std::string& overlap_mode) {
  Manifest mf;
  mf.command = "intervene";
  mf.seed = seed;
  mf.inputs = {{"checkpoint", checkpoint}, {"pairs", pairs_path}};
  auto dir = prepare_out_dir(out);

  if (overlap_mode != "own" && overlap_mode != "cross")
    throw ConfigError("--overlap-mode must be 'own' or 'cross'");
  auto params = load_checkpoint<float>(checkpoint);
  auto pairs = load_pairs_jsonl(pairs_path);
  auto layers = parse_layers(layers_spec, params.config.n_layers);
  auto ks = parse_ks(ks_spec, params.config.hidden_dim);
  mf.config = {{"layers", layers}, {"ks", ks}, {"overlap_mode", overlap_mode}};

  auto grid = intervention_sweep(
      params, pairs, layers, ks, derive_seed(seed, "intervene"),
      overlap_mode == "own" ? OverlapMode::Own : OverlapMode::Cross);
  atomic_write(dir / "intervention.csv",
               [&](const std::string& p) { save_intervention_csv(grid, p); });
  mf.outputs = {{"intervention", (dir / "intervention.csv").string()}};
  mf.write(dir);
  std::cout << "intervention grid: " << grid.size() << " cells\n";
  return kOk;
}

int cmd_lens(const std::string& checkpoint, const std::string& pairs_path,
             const std::string& out, std::uint64_t seed,
             const std::string& lens_mode, std::int64_t n_conts,
             std::int64_t cont_len) {
  Manifest mf;
  mf.command = "lens";
  mf.seed = seed;
  mf.inputs = {{"checkpoint", checkpoint}, {"pairs", pairs_path}};
  mf.config = {{"lens_mode", lens_mode}, {"n_conts", n_conts}, {"cont_len", cont_len}};
  auto dir = prepare_out_dir(out);

  if (lens_mode != "exact" && lens_mode != "sampled")
    throw ConfigError("--lens-mode must be 'exact' or 'sampled'");
  auto params = load_checkpoint<float>(checkpoint);
  auto pairs = load_pairs_jsonl(pairs_path);
  require(!pairs.empty(), "lens: empty pairs file");

  std::vector<LayerKLProfile> profiles;
  for (const auto& pair : pairs) {
    if (lens_mode == "exact") {
      profiles.push_back(layerwise_kl(params, pair));
    } else {
      SamplingConfig sc{n_conts, cont_len, 1.0, false,
                        derive_seed(seed, "lens-conts", static_cast<std::uint64_t>(pair.id))};
      auto conts = sample_continuations(params, pair.optimized, sc);
      profiles.push_back(layerwise_kl(params, pair, LayerKlMode::Sampled, &conts));
    }
  }
  atomic_write(dir / "layerwise_kl.csv",
               [&](const std::string& p) { save_layerwise_kl_csv(profiles, p); });
  mf.outputs = {{"layerwise_kl", (dir / "layerwise_kl.csv").string()}};
  mf.write(dir);
  std::cout << "layer profiles for " << profiles.size() << " pairs\n";
  return kOk;
}

int cmd_report(const std::string& out) {
  Manifest mf;
  mf.command = "report";
  auto dir = prepare_out_dir(out);
  mf.inputs = {{"run_dir", dir.string()}};

  struct Figure {
    const char* source;
    const char* target;
  };
  const Figure figures[] = {
      {"influence.csv", "fig1_influence.csv"},
      {"rank_categories.csv", "fig2_categories.csv"},
      {"zipf.csv", "fig3_zipf.csv"},
      {"rarity_cdf.csv", "fig4_cdf.csv"},
      {"probe_results.csv", "fig5_probe.csv"},
      {"intervention.csv", "fig6_overlap.csv"},
      {"layerwise_kl.csv", "fig7_layerkl.csv"},
  };

  std::vector<std::string> produced, missing;
  for (const auto& fig : figures) {
    const fs::path src = dir / fig.source;
    if (fs::exists(src)) {
      fs::copy_file(src, dir / fig.target, fs::copy_options::overwrite_existing);
      produced.push_back(fig.target);
    } else {
      missing.push_back(fig.source);
      std::cerr << "warning: missing " << fig.source << ", skipping "
                << fig.target << '\n';
    }
  }
  require(!produced.empty(), "report: no figure inputs found in " + dir.string());

  std::ostringstream summary;
  summary << "promptlab report\n";
  if (fs::exists(dir / "entropy.csv")) {
    auto lines = read_lines((dir / "entropy.csv").string());
    std::string opt_e = "?", orig_e = "?";
    for (const auto& l : lines) {
      if (l.rfind("optimized,", 0) == 0) opt_e = l.substr(10);
      if (l.rfind("original,", 0) == 0) orig_e = l.substr(9);
    }
    summary << "normalized entropy (optimized, original): " << opt_e << ", "
            << orig_e << '\n';
  }
  if (fs::exists(dir / "probe_results.csv")) {
    double best_acc = -1;
    std::string best_layer = "?";
    for (const auto& l : read_lines((dir / "probe_results.csv").string())) {
      std::istringstream row(l);
      std::string layer, k, type, test_acc;
      std::getline(row, layer, ',');
      std::getline(row, k, ',');
      std::getline(row, type, ',');
      std::getline(row, test_acc, ',');
      if (type != "optimized-vs-natural") continue;
      try {
        const double acc = std::stod(test_acc);
        if (acc > best_acc) {
          best_acc = acc;
          best_layer = layer;
        }
      } catch (const std::exception&) {
      }
    }
    if (best_acc >= 0)
      summary << "best probe: layer " << best_layer << ", test accuracy "
              << best_acc << '\n';
  }
  for (const auto& m : missing) summary << "missing input: " << m << '\n';

  atomic_write(dir / "summary.txt", [&](const std::string& p) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot open for writing: " + p);
    os << summary.str();
  });
  mf.outputs = {{"figures", produced}, {"missing", missing},
                {"summary", (dir / "summary.txt").string()}};
  mf.write(dir);
  std::cout << summary.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt workbench: training, twin-prompt synthesis, and analysis"};
  app.require_subcommand(1);

  std::string checkpoint, vocab_path, corpus, prompts, pairs, out, config_path;
  std::string layers_spec = "all", ks_spec, overlap_mode = "own", lens_mode = "exact";
  std::string which = "optimized", lexicon_path;
  std::uint64_t seed = 0;
  std::int64_t min_count = 1, n_conts = 32, cont_len = 32;
  bool baselines = false;
  GcgConfig gcg;

  auto* tokenize = app.add_subcommand("tokenize", "build vocabulary and corpus statistics");
  tokenize->add_option("--corpus", corpus)->required();
  tokenize->add_option("--out", out)->required();
  tokenize->add_option("--min-count", min_count);

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--corpus", corpus)->required();
  train_cmd->add_option("--vocab", vocab_path)->required();
  train_cmd->add_option("--config", config_path)->required();
  train_cmd->add_option("--out", out)->required();
  train_cmd->add_option("--seed", seed);

  auto* optimize = app.add_subcommand("optimize", "synthesize optimized twin prompts");
  optimize->add_option("--checkpoint", checkpoint)->required();
  optimize->add_option("--vocab", vocab_path)->required();
  optimize->add_option("--prompts", prompts)->required();
  optimize->add_option("--out", out)->required();
  optimize->add_option("--seed", seed);
  optimize->add_option("--max-steps", gcg.max_steps);
  optimize->add_option("--early-stop", gcg.early_stop);
  optimize->add_option("--filter", gcg.filter);
  optimize->add_option("--topk", gcg.topk);
  optimize->add_option("--cand-batch", gcg.batch);
  optimize->add_option("--prompt-len", gcg.prompt_len);
  optimize->add_option("--n-conts", n_conts);
  optimize->add_option("--cont-len", cont_len);

  auto* influence = app.add_subcommand("influence", "per-token influence scores");
  influence->add_option("--checkpoint", checkpoint)->required();
  influence->add_option("--vocab", vocab_path)->required();
  influence->add_option("--pairs", pairs)->required();
  influence->add_option("--out", out)->required();
  influence->add_option("--seed", seed);
  influence->add_option("--n-conts", n_conts);
  influence->add_option("--cont-len", cont_len);
  influence->add_option("--which", which);
  influence->add_option("--lexicon", lexicon_path);

  auto* zipf = app.add_subcommand("zipf", "token frequency profiles and entropy");
  zipf->add_option("--pairs", pairs)->required();
  zipf->add_option("--out", out)->required();

  auto* rarity = app.add_subcommand("rarity", "corpus-rarity CDFs");
  rarity->add_option("--pairs", pairs)->required();
  rarity->add_option("--freq", corpus)->required();
  rarity->add_option("--out", out)->required();

  auto* probe = app.add_subcommand("probe", "sparse logistic probes over layers");
  probe->add_option("--checkpoint", checkpoint)->required();
  probe->add_option("--pairs", pairs)->required();
  probe->add_option("--out", out)->required();
  probe->add_option("--seed", seed);
  probe->add_option("--layers", layers_spec);
  probe->add_option("--ks", ks_spec);
  probe->add_flag("--baselines", baselines);

  auto* intervene = app.add_subcommand("intervene", "causal feature ablations");
  intervene->add_option("--checkpoint", checkpoint)->required();
  intervene->add_option("--pairs", pairs)->required();
  intervene->add_option("--out", out)->required();
  intervene->add_option("--seed", seed);
  intervene->add_option("--layers", layers_spec);
  intervene->add_option("--ks", ks_spec);
  intervene->add_option("--overlap-mode", overlap_mode);

  auto* lens = app.add_subcommand("lens", "layer-wise divergence profiles");
  lens->add_option("--checkpoint", checkpoint)->required();
  lens->add_option("--pairs", pairs)->required();
  lens->add_option("--out", out)->required();
  lens->add_option("--seed", seed);
  lens->add_option("--lens-mode", lens_mode);
  lens->add_option("--n-conts", n_conts);
  lens->add_option("--cont-len", cont_len);

  auto* report = app.add_subcommand("report", "collate figure data and summary");
  report->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (tokenize->parsed()) return cmd_tokenize(corpus, out, min_count);
    if (train_cmd->parsed()) return cmd_train(corpus, vocab_path, config_path, out, seed);
    if (optimize->parsed())
      return cmd_optimize(checkpoint, vocab_path, prompts, out, seed, gcg, n_conts, cont_len);
    if (influence->parsed())
      return cmd_influence(checkpoint, vocab_path, pairs, out, seed, n_conts,
                           cont_len, which, lexicon_path);
    if (zipf->parsed()) return cmd_zipf(pairs, out);
    if (rarity->parsed()) return cmd_rarity(pairs, corpus, out);
    if (probe->parsed())
      return cmd_probe(checkpoint, pairs, out, seed, layers_spec, ks_spec, baselines);
    if (intervene->parsed())
      return cmd_intervene(checkpoint, pairs, out, seed, layers_spec, ks_spec, overlap_mode);
    if (lens->parsed())
      return cmd_lens(checkpoint, pairs, out, seed, lens_mode, n_conts, cont_len);
    if (report->parsed()) return cmd_report(out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  return kUsage;
}
