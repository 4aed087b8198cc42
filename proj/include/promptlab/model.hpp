#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/common.hpp"
#include "promptlab/rng.hpp"
#include "promptlab/tensor.hpp"
#include "promptlab/vocab.hpp"

namespace promptlab {

struct ModelConfig {
  std::int64_t n_layers = 6;
  std::int64_t hidden_dim = 512;
  std::int64_t ffn_dim = 2048;
  std::int64_t n_heads = 8;
  std::int64_t max_seq_len = 512;
  std::int64_t vocab_size = 0;
  double rotary_fraction = 0.25;  // fraction of head dims carrying rotary phases

  std::int64_t head_dim() const { return hidden_dim / n_heads; }
  std::int64_t rotary_dim() const {
    auto r = static_cast<std::int64_t>(static_cast<double>(head_dim()) * rotary_fraction);
    return r - (r % 2);  // rotary pairs need an even count
  }

  void validate() const {
    if (n_layers < 1 || hidden_dim < 1 || ffn_dim < 1 || n_heads < 1 || vocab_size < 1)
      throw ConfigError("model config: all dimensions must be >= 1");
    if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be >= 2");
    if (hidden_dim % n_heads != 0)
      throw ConfigError("model config: hidden_dim must be divisible by n_heads");
    if (rotary_fraction <= 0.0 || rotary_fraction > 1.0)
      throw ConfigError("model config: rotary_fraction must be in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"hidden_dim", c.hidden_dim},
       {"ffn_dim", c.ffn_dim},         {"n_heads", c.n_heads},
       {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
       {"rotary_fraction", c.rotary_fraction}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("n_heads").get_to(c.n_heads);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("vocab_size").get_to(c.vocab_size);
  c.rotary_fraction = j.value("rotary_fraction", 0.25);
}

// One transformer block: a single LayerNorm feeding attention and MLP in
// parallel, both added back onto the residual stream.
template <typename T>
struct LayerWeights {
  Tensor<T> ln_g, ln_b;      // d
  Tensor<T> w_qkv, b_qkv;    // d x 3d, 3d
  Tensor<T> w_o, b_o;        // d x d, d
  Tensor<T> w_fc, b_fc;      // d x ffn, ffn
  Tensor<T> w_proj, b_proj;  // ffn x d, d
};

template <typename T>
struct Parameters {
  ModelConfig config;
  Tensor<T> wte;  // V x d
  std::vector<LayerWeights<T>> layers;
  Tensor<T> lnf_g, lnf_b;  // d
  Tensor<T> w_head;        // d x V

  static Parameters zeros(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    const auto d = cfg.hidden_dim, f = cfg.ffn_dim, V = cfg.vocab_size;
    p.wte = Tensor<T>(V, d);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
      l.ln_g = Tensor<T>(d);
      l.ln_b = Tensor<T>(d);
      l.w_qkv = Tensor<T>(d, 3 * d);
      l.b_qkv = Tensor<T>(3 * d);
      l.w_o = Tensor<T>(d, d);
      l.b_o = Tensor<T>(d);
      l.w_fc = Tensor<T>(d, f);
      l.b_fc = Tensor<T>(f);
      l.w_proj = Tensor<T>(f, d);
      l.b_proj = Tensor<T>(d);
    }
    p.lnf_g = Tensor<T>(d);
    p.lnf_b = Tensor<T>(d);
    p.w_head = Tensor<T>(d, V);
    return p;
  }

  static Parameters init(const ModelConfig& cfg, std::uint64_t seed) {
    Parameters p = zeros(cfg);
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill = [&](Tensor<T>& t) {
      for (auto& x : t.v) x = static_cast<T>(dist(rng));
    };
    fill(p.wte);
    for (auto& l : p.layers) {
      as_vec(l.ln_g).setOnes();
      fill(l.w_qkv);
      fill(l.w_o);
      fill(l.w_fc);
      fill(l.w_proj);
    }
    as_vec(p.lnf_g).setOnes();
    fill(p.w_head);
    return p;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("wte", wte);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      std::string prefix = "layer." + std::to_string(i) + ".";
      fn(prefix + "ln_g", l.ln_g);
      fn(prefix + "ln_b", l.ln_b);
      fn(prefix + "w_qkv", l.w_qkv);
      fn(prefix + "b_qkv", l.b_qkv);
      fn(prefix + "w_o", l.w_o);
      fn(prefix + "b_o", l.b_o);
      fn(prefix + "w_fc", l.w_fc);
      fn(prefix + "b_fc", l.b_fc);
      fn(prefix + "w_proj", l.w_proj);
      fn(prefix + "b_proj", l.b_proj);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("w_head", w_head);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<Parameters*>(this)->for_each_tensor(
        [&](const std::string& name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.wte = wte.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      auto& b = out.layers[i];
      b.ln_g = a.ln_g.template cast<U>();
      b.ln_b = a.ln_b.template cast<U>();
      b.w_qkv = a.w_qkv.template cast<U>();
      b.b_qkv = a.b_qkv.template cast<U>();
      b.w_o = a.w_o.template cast<U>();
      b.b_o = a.b_o.template cast<U>();
      b.w_fc = a.w_fc.template cast<U>();
      b.b_fc = a.b_fc.template cast<U>();
      b.w_proj = a.w_proj.template cast<U>();
      b.b_proj = a.b_proj.template cast<U>();
    }
    out.lnf_g = lnf_g.template cast<U>();
    out.lnf_b = lnf_b.template cast<U>();
    out.w_head = w_head.template cast<U>();
    return out;
  }
};

// Checkpoint = JSON manifest (config + ordered tensor directory) next to a raw
// little-endian float32 blob at <path>.bin.
template <typename T>
void save_checkpoint(const Parameters<T>& params, const std::string& path) {
  nlohmann::json manifest;
  manifest["config"] = params.config;
  nlohmann::json dir = nlohmann::json::array();
  std::ofstream blob(path + ".bin", std::ios::binary);
  if (!blob) throw IoError("cannot write checkpoint blob: " + path + ".bin");
  std::int64_t offset = 0;
  params.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    std::vector<float> row(t.v.begin(), t.v.end());
    blob.write(reinterpret_cast<const char*>(row.data()),
               static_cast<std::streamsize>(row.size() * sizeof(float)));
    offset += static_cast<std::int64_t>(row.size() * sizeof(float));
  });
  manifest["tensors"] = dir;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint manifest: " + path);
  os << manifest.dump(2) << '\n';
}

template <typename T = float>
Parameters<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read checkpoint manifest: " + path);
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest parse error: " + std::string(e.what()));
  }
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  auto params = Parameters<T>::zeros(cfg);
  std::ifstream blob(path + ".bin", std::ios::binary);
  if (!blob) throw IoError("cannot read checkpoint blob: " + path + ".bin");

  std::size_t idx = 0;
  const auto& dir = manifest.at("tensors");
  params.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    if (idx >= dir.size()) throw IoError("checkpoint manifest: missing tensor " + name);
    const auto& entry = dir[idx++];
    if (entry.at("name").get<std::string>() != name)
      throw IoError("checkpoint manifest: expected tensor " + name + ", found " +
                    entry.at("name").get<std::string>());
    auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (shape != t.shape)
      throw IoError("checkpoint tensor " + name + ": shape mismatch against model config");
    blob.seekg(entry.at("offset").get<std::int64_t>());
    std::vector<float> row(t.v.size());
    blob.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!blob) throw IoError("checkpoint blob truncated at tensor " + name);
    for (std::size_t i = 0; i < row.size(); ++i) t.v[i] = static_cast<T>(row[i]);
  });
  if (idx != dir.size()) throw IoError("checkpoint manifest: extra tensor entries");
  return params;
}

}  // namespace promptlab
