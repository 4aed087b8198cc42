#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "promptlab/common.hpp"

namespace promptlab {

using TokenId = std::int32_t;
using Prompt = std::vector<TokenId>;

inline bool is_punct_char(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

// Whitespace split with every punctuation character emitted as its own token.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct_char(c)) {
      flush();
      out.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  static constexpr TokenId kEos = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kPad = 2;

  Vocab() {
    for (const char* s : {"<eos>", "<unk>", "<pad>"}) add(s);
  }

  TokenId eos() const { return kEos; }
  TokenId unk() const { return kUnk; }
  TokenId pad() const { return kPad; }
  std::int64_t size() const { return static_cast<std::int64_t>(id_to_token_.size()); }

  TokenId lookup(const std::string& word) const {
    auto it = token_to_id_.find(word);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size())
      throw std::invalid_argument("token id " + std::to_string(id) + " out of range (V=" +
                                  std::to_string(size()) + ")");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  Prompt encode(const std::string& text) const {
    Prompt ids;
    for (const auto& w : split_words(text)) ids.push_back(lookup(w));
    return ids;
  }

  std::string decode(const Prompt& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  // Word ids are assigned by descending corpus count, ties lexicographic,
  // so Zipf rank equals id rank among non-special ids.
  static Vocab build(std::istream& corpus, std::int64_t min_count = 1) {
    require(min_count >= 1, "min_count must be >= 1");
    std::map<std::string, std::int64_t> counts;
    std::string line;
    bool any = false;
    while (std::getline(corpus, line)) {
      for (auto& w : split_words(line)) {
        ++counts[w];
        any = true;
      }
    }
    if (!any) throw IoError("build_vocab: empty corpus");
    std::vector<std::pair<std::string, std::int64_t>> order(counts.begin(), counts.end());
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [word, count] : order)
      if (count >= min_count) v.add(word);
    return v;
  }

  void save(std::ostream& os) const {
    os << size() << ' ' << kEos << ' ' << kUnk << ' ' << kPad << '\n';
    for (const auto& t : id_to_token_) os << t << '\n';
  }

  void save_file(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocab file: " + path);
    save(os);
  }

  static Vocab load(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw IoError("vocab file: missing header");
    std::istringstream hs(header);
    std::int64_t n;
    TokenId eos, unk, pad;
    if (!(hs >> n >> eos >> unk >> pad) || n < 3)
      throw IoError("vocab file: malformed header");
    if (eos != kEos || unk != kUnk || pad != kPad)
      throw IoError("vocab file: unexpected special token ids");
    Vocab v;
    v.id_to_token_.clear();
    v.token_to_id_.clear();
    std::string line;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!std::getline(is, line)) throw IoError("vocab file: truncated at line " + std::to_string(i));
      v.add(line);
    }
    return v;
  }

  static Vocab load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read vocab file: " + path);
    return load(is);
  }

 private:
  void add(const std::string& word) {
    TokenId id = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.push_back(word);
    token_to_id_.emplace(word, id);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

struct FrequencyTable {
  std::vector<std::int64_t> counts;  // indexed by token id
  std::int64_t total = 0;

  double probability(TokenId id) const {
    if (id < 0 || id >= static_cast<TokenId>(counts.size()) || total == 0) return 0.0;
    return static_cast<double>(counts[static_cast<std::size_t>(id)]) /
           static_cast<double>(total);
  }
};

inline FrequencyTable corpus_frequency(std::istream& corpus, const Vocab& vocab) {
  FrequencyTable ft;
  ft.counts.assign(static_cast<std::size_t>(vocab.size()), 0);
  std::string line;
  while (std::getline(corpus, line)) {
    for (TokenId id : vocab.encode(line)) {
      ++ft.counts[static_cast<std::size_t>(id)];
      ++ft.total;
    }
  }
  return ft;
}

inline void save_frequency_csv(const FrequencyTable& ft, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write frequency file: " + path);
  os << "token_id,count\n";
  for (std::size_t i = 0; i < ft.counts.size(); ++i)
    os << i << ',' << ft.counts[i] << '\n';
}

inline FrequencyTable load_frequency_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read frequency file: " + path);
  FrequencyTable ft;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("frequency file: bad line: " + line);
    std::size_t id = std::stoull(line.substr(0, comma));
    std::int64_t count = std::stoll(line.substr(comma + 1));
    if (ft.counts.size() <= id) ft.counts.resize(id + 1, 0);
    ft.counts[id] = count;
    ft.total += count;
  }
  return ft;
}

}  // namespace promptlab
