#pragma once

// Token-level prompt analyses: per-token influence scores, part-of-speech
// category tables, Zipf profiles with normalized entropy, and corpus-rarity
// CDFs.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "twin.hpp"
#include "vocab.hpp"

namespace promptlab {

// ---------------------------------------------------------------------------
// Part-of-speech tagging
// ---------------------------------------------------------------------------

enum class PosCategory {
  Noun,
  Propn,
  Verb,
  Adj,
  Adv,
  Pron,
  Det,
  Adp,
  Num,
  Punct,
  Other,
};

constexpr int kNumPosCategories = 11;

inline const char* pos_name(PosCategory c) {
  switch (c) {
    case PosCategory::Noun: return "NOUN";
    case PosCategory::Propn: return "PROPN";
    case PosCategory::Verb: return "VERB";
    case PosCategory::Adj: return "ADJ";
    case PosCategory::Adv: return "ADV";
    case PosCategory::Pron: return "PRON";
    case PosCategory::Det: return "DET";
    case PosCategory::Adp: return "ADP";
    case PosCategory::Num: return "NUM";
    case PosCategory::Punct: return "PUNCT";
    case PosCategory::Other: return "OTHER";
  }
  return "OTHER";
}

inline PosCategory pos_from_name(const std::string& name) {
  for (int i = 0; i < kNumPosCategories; ++i) {
    auto c = static_cast<PosCategory>(i);
    if (name == pos_name(c)) return c;
  }
  throw ConfigError("unknown POS category name: " + name);
}

using PosLexicon = std::unordered_map<std::string, PosCategory>;

// A small closed-class lexicon.  Content words are mostly handled by the
// suffix rules below; function words have to be listed since nothing about
// their shape gives them away.
inline const PosLexicon& default_lexicon() {
  static const PosLexicon lex = [] {
    PosLexicon m;
    auto add = [&m](PosCategory c, std::initializer_list<const char*> words) {
      for (const char* w : words) m.emplace(w, c);
    };
    add(PosCategory::Pron, {"i", "you", "he", "she", "it", "we", "they",
                            "me", "him", "her", "us", "them", "my", "your",
                            "his", "its", "our", "their", "who", "what"});
    add(PosCategory::Det, {"the", "a", "an", "this", "that", "these",
                           "those", "every", "some", "any", "no", "each"});
    add(PosCategory::Adp, {"in", "on", "at", "by", "for", "with", "to",
                           "from", "of", "into", "over", "under", "near",
                           "through", "after", "before", "about"});
    add(PosCategory::Verb, {"is", "am", "are", "was", "were", "be", "been",
                            "has", "have", "had", "do", "does", "did",
                            "go", "went", "saw", "said", "ran", "came",
                            "found", "made", "took", "got", "play",
                            "played", "can", "will", "would", "could"});
    add(PosCategory::Adv, {"not", "very", "too", "so", "then", "now",
                           "here", "there", "again", "always", "never",
                           "together", "away", "up", "down", "out"});
    add(PosCategory::Adj, {"big", "small", "good", "bad", "nice", "happy",
                           "sad", "little", "old", "new", "red", "blue"});
    add(PosCategory::Noun, {"day", "time", "man", "woman", "boy", "girl",
                            "dog", "cat", "house", "tree", "grass", "sun",
                            "water", "friend", "mom", "dad", "toy", "park"});
    return m;
  }();
  return lex;
}

// token,CATEGORY per line; overrides/extends the embedded lexicon.
inline PosLexicon load_lexicon_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon file: " + path);
  PosLexicon lex;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto comma = line.rfind(',');
    if (comma == std::string::npos)
      throw IoError("malformed lexicon line: " + line);
    lex[line.substr(0, comma)] = pos_from_name(line.substr(comma + 1));
  }
  return lex;
}

inline PosCategory tag_pos(const std::string& token,
                           const PosLexicon& lexicon = default_lexicon()) {
  if (token.empty()) return PosCategory::Other;
  if (auto it = lexicon.find(token); it != lexicon.end()) return it->second;
  // lowercase lexicon lookup so sentence-initial words still hit
  std::string lower = token;
  for (char& ch : lower)
    ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (auto it = lexicon.find(lower); it != lexicon.end()) return it->second;

  const unsigned char c0 = static_cast<unsigned char>(token[0]);
  if (std::ispunct(c0)) return PosCategory::Punct;
  if (std::isdigit(c0)) return PosCategory::Num;
  if (std::isupper(c0)) return PosCategory::Propn;

  auto ends_with = [&lower](const char* suf) {
    const std::size_t n = std::strlen(suf);
    return lower.size() > n && lower.compare(lower.size() - n, n, suf) == 0;
  };
  if (ends_with("ly")) return PosCategory::Adv;
  if (ends_with("ed") || ends_with("ing")) return PosCategory::Verb;
  return PosCategory::Other;
}

// ---------------------------------------------------------------------------
// Influence scores
// ---------------------------------------------------------------------------

struct InfluenceReport {
  std::string prompt_id;
  Prompt prompt;
  std::vector<std::string> tokens;
  std::vector<double> scores;       // s_i, by position
  std::vector<int> ranks;           // rank[i] in 1..k, 1 = largest score
  std::vector<PosCategory> categories;
};

// s_i = d_KL(p || p_{-i}), estimated over continuations sampled from p.
template <typename T>
InfluenceReport influence_scores(const Parameters<T>& params,
                                 const Prompt& prompt,
                                 const ContinuationSet& conts,
                                 const Vocab& vocab,
                                 const std::string& prompt_id = "",
                                 const PosLexicon& lexicon = default_lexicon()) {
  const std::size_t k = prompt.size();
  require(k >= 2, "influence_scores: prompt must have at least 2 tokens");

  InfluenceReport rep;
  rep.prompt_id = prompt_id;
  rep.prompt = prompt;
  rep.scores.assign(k, 0.0);
  for (TokenId id : prompt) {
    rep.tokens.push_back(vocab.token(id));
    rep.categories.push_back(tag_pos(rep.tokens.back(), lexicon));
  }
  for (std::size_t i = 0; i < k; ++i) {
    Prompt reduced;
    reduced.reserve(k - 1);
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) reduced.push_back(prompt[j]);
    rep.scores[i] = estimate_kl(params, prompt, reduced, conts);
  }

  // rank 1 = largest score; ties broken toward the lower position index
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return rep.scores[a] > rep.scores[b];
                   });
  rep.ranks.assign(k, 0);
  for (std::size_t r = 0; r < k; ++r) rep.ranks[order[r]] = static_cast<int>(r + 1);
  return rep;
}

// ---------------------------------------------------------------------------
// Category-by-rank table
// ---------------------------------------------------------------------------

struct RankCategoryRow {
  int rank = 0;
  std::array<double, kNumPosCategories> fraction{};  // sums to 1
  PosCategory modal = PosCategory::Other;
};

inline std::vector<RankCategoryRow>
rank_category_table(const std::vector<InfluenceReport>& reports) {
  require(!reports.empty(), "rank_category_table: no reports");
  int max_rank = 0;
  for (const auto& rep : reports)
    for (int r : rep.ranks) max_rank = std::max(max_rank, r);

  std::vector<std::array<std::int64_t, kNumPosCategories>> counts(
      static_cast<std::size_t>(max_rank));
  for (auto& row : counts) row.fill(0);
  for (const auto& rep : reports)
    for (std::size_t i = 0; i < rep.ranks.size(); ++i)
      ++counts[static_cast<std::size_t>(rep.ranks[i] - 1)]
              [static_cast<std::size_t>(rep.categories[i])];

  std::vector<RankCategoryRow> table;
  for (int r = 0; r < max_rank; ++r) {
    const auto& row = counts[static_cast<std::size_t>(r)];
    const double total =
        static_cast<double>(std::accumulate(row.begin(), row.end(), std::int64_t{0}));
    if (total == 0.0) continue;  // rank absent from every report
    RankCategoryRow out;
    out.rank = r + 1;
    int best = 0;
    for (int c = 0; c < kNumPosCategories; ++c) {
      out.fraction[static_cast<std::size_t>(c)] =
          static_cast<double>(row[static_cast<std::size_t>(c)]) / total;
      if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
    }
    out.modal = static_cast<PosCategory>(best);
    table.push_back(out);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Zipf profile and normalized entropy
// ---------------------------------------------------------------------------

struct ZipfProfile {
  std::vector<std::int64_t> counts;  // sorted non-increasing; rank = index+1
  double normalized_entropy = 0.0;   // H / ln(alphabet), in [0,1]
};

// Token multiset statistics with the end-of-sequence token excluded.
inline ZipfProfile zipf_profile(const std::vector<TokenId>& tokens,
                                TokenId eos = Vocab::kEos) {
  std::unordered_map<TokenId, std::int64_t> freq;
  for (TokenId t : tokens)
    if (t != eos) ++freq[t];
  require(!freq.empty(), "zipf_profile: empty multiset after eos exclusion");

  ZipfProfile prof;
  prof.counts.reserve(freq.size());
  std::int64_t total = 0;
  for (const auto& [id, n] : freq) {
    prof.counts.push_back(n);
    total += n;
  }
  std::sort(prof.counts.begin(), prof.counts.end(), std::greater<>());

  if (prof.counts.size() == 1) {
    prof.normalized_entropy = 0.0;  // degenerate alphabet
    return prof;
  }
  double h = 0.0;
  for (std::int64_t n : prof.counts) {
    const double p = static_cast<double>(n) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  prof.normalized_entropy = h / std::log(static_cast<double>(prof.counts.size()));
  return prof;
}

// ---------------------------------------------------------------------------
// Corpus-rarity CDF
// ---------------------------------------------------------------------------

struct CdfPoint {
  double probability = 0.0;   // corpus probability of a used token
  double cum_fraction = 0.0;  // fraction of used tokens at or below it
};

// CDF over the *distinct* tokens appearing in the prompt set, each weighted
// equally; tokens outside the corpus contribute probability 0.
inline std::vector<CdfPoint> corpus_rarity_cdf(const std::vector<TokenId>& tokens,
                                               const FrequencyTable& freq) {
  std::vector<TokenId> distinct = tokens;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  require(!distinct.empty(), "corpus_rarity_cdf: empty token set");

  std::vector<double> probs;
  probs.reserve(distinct.size());
  for (TokenId id : distinct) probs.push_back(freq.probability(id));
  std::sort(probs.begin(), probs.end());

  std::vector<CdfPoint> cdf;
  const double n = static_cast<double>(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    // collapse duplicate probabilities into one point at the upper count
    if (i + 1 < probs.size() && probs[i + 1] == probs[i]) continue;
    cdf.push_back({probs[i], static_cast<double>(i + 1) / n});
  }
  return cdf;
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

inline void save_influence_csv(const std::vector<InfluenceReport>& reports,
                               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "prompt_id,pos_index,token,score,rank,category\n";
  for (const auto& rep : reports)
    for (std::size_t i = 0; i < rep.prompt.size(); ++i)
      out << rep.prompt_id << ',' << i << ',' << rep.tokens[i] << ','
          << rep.scores[i] << ',' << rep.ranks[i] << ','
          << pos_name(rep.categories[i]) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void save_rank_categories_csv(const std::vector<RankCategoryRow>& table,
                                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "rank,category,fraction\n";
  for (const auto& row : table)
    for (int c = 0; c < kNumPosCategories; ++c)
      out << row.rank << ',' << pos_name(static_cast<PosCategory>(c)) << ','
          << row.fraction[static_cast<std::size_t>(c)] << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void save_zipf_csv(const ZipfProfile& prof, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "rank,count\n";
  for (std::size_t i = 0; i < prof.counts.size(); ++i)
    out << (i + 1) << ',' << prof.counts[i] << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void save_rarity_cdf_csv(const std::vector<CdfPoint>& cdf,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "probability,cum_fraction\n";
  for (const auto& pt : cdf) out << pt.probability << ',' << pt.cum_fraction << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace promptlab
