#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <sstream>

#include "promptlab/vocab.hpp"

using namespace promptlab;

TEST_CASE("build_vocab assigns ids by descending count") {
  std::istringstream corpus("a a b");
  Vocab v = Vocab::build(corpus, 1);
  CHECK(v.size() == 5);  // 3 specials + {a, b}
  CHECK(v.lookup("a") == 3);
  CHECK(v.lookup("b") == 4);
}

TEST_CASE("build_vocab honors min_count with unknown fallback") {
  std::istringstream corpus("x y y z");
  Vocab v = Vocab::build(corpus, 2);
  // brute-force counts: x=1, y=2, z=1 -> only y survives
  CHECK(v.size() == 4);
  CHECK(v.lookup("y") == 3);
  CHECK(v.lookup("x") == Vocab::kUnk);
  CHECK(v.lookup("z") == Vocab::kUnk);
}

TEST_CASE("build_vocab rejects empty corpus") {
  std::istringstream corpus("");
  CHECK_THROWS_AS(Vocab::build(corpus, 1), IoError);
}

TEST_CASE("build_vocab tie order is lexicographic") {
  std::istringstream c1("b a c b a c");
  std::istringstream c2("c b a a b c");
  Vocab v1 = Vocab::build(c1, 1);
  Vocab v2 = Vocab::build(c2, 1);
  CHECK(v1.lookup("a") == 3);
  CHECK(v1.lookup("b") == 4);
  CHECK(v1.lookup("c") == 5);
  // determinism: same multiset of words, same ids
  for (const char* w : {"a", "b", "c"}) CHECK(v1.lookup(w) == v2.lookup(w));
}

TEST_CASE("encode splits punctuation into standalone tokens") {
  std::istringstream corpus("Tom was nice .");
  Vocab v = Vocab::build(corpus, 1);
  Prompt p = v.encode("Tom was nice .");
  REQUIRE(p.size() == 4);
  CHECK(p.back() == v.lookup("."));
  CHECK(v.encode("nice.").size() == 2);  // attached punctuation still splits
}

TEST_CASE("encode maps each unseen word to unknown exactly once") {
  std::istringstream corpus("Tom was nice");
  Vocab v = Vocab::build(corpus, 1);
  Prompt p = v.encode("Tom was zorp nice blif");
  REQUIRE(p.size() == 5);
  int unknowns = 0;
  for (TokenId id : p) unknowns += (id == Vocab::kUnk);
  CHECK(unknowns == 2);
}

TEST_CASE("encode of empty text is empty") {
  Vocab v;
  CHECK(v.encode("").empty());
}

TEST_CASE("decode round-trips in-vocabulary text") {
  std::istringstream corpus("Bob smiled . the end");
  Vocab v = Vocab::build(corpus, 1);
  CHECK(v.decode(v.encode("Bob smiled .")) == "Bob smiled .");
  CHECK(v.decode({Vocab::kEos}) == "<eos>");
}

TEST_CASE("decode rejects out-of-range ids") {
  Vocab v;
  CHECK_THROWS(v.decode({static_cast<TokenId>(v.size())}));
}

TEST_CASE("decode emits one word per id") {
  std::istringstream corpus("a b c d e f g");
  Vocab v = Vocab::build(corpus, 1);
  std::mt19937_64 rng(7);
  Prompt ids;
  for (int i = 0; i < 40; ++i)
    ids.push_back(static_cast<TokenId>(rng() % static_cast<std::uint64_t>(v.size())));
  std::istringstream words(v.decode(ids));
  std::size_t n = 0;
  std::string w;
  while (words >> w) ++n;
  CHECK(n == ids.size());
}

TEST_CASE("corpus_frequency matches direct counts") {
  std::istringstream corpus("a a b");
  Vocab v = Vocab::build(corpus, 1);
  std::istringstream again("a a b");
  FrequencyTable ft = corpus_frequency(again, v);
  CHECK(ft.total == 3);
  CHECK(ft.probability(v.lookup("a")) == Catch::Approx(2.0 / 3.0));
  CHECK(ft.probability(v.lookup("b")) == Catch::Approx(1.0 / 3.0));
  double sum = 0;
  for (std::size_t id = 0; id < ft.counts.size(); ++id)
    sum += ft.probability(static_cast<TokenId>(id));
  CHECK(sum == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("corpus_frequency agrees with an independent hash-count oracle") {
  // synthetic multi-line corpus with a skewed word mix
  std::mt19937_64 rng(123);
  std::vector<std::string> bank = {"sun", "moon", "fox", "ran", "sat", ".", ",", "the", "a", "!"};
  std::ostringstream corpus;
  std::map<std::string, std::int64_t> oracle;
  std::int64_t total = 0;
  for (int line = 0; line < 1000; ++line) {
    for (int w = 0; w < 1 + static_cast<int>(rng() % 8); ++w) {
      const std::string& word = bank[rng() % bank.size()];
      corpus << word << ' ';
      ++oracle[word];
      ++total;
    }
    corpus << '\n';
  }
  std::istringstream vs(corpus.str());
  Vocab v = Vocab::build(vs, 1);
  std::istringstream fs(corpus.str());
  FrequencyTable ft = corpus_frequency(fs, v);
  CHECK(ft.total == total);
  for (const auto& [word, count] : oracle)
    CHECK(ft.counts[static_cast<std::size_t>(v.lookup(word))] == count);
}

TEST_CASE("vocab file round-trips") {
  std::istringstream corpus("one two two three . !");
  Vocab v = Vocab::build(corpus, 1);
  std::stringstream buf;
  v.save(buf);
  Vocab v2 = Vocab::load(buf);
  CHECK(v2.size() == v.size());
  for (TokenId id = 0; id < v.size(); ++id) CHECK(v2.token(id) == v.token(id));
}
