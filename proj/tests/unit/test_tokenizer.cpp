#include <cmath>
#include <random>

#include "doctest.h"
#include "hembed/errors.hpp"
#include "hembed/text.hpp"
#include "hembed/tokenizer.hpp"
#include "oracles.hpp"

using namespace hembed;
using namespace hembed::tokenizer;

namespace {

TokenizerModel random_model(std::mt19937_64& rng, std::size_t max_pieces, std::map<std::u32string, double>& table) {
  const std::u32string alphabet = U"abcde";
  std::set<std::u32string> surfaces;
  for (char32_t c : alphabet) surfaces.insert(std::u32string(1, c));
  const std::size_t target = alphabet.size() + rng() % (max_pieces - alphabet.size() + 1);
  while (surfaces.size() < target) {
    std::u32string s;
    const std::size_t len = 2 + rng() % 3;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng() % alphabet.size()];
    surfaces.insert(s);
  }
  std::uniform_real_distribution<double> lp(-8.0, -0.5);
  std::vector<Piece> pieces;
  table.clear();
  for (const auto& s : surfaces) {
    // quantized so that distinct segmentations often tie
    const double v = std::round(lp(rng) * 4.0) / 4.0;
    pieces.push_back({text::to_utf8(s), v});
    table[s] = v;
  }
  return TokenizerModel(pieces, 1.0, {});
}

std::vector<std::string> small_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> words = {"राम", "घर", "जाता", "है", "सीता", "पानी", "पीती", "हम", "स्कूल", "पढ़ते"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const std::size_t len = 3 + rng() % 6;
    for (std::size_t w = 0; w < len; ++w) s += (w ? " " : "") + words[rng() % words.size()];
    out.push_back(s + " ।");
  }
  return out;
}

}  // namespace

TEST_CASE("viterbi trivial cases") {
  TokenizerModel m({{"a", -1.0}, {"b", -1.0}, {"c", -1.0}}, 1.0, {});
  auto seg = viterbi_segment(m, "abc");
  CHECK(seg.token_ids.size() == 3);
  CHECK(seg.log_prob == doctest::Approx(-3.0));
  auto empty = viterbi_segment(m, "");
  CHECK(empty.token_ids.empty());
  CHECK(empty.log_prob == 0.0);
}

TEST_CASE("viterbi matches exhaustive enumeration") {
  std::mt19937_64 rng(2024);
  std::map<std::u32string, double> table;
  for (int trial = 0; trial < 100; ++trial) {
    const TokenizerModel m = random_model(rng, 30, table);
    for (int t = 0; t < 5; ++t) {
      std::u32string s;
      const std::size_t len = rng() % 11;
      for (std::size_t i = 0; i < len; ++i) s += U"abcde"[rng() % 5];
      const auto seg = viterbi_segment(m, text::to_utf8(s));
      CHECK(std::fabs(seg.log_prob - oracle::best_segmentation(s, table)) <= 1e-9);
      // the returned path must itself score log_prob
      double path = 0.0;
      std::string joined;
      for (int id : seg.token_ids) {
        joined += m.surface(id);
        path += m.pieces()[static_cast<std::size_t>(id - kNumSpecial)].log_prob;
      }
      CHECK(joined == text::to_utf8(s));
      CHECK(path == doctest::Approx(seg.log_prob));
    }
  }
}

TEST_CASE("viterbi tie-break prefers fewer tokens") {
  // "ab" as one piece (-2) ties with "a"+"b" (-1 + -1)
  TokenizerModel m({{"a", -1.0}, {"b", -1.0}, {"ab", -2.0}}, 1.0, {});
  CHECK(viterbi_segment(m, "ab").token_ids.size() == 1);
}

TEST_CASE("uncovered characters become unk") {
  TokenizerModel m({{"a", -1.0}, {"b", -1.0}}, 1.0, {});
  const auto ids = encode(m, "a😀b");
  REQUIRE(ids.size() == 3);
  CHECK(ids[1] == kUnkId);
  CHECK(decode(m, ids) == "a<unk>b");
  CHECK_THROWS_AS(decode(m, std::vector<int>{99}), DataError);
  CHECK_THROWS_AS(decode(m, std::vector<int>{-1}), DataError);
}

TEST_CASE("placeholders map to special ids") {
  TokenizerModel m({{"a", -1.0}, {" ", -1.0}}, 1.0, {});
  const auto ids = encode(m, "a <num> <url>");
  CHECK(std::count(ids.begin(), ids.end(), kNumId) == 1);
  CHECK(std::count(ids.begin(), ids.end(), kUrlId) == 1);
  CHECK(decode(m, ids) == "a <num> <url>");
}

TEST_CASE("unigram training on repeated abab") {
  std::vector<std::string> corpus(100, "abab");
  TrainerConfig cfg;
  cfg.vocab_size = 8;
  cfg.char_coverage = 1.0;
  const auto m = train_unigram(corpus, cfg);
  CHECK(m.pieces().size() <= 8);
  const int ab = m.piece_id("ab"), a = m.piece_id("a"), b = m.piece_id("b");
  REQUIRE(ab >= 0);
  REQUIRE(a >= 0);
  REQUIRE(b >= 0);
  auto lp = [&](int id) { return m.pieces()[static_cast<std::size_t>(id - kNumSpecial)].log_prob; };
  CHECK(lp(ab) > lp(a));
  CHECK(lp(ab) > lp(b));
}

TEST_CASE("full coverage keeps every character") {
  TrainerConfig cfg;
  cfg.vocab_size = 10;
  cfg.char_coverage = 1.0;
  const auto m = train_unigram(std::vector<std::string>{"xyz"}, cfg);
  CHECK(m.piece_id("x") >= 0);
  CHECK(m.piece_id("y") >= 0);
  CHECK(m.piece_id("z") >= 0);
}

TEST_CASE("training errors") {
  TrainerConfig cfg;
  cfg.vocab_size = 2;
  cfg.char_coverage = 1.0;
  CHECK_THROWS_AS(train_unigram(std::vector<std::string>{"abcdef"}, cfg), ConfigError);
  CHECK_THROWS(train_unigram(std::vector<std::string>{}, TrainerConfig{}));
}

TEST_CASE("trained model invariants, roundtrip and determinism") {
  const auto corpus = small_corpus(300, 3);
  TrainerConfig cfg;
  cfg.vocab_size = 60;
  cfg.char_coverage = 1.0;
  TrainingTrace trace;
  const auto m = train_unigram(corpus, cfg, &trace);
  CHECK(m.pieces().size() <= 60);
  double mass = 0.0;
  std::set<std::string> seen;
  for (const auto& p : m.pieces()) {
    CHECK_FALSE(p.surface.empty());
    CHECK(p.log_prob <= 0.0);
    CHECK(seen.insert(p.surface).second);
    mass += std::exp(p.log_prob);
  }
  CHECK(mass <= 1.0 + 1e-6);
  for (std::size_t i = 0; i < kSpecialTokens.size(); ++i) CHECK(m.surface(static_cast<int>(i)) == kSpecialTokens[i]);

  for (const auto& s : corpus) {
    const std::string n = m.normalize(s);
    CHECK(decode(m, encode(m, n)) == n);
  }
  const auto report = evaluate_tokenizer(m, corpus);
  CHECK(report.oov_rate == 0.0);
  CHECK(report.roundtrip_rate == 1.0);

  const auto again = train_unigram(corpus, cfg);
  CHECK(again.to_json() == m.to_json());

  // EM log-likelihood never decreases inside a stage
  for (const auto& stage : trace.stage_log_likelihood) {
    for (std::size_t i = 1; i < stage.size(); ++i) CHECK(stage[i] >= stage[i - 1] - 1e-6 * std::fabs(stage[i - 1]));
  }
}

TEST_CASE("evaluate_tokenizer averages tokens") {
  TokenizerModel m({{"a", -1.0}, {"b", -1.0}}, 1.0, {});
  const auto r = evaluate_tokenizer(m, std::vector<std::string>{"aaaa", "bbbbbb"});
  CHECK(r.tokens_per_sentence == doctest::Approx(5.0));
  CHECK(r.oov_rate == 0.0);
  CHECK(r.roundtrip_rate == 1.0);
  CHECK_THROWS(evaluate_tokenizer(m, std::vector<std::string>{}));
}

TEST_CASE("model json roundtrip") {
  TrainerConfig cfg;
  cfg.vocab_size = 40;
  const auto m = train_unigram(small_corpus(100, 8), cfg);
  const auto back = TokenizerModel::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK_THROWS_AS(TokenizerModel::from_json("{}"), ModelError);
  CHECK_THROWS_AS(TokenizerModel({{"a", 0.5}}, 1.0, {}), ConfigError);
  CHECK_THROWS_AS(TokenizerModel({{"a", -1.0}, {"a", -2.0}}, 1.0, {}), ConfigError);
}
