#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hembed/corpus.hpp"

namespace hembed::tokenizer {

struct Piece {
  std::string surface;
  double log_prob = 0.0;  // natural log
};

// Special tokens occupy ids [0, kNumSpecial). The two separator markers are
// reserved slots; nothing emits them yet.
inline constexpr std::array<std::string_view, 8> kSpecialTokens = {
    "<unk>", "<pad>", "<bos>", "<eos>", "<url>", "<num>", "<cvsep>", "<npsep>"};
inline constexpr int kUnkId = 0;
inline constexpr int kPadId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kUrlId = 4;
inline constexpr int kNumId = 5;
inline constexpr int kNumSpecial = static_cast<int>(kSpecialTokens.size());

inline constexpr int kModelFileVersion = 1;

class TokenizerModel {
 public:
  TokenizerModel() = default;
  // Pieces are taken in id order. Throws ConfigError on duplicate or empty
  // surfaces and on positive log-probs.
  TokenizerModel(std::vector<Piece> pieces, double char_coverage,
                 corpus::SubstitutionTable normalization = corpus::default_script_table());

  const std::vector<Piece>& pieces() const { return pieces_; }
  std::size_t num_ids() const { return pieces_.size() + kNumSpecial; }
  double char_coverage() const { return char_coverage_; }
  const corpus::SubstitutionTable& normalization_table() const { return normalization_; }
  // log_prob of the rarest piece minus 10
  double unk_penalty() const { return unk_penalty_; }
  std::size_t max_piece_len() const { return max_piece_len_; }

  // Token id for a piece surface, or -1.
  int piece_id(std::string_view surface) const;
  std::string_view surface(int id) const;
  std::string normalize(std::string_view text) const;

  // Calls fn(length, id) for each piece that starts at text[pos], shortest first.
  template <typename Fn>
  void for_each_match(std::u32string_view text, std::size_t pos, Fn&& fn) const {
    int node = 0;
    for (std::size_t i = pos; i < text.size(); ++i) {
      auto it = trie_[node].next.find(text[i]);
      if (it == trie_[node].next.end()) return;
      node = it->second;
      if (trie_[node].piece >= 0) fn(i - pos + 1, trie_[node].piece);
    }
  }

  std::string to_json() const;
  static TokenizerModel from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static TokenizerModel load(const std::filesystem::path& path);

 private:
  struct TrieNode {
    std::unordered_map<char32_t, int> next;
    int piece = -1;  // token id
  };

  std::vector<Piece> pieces_;
  double char_coverage_ = 1.0;
  corpus::SubstitutionTable normalization_;
  double unk_penalty_ = -10.0;
  std::size_t max_piece_len_ = 0;
  std::unordered_map<std::string, int> ids_;
  std::vector<TrieNode> trie_;
};

struct Segmentation {
  std::vector<int> token_ids;
  double log_prob = 0.0;
};

// Maximum log-probability path through the piece lattice. Characters without
// a single-character piece become unk edges scored with unk_penalty(). Ties go
// to fewer tokens, then to the longer leftmost piece.
Segmentation viterbi_segment(const TokenizerModel& model, std::string_view text);

// Applies the model's normalization table, maps "<url>"/"<num>" literals to
// their special ids and segments the rest.
std::vector<int> encode(const TokenizerModel& model, std::string_view text);
// Control tokens decode to nothing, unk to "<unk>". Throws DataError on ids
// outside [0, num_ids).
std::string decode(const TokenizerModel& model, std::span<const int> ids);

struct TrainerConfig {
  std::size_t vocab_size = 2000;  // pieces, special tokens excluded
  double char_coverage = 0.9995;
  std::size_t max_piece_len = 8;
  std::size_t em_rounds_per_prune = 3;
  double prune_keep_fraction = 0.75;
  std::size_t min_seed_freq = 2;
  std::size_t seed_cap_multiplier = 20;
  corpus::SubstitutionTable normalization = corpus::default_script_table();
};

struct TrainingTrace {
  // corpus log-likelihood before each M-step, one vector per pruning stage
  std::vector<std::vector<double>> stage_log_likelihood;
  std::vector<std::size_t> stage_vocab_size;
};

TokenizerModel train_unigram(std::span<const std::string> corpus, const TrainerConfig& config,
                             TrainingTrace* trace = nullptr);

struct TokenizerReport {
  std::size_t sentences = 0;
  std::size_t tokens = 0;
  std::size_t unk_tokens = 0;
  double tokens_per_sentence = 0.0;
  double oov_rate = 0.0;
  double roundtrip_rate = 0.0;
};

TokenizerReport evaluate_tokenizer(const TokenizerModel& model, std::span<const std::string> testset);

}  // namespace hembed::tokenizer
