#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include "hembed/errors.hpp"
#include "hembed/text.hpp"
#include "hembed/training.hpp"
#include "json.hpp"

namespace hembed::training {

namespace {

std::uint64_t splitmix(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform01(std::uint64_t& s) { return static_cast<double>(splitmix(s) >> 11) * 0x1.0p-53; }

std::size_t below(std::uint64_t& s, std::size_t n) { return static_cast<std::size_t>(splitmix(s) % n); }

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\n' || text[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < text.size() && text[i] != ' ' && text[i] != '\n' && text[i] != '\t') ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

bool ends_clause(const std::string& word) {
  static const std::vector<std::string> marks = {",", ";", ":", ".", "?", "!", "।", "॥"};
  return std::any_of(marks.begin(), marks.end(), [&](const std::string& m) { return word.ends_with(m); });
}

bool is_placeholder(const std::string& w) { return w == "<num>" || w == "<url>"; }

}  // namespace

double edit_target(std::size_t edits, double edit_penalty, double floor) {
  return std::clamp(1.0 - edit_penalty * static_cast<double>(edits), floor, 1.0);
}

Augmented augment(std::string_view text, const AugmentConfig& config, std::uint64_t& rng) {
  std::unordered_map<std::string, std::size_t> group_of;
  for (std::size_t g = 0; g < config.synonyms.size(); ++g) {
    for (const auto& w : config.synonyms[g]) group_of.emplace(w, g);
  }
  std::vector<std::string> words = split_words(text);
  std::size_t edits = 0;

  for (auto& w : words) {
    auto it = group_of.find(w);
    if (it == group_of.end()) continue;
    const auto& group = config.synonyms[it->second];
    if (group.size() < 2 || uniform01(rng) >= config.substitution_prob) continue;
    std::string pick = w;
    while (pick == w) pick = group[below(rng, group.size())];
    w = pick;
    ++edits;
  }

  if (words.size() >= 2 && uniform01(rng) < config.swap_prob) {
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      if (!ends_clause(words[i]) && !ends_clause(words[i + 1]) && words[i] != words[i + 1]) slots.push_back(i);
    }
    if (!slots.empty()) {
      const std::size_t i = slots[below(rng, slots.size())];
      std::swap(words[i], words[i + 1]);
      ++edits;
    }
  }

  std::vector<std::string> kept;
  kept.reserve(words.size());
  for (auto& w : words) {
    if (is_placeholder(w) && uniform01(rng) < config.placeholder_drop_prob) {
      ++edits;
      continue;
    }
    kept.push_back(std::move(w));
  }
  if (edits == 0 || kept.empty()) return {std::string(text), 0};

  std::string out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i) out += ' ';
    out += kept[i];
  }
  return {out, edits};
}

Mat lexical_embed(const std::vector<std::string>& texts, std::size_t dim) {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < texts.size(); ++r) {
    const std::u32string cps = U"  " + text::to_u32(texts[r]) + U"  ";
    for (std::size_t i = 0; i + 3 <= cps.size(); ++i) {
      std::string key = text::to_utf8(std::u32string_view(cps).substr(i, 3));
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(text::fnv1a(key) % dim)) += 1.0;
    }
    const double n = out.row(static_cast<Eigen::Index>(r)).norm();
    if (n > 0.0) out.row(static_cast<Eigen::Index>(r)) /= n;
  }
  return out;
}

std::vector<Triplet> mine_hard_negatives(const std::vector<SimilarityPair>& positives,
                                         const std::vector<std::string>& pool, std::size_t n,
                                         const BatchEmbedder& embedder) {
  std::vector<Triplet> out;
  if (n == 0 || positives.empty() || pool.empty()) return out;
  const BatchEmbedder embed = embedder ? embedder : BatchEmbedder([](const auto& t) { return lexical_embed(t); });

  std::unordered_map<std::string, std::unordered_set<std::string>> partners;
  std::vector<std::string> anchors;
  std::unordered_map<std::string, std::size_t> anchor_row;
  for (const auto& p : positives) {
    partners[p.text_a].insert(p.text_b);
    partners[p.text_b].insert(p.text_a);
    if (anchor_row.emplace(p.text_a, anchors.size()).second) anchors.push_back(p.text_a);
  }
  const Mat pool_vecs = embed(pool);
  const Mat anchor_vecs = embed(anchors);
  const Mat scores = anchor_vecs * pool_vecs.transpose();

  std::vector<std::size_t> order(pool.size());
  for (const auto& p : positives) {
    const auto row = static_cast<Eigen::Index>(anchor_row.at(p.text_a));
    const auto& mine = partners.at(p.text_a);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return scores(row, static_cast<Eigen::Index>(x)) > scores(row, static_cast<Eigen::Index>(y));
    });
    std::size_t taken = 0;
    for (std::size_t j : order) {
      if (taken == n) break;
      const std::string& cand = pool[j];
      if (cand == p.text_a || cand == p.text_b || mine.contains(cand)) continue;
      out.push_back({p.text_a, p.text_b, cand});
      ++taken;
    }
  }
  return out;
}

namespace {
void check_pair_config(const std::vector<std::string>& corpus, const AugmentConfig& config) {
  if (corpus.size() < 2) throw DataError("build_pairs: corpus needs at least 2 texts");
  if (!(config.edit_penalty >= 0.0) || !(config.target_floor >= 0.0 && config.target_floor <= 1.0)) {
    throw ConfigError("build_pairs: edit penalty must be >= 0 and the target floor in [0, 1]");
  }
}
}  // namespace

PairDataset complete_pairs(std::vector<SimilarityPair> positives, const std::vector<std::string>& corpus,
                           const AugmentConfig& config, std::size_t n_hard_negatives, const BatchEmbedder& embedder) {
  check_pair_config(corpus, config);
  PairDataset data;
  data.pairs = positives;
  std::uint64_t rng = config.seed ^ 0x6a09e667f3bcc909ULL;
  const auto n_neg = static_cast<std::size_t>(std::llround(config.negatives_per_text * static_cast<double>(corpus.size())));
  for (std::size_t k = 0; k < n_neg; ++k) {
    const std::size_t i = below(rng, corpus.size());
    std::size_t j = below(rng, corpus.size() - 1);
    if (j >= i) ++j;
    if (corpus[i] == corpus[j]) continue;
    data.pairs.push_back({corpus[i], corpus[j], 0.0});
  }
  data.triplets = mine_hard_negatives(positives, corpus, n_hard_negatives, embedder);
  return data;
}

PairDataset build_pairs(const std::vector<std::string>& corpus, const AugmentConfig& config,
                        std::size_t n_hard_negatives, const BatchEmbedder& embedder) {
  check_pair_config(corpus, config);
  std::vector<SimilarityPair> positives;
  std::uint64_t rng = config.seed;
  for (const auto& t : corpus) {
    for (std::size_t k = 0; k < config.positives_per_text; ++k) {
      Augmented a = augment(t, config, rng);
      positives.push_back({t, std::move(a.text), edit_target(a.edits, config.edit_penalty, config.target_floor)});
    }
  }
  return complete_pairs(std::move(positives), corpus, config, n_hard_negatives, embedder);
}

void write_pairs(std::ostream& out, const PairDataset& data) {
  for (const auto& p : data.pairs) {
    nlohmann::ordered_json j;
    j["text_a"] = p.text_a;
    j["text_b"] = p.text_b;
    j["target"] = p.target;
    out << j.dump() << '\n';
  }
  for (const auto& t : data.triplets) {
    nlohmann::ordered_json j;
    j["anchor"] = t.anchor;
    j["positive"] = t.positive;
    j["negative"] = t.negative;
    out << j.dump() << '\n';
  }
}

PairDataset read_pairs(std::istream& in, std::size_t* malformed) {
  PairDataset data;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      ++bad;
      continue;
    }
    if (j.contains("text_a") && j.contains("text_b") && j.contains("target") && j["text_a"].is_string() &&
        j["text_b"].is_string() && j["target"].is_number()) {
      const double target = j["target"].get<double>();
      if (!(target >= 0.0 && target <= 1.0)) {
        ++bad;
        continue;
      }
      data.pairs.push_back({j["text_a"].get<std::string>(), j["text_b"].get<std::string>(), target});
    } else if (j.contains("anchor") && j.contains("positive") && j.contains("negative") && j["anchor"].is_string() &&
               j["positive"].is_string() && j["negative"].is_string() && j["positive"] != j["negative"]) {
      data.triplets.push_back(
          {j["anchor"].get<std::string>(), j["positive"].get<std::string>(), j["negative"].get<std::string>()});
    } else {
      ++bad;
    }
  }
  if (malformed) *malformed = bad;
  return data;
}

}  // namespace hembed::training
