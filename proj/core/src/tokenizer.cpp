#include "hembed/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "hembed/errors.hpp"
#include "hembed/text.hpp"
#include "json.hpp"

namespace hembed::tokenizer {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// Code-point trie over piece indices; used by the trainer where pieces come
// and go between stages.
class PieceTrie {
 public:
  explicit PieceTrie(const std::vector<std::u32string>& surfaces) {
    nodes_.emplace_back();
    for (std::size_t p = 0; p < surfaces.size(); ++p) {
      int node = 0;
      for (char32_t c : surfaces[p]) {
        auto it = nodes_[node].next.find(c);
        if (it == nodes_[node].next.end()) {
          nodes_[node].next.emplace(c, static_cast<int>(nodes_.size()));
          node = static_cast<int>(nodes_.size());
          nodes_.emplace_back();
        } else {
          node = it->second;
        }
      }
      nodes_[node].piece = static_cast<int>(p);
    }
  }

  template <typename Fn>
  void for_each_match(std::u32string_view s, std::size_t pos, Fn&& fn) const {
    int node = 0;
    for (std::size_t i = pos; i < s.size(); ++i) {
      auto it = nodes_[node].next.find(s[i]);
      if (it == nodes_[node].next.end()) return;
      node = it->second;
      if (nodes_[node].piece >= 0) fn(i - pos + 1, nodes_[node].piece);
    }
  }

 private:
  struct Node {
    std::unordered_map<char32_t, int> next;
    int piece = -1;
  };
  std::vector<Node> nodes_;
};

}  // namespace

TokenizerModel::TokenizerModel(std::vector<Piece> pieces, double char_coverage,
                               corpus::SubstitutionTable normalization)
    : pieces_(std::move(pieces)), char_coverage_(char_coverage), normalization_(std::move(normalization)) {
  if (!(char_coverage_ > 0.0 && char_coverage_ <= 1.0)) throw ConfigError("char_coverage must be in (0, 1]");
  trie_.emplace_back();
  double min_lp = 0.0;
  for (std::size_t p = 0; p < pieces_.size(); ++p) {
    const auto& piece = pieces_[p];
    if (piece.surface.empty()) throw ConfigError("empty piece surface");
    if (!std::isfinite(piece.log_prob) || piece.log_prob > 0.0) {
      throw ConfigError("piece '" + piece.surface + "' has invalid log_prob");
    }
    const int id = static_cast<int>(p) + kNumSpecial;
    if (!ids_.emplace(piece.surface, id).second) throw ConfigError("duplicate piece '" + piece.surface + "'");
    min_lp = std::min(min_lp, piece.log_prob);
    const std::u32string cps = text::to_u32(piece.surface);
    max_piece_len_ = std::max(max_piece_len_, cps.size());
    int node = 0;
    for (char32_t c : cps) {
      auto it = trie_[node].next.find(c);
      if (it == trie_[node].next.end()) {
        trie_[node].next.emplace(c, static_cast<int>(trie_.size()));
        node = static_cast<int>(trie_.size());
        trie_.emplace_back();
      } else {
        node = it->second;
      }
    }
    trie_[node].piece = id;
  }
  unk_penalty_ = min_lp - 10.0;
}

int TokenizerModel::piece_id(std::string_view surface) const {
  auto it = ids_.find(std::string(surface));
  return it == ids_.end() ? -1 : it->second;
}

std::string_view TokenizerModel::surface(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= num_ids()) throw DataError("token id out of range: " + std::to_string(id));
  if (id < kNumSpecial) return kSpecialTokens[static_cast<std::size_t>(id)];
  return pieces_[static_cast<std::size_t>(id - kNumSpecial)].surface;
}

std::string TokenizerModel::normalize(std::string_view t) const {
  return corpus::apply_substitutions(std::string(t), normalization_);
}

std::string TokenizerModel::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = kModelFileVersion;
  j["vocab_size"] = pieces_.size();
  j["char_coverage"] = char_coverage_;
  j["special_tokens"] = kSpecialTokens;
  auto table = nlohmann::ordered_json::array();
  for (const auto& [from, to] : normalization_) table.push_back({from, to});
  j["normalization_table"] = table;
  auto pieces = nlohmann::ordered_json::array();
  for (const auto& p : pieces_) pieces.push_back({p.surface, p.log_prob});
  j["pieces"] = pieces;
  return j.dump(1);
}

TokenizerModel TokenizerModel::from_json(std::string_view json) {
  auto j = nlohmann::json::parse(json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ModelError("tokenizer model: not a JSON object");
  try {
    const int version = j.at("version").get<int>();
    if (version != kModelFileVersion) throw ModelError("tokenizer model: unsupported version " + std::to_string(version));
    const auto specials = j.at("special_tokens").get<std::vector<std::string>>();
    if (specials.size() != kSpecialTokens.size() ||
        !std::equal(specials.begin(), specials.end(), kSpecialTokens.begin())) {
      throw ModelError("tokenizer model: special token list mismatch");
    }
    corpus::SubstitutionTable table;
    for (const auto& e : j.at("normalization_table")) table.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    std::vector<Piece> pieces;
    for (const auto& e : j.at("pieces")) pieces.push_back({e.at(0).get<std::string>(), e.at(1).get<double>()});
    if (pieces.size() != j.at("vocab_size").get<std::size_t>()) throw ModelError("tokenizer model: vocab_size mismatch");
    return TokenizerModel(std::move(pieces), j.at("char_coverage").get<double>(), std::move(table));
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("tokenizer model: ") + e.what());
  } catch (const ConfigError& e) {
    throw ModelError(std::string("tokenizer model: ") + e.what());
  }
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json() << '\n';
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot read tokenizer model " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {

Segmentation viterbi_u32(const TokenizerModel& model, std::u32string_view s) {
  const std::size_t n = s.size();
  std::vector<double> best(n + 1, kNegInf);
  std::vector<std::size_t> ntok(n + 1, 0);
  std::vector<std::size_t> step(n + 1, 0);
  std::vector<int> first(n + 1, -1);
  best[n] = 0.0;
  const auto& pieces = model.pieces();
  for (std::size_t i = n; i-- > 0;) {
    auto consider = [&](std::size_t len, int id, double lp) {
      const std::size_t j = i + len;
      const double cand = lp + best[j];
      const std::size_t tok = ntok[j] + 1;
      const bool better = cand > best[i] ||
                          (cand == best[i] && (tok < ntok[i] || (tok == ntok[i] && len > step[i])));
      if (better) {
        best[i] = cand;
        ntok[i] = tok;
        step[i] = len;
        first[i] = id;
      }
    };
    bool single = false;
    model.for_each_match(s, i, [&](std::size_t len, int id) {
      if (len == 1) single = true;
      consider(len, id, pieces[static_cast<std::size_t>(id - kNumSpecial)].log_prob);
    });
    if (!single) consider(1, kUnkId, model.unk_penalty());
  }
  Segmentation seg;
  seg.log_prob = best[0];
  for (std::size_t i = 0; i < n; i += step[i]) seg.token_ids.push_back(first[i]);
  return seg;
}

}  // namespace

Segmentation viterbi_segment(const TokenizerModel& model, std::string_view t) {
  return viterbi_u32(model, text::to_u32(t));
}

std::vector<int> encode(const TokenizerModel& model, std::string_view input) {
  const std::string t = model.normalize(input);
  std::vector<int> ids;
  std::size_t pos = 0;
  auto flush = [&](std::size_t end) {
    if (end > pos) {
      auto seg = viterbi_u32(model, text::to_u32(std::string_view(t).substr(pos, end - pos)));
      ids.insert(ids.end(), seg.token_ids.begin(), seg.token_ids.end());
    }
  };
  while (pos < t.size()) {
    const std::size_t u = t.find(corpus::kUrlPlaceholder, pos);
    const std::size_t m = t.find(corpus::kNumPlaceholder, pos);
    const std::size_t next = std::min(u, m);
    if (next == std::string::npos) break;
    flush(next);
    ids.push_back(next == u ? kUrlId : kNumId);
    pos = next + (next == u ? corpus::kUrlPlaceholder.size() : corpus::kNumPlaceholder.size());
  }
  flush(t.size());
  return ids;
}

std::string decode(const TokenizerModel& model, std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= model.num_ids()) {
      throw DataError("token id out of range: " + std::to_string(id));
    }
    if (id == kUnkId || id == kUrlId || id == kNumId || id >= kNumSpecial) out += model.surface(id);
  }
  return out;
}

namespace {

struct Unit {
  std::u32string text;
  double freq;
};

struct TrainState {
  std::vector<std::u32string> surfaces;
  std::vector<double> log_prob;
  std::vector<bool> required;
};

double e_step(const std::vector<Unit>& units, const PieceTrie& trie, const std::vector<double>& logp,
              std::vector<double>& counts) {
  counts.assign(logp.size(), 0.0);
  double total = 0.0;
  std::vector<double> alpha;
  std::vector<double> beta;
  for (const auto& u : units) {
    const std::u32string_view s = u.text;
    const std::size_t n = s.size();
    alpha.assign(n + 1, kNegInf);
    beta.assign(n + 1, kNegInf);
    alpha[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (alpha[i] == kNegInf) continue;
      trie.for_each_match(s, i, [&](std::size_t len, int p) {
        alpha[i + len] = log_add(alpha[i + len], alpha[i] + logp[static_cast<std::size_t>(p)]);
      });
    }
    beta[n] = 0.0;
    for (std::size_t i = n; i-- > 0;) {
      trie.for_each_match(s, i, [&](std::size_t len, int p) {
        beta[i] = log_add(beta[i], logp[static_cast<std::size_t>(p)] + beta[i + len]);
      });
    }
    const double z = alpha[n];
    if (!std::isfinite(z)) throw ModelError("tokenizer training: unit has no segmentation");
    total += u.freq * z;
    for (std::size_t i = 0; i < n; ++i) {
      if (alpha[i] == kNegInf) continue;
      trie.for_each_match(s, i, [&](std::size_t len, int p) {
        const double lp = logp[static_cast<std::size_t>(p)];
        if (lp == kNegInf) return;
        counts[static_cast<std::size_t>(p)] += u.freq * std::exp(alpha[i] + lp + beta[i + len] - z);
      });
    }
  }
  return total;
}

void m_step(TrainState& st, const std::vector<double>& counts) {
  double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> c = counts;
  const double floor = total * 1e-12;
  for (std::size_t p = 0; p < c.size(); ++p) {
    if (st.required[p] && c[p] < floor) c[p] = floor;
  }
  total = std::accumulate(c.begin(), c.end(), 0.0);
  TrainState next;
  for (std::size_t p = 0; p < c.size(); ++p) {
    if (c[p] <= 0.0 && !st.required[p]) continue;
    next.surfaces.push_back(std::move(st.surfaces[p]));
    next.log_prob.push_back(std::log(c[p] / total));
    next.required.push_back(st.required[p]);
  }
  st = std::move(next);
}

// Best path over the trainer trie, optionally forbidding one piece.
std::vector<int> viterbi_pieces(std::u32string_view s, const PieceTrie& trie, const std::vector<double>& logp,
                                int forbidden) {
  const std::size_t n = s.size();
  std::vector<double> best(n + 1, kNegInf);
  std::vector<std::size_t> step(n + 1, 0);
  std::vector<int> first(n + 1, -1);
  best[n] = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    trie.for_each_match(s, i, [&](std::size_t len, int p) {
      if (p == forbidden || best[i + len] == kNegInf) return;
      const double cand = logp[static_cast<std::size_t>(p)] + best[i + len];
      if (cand > best[i]) {
        best[i] = cand;
        step[i] = len;
        first[i] = p;
      }
    });
  }
  std::vector<int> out;
  if (best[0] == kNegInf) return out;
  for (std::size_t i = 0; i < n; i += step[i]) out.push_back(first[i]);
  return out;
}

// Drops the pieces whose removal costs the least likelihood, keeping
// max(target, keep_fraction * size) pieces. Required characters always stay.
void prune(TrainState& st, const std::vector<Unit>& units, std::size_t target, double keep_fraction) {
  const std::size_t size = st.surfaces.size();
  const PieceTrie trie(st.surfaces);
  std::vector<double> freq(size, 0.0);
  std::vector<std::vector<std::size_t>> inverted(size);
  double vsum = 0.0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    vsum += units[u].freq;
    for (int p : viterbi_pieces(units[u].text, trie, st.log_prob, -1)) {
      freq[static_cast<std::size_t>(p)] += units[u].freq;
      inverted[static_cast<std::size_t>(p)].push_back(u);
    }
  }
  const double sum = std::accumulate(freq.begin(), freq.end(), 0.0);
  const double logsum = std::log(sum);

  std::vector<bool> keep(size, false);
  std::vector<std::pair<double, std::size_t>> candidates;
  for (std::size_t p = 0; p < size; ++p) {
    if (st.required[p]) {
      keep[p] = true;
      continue;
    }
    if (freq[p] == 0.0) continue;
    const auto alternatives = viterbi_pieces(st.surfaces[p], trie, st.log_prob, static_cast<int>(p));
    if (alternatives.empty()) {
      keep[p] = true;
      continue;
    }
    double f = 0.0;
    for (std::size_t u : inverted[p]) f += units[u].freq;
    f /= vsum;
    const double logprob_sp = std::log(freq[p]) - logsum;
    const double logsum_alt = std::log(sum + freq[p] * static_cast<double>(alternatives.size() - 1));
    double logprob_alt = 0.0;
    for (int a : alternatives) logprob_alt += std::log(freq[static_cast<std::size_t>(a)] + freq[p]) - logsum_alt;
    candidates.emplace_back(f * (logprob_sp - logprob_alt), p);
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return st.surfaces[a.second] < st.surfaces[b.second];
  });
  std::size_t kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  const std::size_t shrunk = std::min(size - 1, static_cast<std::size_t>(keep_fraction * static_cast<double>(size)));
  const std::size_t goal = std::max(target, shrunk);
  for (const auto& [loss, p] : candidates) {
    if (kept >= goal) break;
    keep[p] = true;
    ++kept;
  }
  TrainState next;
  for (std::size_t p = 0; p < size; ++p) {
    if (!keep[p]) continue;
    next.surfaces.push_back(std::move(st.surfaces[p]));
    next.log_prob.push_back(st.log_prob[p]);
    next.required.push_back(st.required[p]);
  }
  // renormalize over survivors
  double mass = 0.0;
  for (double lp : next.log_prob) mass += std::exp(lp);
  for (double& lp : next.log_prob) lp -= std::log(mass);
  st = std::move(next);
}

}  // namespace

TokenizerModel train_unigram(std::span<const std::string> corpus, const TrainerConfig& config,
                             TrainingTrace* trace) {
  if (corpus.empty()) throw ConfigError("train_unigram: empty corpus");
  if (!(config.char_coverage > 0.0 && config.char_coverage <= 1.0)) {
    throw ConfigError("train_unigram: char_coverage must be in (0, 1]");
  }
  if (config.max_piece_len == 0) throw ConfigError("train_unigram: max_piece_len must be positive");
  if (!(config.prune_keep_fraction > 0.0 && config.prune_keep_fraction < 1.0)) {
    throw ConfigError("train_unigram: prune_keep_fraction must be in (0, 1)");
  }
  if (config.em_rounds_per_prune == 0) throw ConfigError("train_unigram: em_rounds_per_prune must be positive");

  std::vector<std::u32string> sentences;
  sentences.reserve(corpus.size());
  std::map<char32_t, double> char_count;
  double total_chars = 0.0;
  for (const auto& line : corpus) {
    sentences.push_back(text::to_u32(corpus::apply_substitutions(line, config.normalization)));
    for (char32_t c : sentences.back()) {
      char_count[c] += 1.0;
      total_chars += 1.0;
    }
  }
  if (total_chars == 0.0) throw ConfigError("train_unigram: corpus has no characters");

  std::vector<std::pair<char32_t, double>> by_freq(char_count.begin(), char_count.end());
  std::stable_sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::map<char32_t, double> covered;
  double mass = 0.0;
  for (const auto& [c, n] : by_freq) {
    if (mass / total_chars >= config.char_coverage - 1e-12) break;
    covered.emplace(c, n);
    mass += n;
  }
  if (covered.size() > config.vocab_size) {
    throw ConfigError("train_unigram: vocab_size " + std::to_string(config.vocab_size) + " is smaller than the " +
                      std::to_string(covered.size()) + " characters required by char_coverage");
  }

  // Units start at each whitespace character; uncovered characters split units and are dropped.
  std::map<std::u32string, double> unit_freq;
  for (const auto& s : sentences) {
    std::u32string cur;
    for (char32_t c : s) {
      if (!covered.count(c)) {
        if (!cur.empty()) unit_freq[cur] += 1.0;
        cur.clear();
        continue;
      }
      if (text::is_space(c) && !cur.empty()) {
        unit_freq[cur] += 1.0;
        cur.clear();
      }
      cur.push_back(c);
    }
    if (!cur.empty()) unit_freq[cur] += 1.0;
  }
  std::vector<Unit> units;
  units.reserve(unit_freq.size());
  for (auto& [t, f] : unit_freq) units.push_back({t, f});

  std::map<std::u32string, double> substr_freq;
  for (const auto& u : units) {
    for (std::size_t b = 0; b < u.text.size(); ++b) {
      for (std::size_t len = 2; len <= config.max_piece_len && b + len <= u.text.size(); ++len) {
        if (text::is_space(u.text[b + len - 1])) break;
        substr_freq[u.text.substr(b, len)] += u.freq;
      }
    }
  }
  std::vector<std::pair<std::u32string, double>> seeds;
  for (auto& [t, f] : substr_freq) {
    if (f >= static_cast<double>(config.min_seed_freq)) seeds.emplace_back(t, f);
  }
  std::stable_sort(seeds.begin(), seeds.end(), [](const auto& a, const auto& b) {
    return a.second * static_cast<double>(a.first.size()) > b.second * static_cast<double>(b.first.size());
  });
  const std::size_t cap = config.seed_cap_multiplier * config.vocab_size;
  if (seeds.size() > cap) seeds.resize(cap);

  TrainState st;
  double seed_mass = 0.0;
  for (const auto& [c, n] : covered) {
    st.surfaces.emplace_back(1, c);
    st.log_prob.push_back(n);
    st.required.push_back(true);
    seed_mass += n;
  }
  for (const auto& [t, f] : seeds) {
    st.surfaces.push_back(t);
    st.log_prob.push_back(f);
    st.required.push_back(false);
    seed_mass += f;
  }
  for (double& lp : st.log_prob) lp = std::log(lp / seed_mass);

  std::vector<double> counts;
  while (true) {
    std::vector<double> stage;
    for (std::size_t r = 0; r < config.em_rounds_per_prune; ++r) {
      const PieceTrie trie(st.surfaces);
      stage.push_back(e_step(units, trie, st.log_prob, counts));
      m_step(st, counts);
    }
    if (trace) {
      trace->stage_log_likelihood.push_back(std::move(stage));
      trace->stage_vocab_size.push_back(st.surfaces.size());
    }
    if (st.surfaces.size() <= config.vocab_size) break;
    const std::size_t before = st.surfaces.size();
    prune(st, units, config.vocab_size, config.prune_keep_fraction);
    if (st.surfaces.size() >= before) throw ModelError("train_unigram: pruning made no progress");
  }

  std::vector<std::size_t> order(st.surfaces.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (st.log_prob[a] != st.log_prob[b]) return st.log_prob[a] > st.log_prob[b];
    return st.surfaces[a] < st.surfaces[b];
  });
  std::vector<Piece> pieces;
  pieces.reserve(order.size());
  for (std::size_t p : order) pieces.push_back({text::to_utf8(st.surfaces[p]), std::min(0.0, st.log_prob[p])});
  return TokenizerModel(std::move(pieces), config.char_coverage, config.normalization);
}

TokenizerReport evaluate_tokenizer(const TokenizerModel& model, std::span<const std::string> testset) {
  if (testset.empty()) throw DataError("evaluate_tokenizer: empty test set");
  TokenizerReport r;
  std::size_t roundtrips = 0;
  for (const auto& s : testset) {
    const auto ids = encode(model, s);
    r.tokens += ids.size();
    r.unk_tokens += static_cast<std::size_t>(std::count(ids.begin(), ids.end(), kUnkId));
    if (decode(model, ids) == s) ++roundtrips;
  }
  r.sentences = testset.size();
  r.tokens_per_sentence = static_cast<double>(r.tokens) / static_cast<double>(r.sentences);
  r.oov_rate = r.tokens == 0 ? 0.0 : static_cast<double>(r.unk_tokens) / static_cast<double>(r.tokens);
  r.roundtrip_rate = static_cast<double>(roundtrips) / static_cast<double>(r.sentences);
  return r;
}

}  // namespace hembed::tokenizer
