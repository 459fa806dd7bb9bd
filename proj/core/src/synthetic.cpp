#include "hembed/synthetic.hpp"

#include <random>
#include <set>

#include "hembed/errors.hpp"
#include "hembed/text.hpp"

namespace hembed::synthetic {

namespace {

const std::vector<std::string> kParticles = {"और", "का", "की", "के", "में", "से", "है", "था", "भी", "तो",
                                             "ही", "पर", "को", "ने", "यह", "वह", "एक", "कुछ"};

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

  std::string word(std::size_t syllables) {
    std::u32string w;
    for (std::size_t i = 0; i < syllables; ++i) {
      w.push_back(static_cast<char32_t>(0x0915 + below(0x0939 - 0x0915 + 1)));
      const std::size_t v = below(10);
      if (v < 7) w.push_back(static_cast<char32_t>(0x093E + v));  // ा ि ी ु ू ृ ॄ
    }
    return text::to_utf8(w);
  }

 private:
  std::mt19937_64 rng_;
};

struct Tuple {
  std::vector<std::size_t> concepts;
  bool operator<(const Tuple& o) const { return concepts < o.concepts; }
};

}  // namespace

ToyCorpus make_toy_corpus(const ToyConfig& c) {
  if (c.slots == 0 || c.concepts_per_slot == 0 || c.synonyms_per_concept == 0) {
    throw ConfigError("toy corpus: slots, concepts and synonyms must be positive");
  }
  Gen g(c.seed);
  ToyCorpus out;

  // surface[slot][concept][variant]
  std::set<std::string> used(kParticles.begin(), kParticles.end());
  std::vector<std::vector<std::vector<std::string>>> surface(c.slots);
  for (auto& slot : surface) {
    slot.resize(c.concepts_per_slot);
    for (auto& concept_words : slot) {
      while (concept_words.size() < c.synonyms_per_concept) {
        std::string w = g.word(2 + g.below(2));
        if (used.insert(w).second) concept_words.push_back(std::move(w));
      }
      out.synonyms.push_back(concept_words);
    }
  }

  auto render = [&](const Tuple& t, const std::vector<std::size_t>* avoid, std::vector<std::size_t>* chosen) {
    std::vector<std::string> words;
    for (std::size_t s = 0; s < c.slots; ++s) {
      std::size_t v = g.below(c.synonyms_per_concept);
      if (avoid && c.synonyms_per_concept > 1) {
        while (v == (*avoid)[s]) v = g.below(c.synonyms_per_concept);
      }
      if (chosen) chosen->push_back(v);
      words.push_back(surface[s][t.concepts[s]][v]);
    }
    const std::size_t fillers = g.below(c.max_fillers + 1);
    for (std::size_t f = 0; f < fillers; ++f) {
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(g.below(words.size() + 1)),
                   kParticles[g.below(kParticles.size())]);
    }
    if (g.unit() < c.number_prob) {
      std::u32string num;
      for (std::size_t d = 0, n = 1 + g.below(3); d < n; ++d) num.push_back(static_cast<char32_t>(0x0966 + g.below(10)));
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(g.below(words.size() + 1)), text::to_utf8(num));
    }
    std::string text;
    for (const auto& w : words) text += w + " ";
    return text + "।";
  };

  std::set<Tuple> taken;
  auto fresh = [&] {
    for (;;) {
      Tuple t;
      for (std::size_t s = 0; s < c.slots; ++s) t.concepts.push_back(g.below(c.concepts_per_slot));
      if (taken.insert(t).second) return t;
    }
  };

  Tuple base;
  for (std::size_t i = 0; i < c.train_docs; ++i) {
    Tuple t;
    if (c.family_size > 1 && i % c.family_size != 0 && c.concepts_per_slot > 1) {
      for (int attempt = 0;; ++attempt) {
        t = base;
        const std::size_t s = g.below(c.slots);
        t.concepts[s] = (t.concepts[s] + 1 + g.below(c.concepts_per_slot - 1)) % c.concepts_per_slot;
        if (taken.insert(t).second) break;
        if (attempt > 64) {
          t = fresh();
          break;
        }
      }
    } else {
      t = base = fresh();
    }
    corpus::TextRecord r;
    r.id = "train-" + std::to_string(i);
    std::vector<std::size_t> variants;
    r.text = render(t, nullptr, &variants);
    r.source = "toy";
    out.train.push_back(std::move(r));
    out.train_paraphrases.push_back(render(t, &variants, nullptr));
  }

  auto split = [&](std::size_t n_docs, std::size_t n_queries, const std::string& prefix, std::vector<Labeled>& docs,
                   std::vector<Labeled>& queries, std::vector<Labeled>& judgments) {
    if (n_queries > n_docs) throw ConfigError("toy corpus: more queries than documents");
    for (std::size_t i = 0; i < n_docs; ++i) {
      const Tuple t = fresh();
      std::vector<std::size_t> variants;
      const std::string doc_id = prefix + "doc-" + std::to_string(i);
      docs.emplace_back(doc_id, render(t, nullptr, &variants));
      if (i < n_queries) {
        const std::string qid = prefix + "q-" + std::to_string(i);
        queries.emplace_back(qid, render(t, &variants, nullptr));
        judgments.emplace_back(qid, doc_id);
      }
    }
  };
  split(c.index_docs, c.queries, "", out.index_docs, out.queries, out.judgments);
  split(c.val_docs, c.val_queries, "val-", out.val_docs, out.val_queries, out.val_judgments);
  return out;
}

}  // namespace hembed::synthetic
