#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hembed/corpus.hpp"

// Template-paraphrase toy corpus in Devanagari script. Every text fills a
// fixed sequence of slots with one concept per slot; each concept has
// several interchangeable surface words. Paraphrases keep the concepts and
// redraw the surface words and filler particles.
namespace hembed::synthetic {

struct ToyConfig {
  std::uint64_t seed = 7;
  std::size_t slots = 6;
  std::size_t concepts_per_slot = 24;
  std::size_t synonyms_per_concept = 3;
  std::size_t max_fillers = 3;
  double number_prob = 0.2;
  std::size_t train_docs = 2000;
  // Training texts come in families that differ from a base text in one slot.
  std::size_t family_size = 4;
  std::size_t index_docs = 1000;
  std::size_t queries = 200;
  std::size_t val_docs = 300;
  std::size_t val_queries = 100;
};

using Labeled = std::pair<std::string, std::string>;  // (id, text)

struct ToyCorpus {
  std::vector<std::vector<std::string>> synonyms;
  std::vector<corpus::TextRecord> train;
  std::vector<std::string> train_paraphrases;  // aligned with train
  std::vector<Labeled> index_docs;
  std::vector<Labeled> queries;    // paraphrases of the first `queries` index docs
  std::vector<Labeled> judgments;  // (query_id, doc_id)
  std::vector<Labeled> val_docs;
  std::vector<Labeled> val_queries;
  std::vector<Labeled> val_judgments;
};

// Deterministic in config. Concept tuples are unique across all splits.
ToyCorpus make_toy_corpus(const ToyConfig& config = {});

}  // namespace hembed::synthetic
