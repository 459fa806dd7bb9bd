#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hembed/cache.hpp"
#include "hembed/corpus.hpp"
#include "hembed/encoder.hpp"
#include "hembed/retrieval.hpp"
#include "hembed/tokenizer.hpp"
#include "hembed/training.hpp"

namespace hembed::pipeline {

struct Paths {
  std::filesystem::path corpus;
  std::filesystem::path tokenizer;
  std::filesystem::path weights;
  std::filesystem::path index;
  std::filesystem::path cache_dir;
};

struct RetrievalConfig {
  retrieval::IndexMode mode = retrieval::IndexMode::float32;
  std::size_t k = 10;
  bool rerank = true;
  std::size_t cache_capacity = 4096;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int batch_window_ms = 10;
  std::size_t max_batch = 32;
};

struct PipelineConfig {
  Paths paths;
  encoder::EncoderConfig encoder;
  training::TrainConfig train;
  RetrievalConfig retrieval;
  ServiceConfig service;

  // Throws ConfigError for a port outside [1, 65535] or a zero batch size.
  void validate() const;
};

// Throws DataError naming the first path that does not exist.
void require_files(std::initializer_list<std::filesystem::path> paths);

// [bos] followed by the tokens of the cleaned text, cut to max_len.
std::vector<int> token_ids(const tokenizer::TokenizerModel& tok, std::size_t max_len, const std::string& text);

// Hex FNV-1a over the weights bytes followed by the tokenizer bytes.
std::string model_version(std::string_view weights_bytes, std::string_view tokenizer_bytes);
std::string read_file(const std::filesystem::path& path);

// Immutable after construction; the optional cache is the only mutable state.
class Embedder {
 public:
  Embedder(tokenizer::TokenizerModel tok, encoder::EncoderConfig config, encoder::EncoderWeights weights,
           std::string model_version);
  // Throws ModelError when either file is missing or invalid.
  static std::unique_ptr<Embedder> load(const std::filesystem::path& tokenizer, const std::filesystem::path& weights);

  void attach_cache(std::shared_ptr<cache::EmbeddingCache> cache) { cache_ = std::move(cache); }
  std::shared_ptr<cache::EmbeddingCache> cache() const { return cache_; }

  std::vector<int> token_ids(const std::string& text) const;
  std::vector<double> embed(const std::string& text) const;
  std::vector<std::vector<double>> embed_batch(const std::vector<std::string>& texts) const;

  const std::string& model_version() const { return version_; }
  std::size_t dim() const { return config_.dim; }
  const encoder::EncoderConfig& config() const { return config_; }
  const encoder::EncoderWeights& weights() const { return weights_; }
  const tokenizer::TokenizerModel& tokenizer() const { return tok_; }

 private:
  tokenizer::TokenizerModel tok_;
  encoder::EncoderConfig config_;
  encoder::EncoderWeights weights_;
  std::string version_;
  std::shared_ptr<cache::EmbeddingCache> cache_;
};

// ---- line formats -------------------------------------------------------------

struct Embedding {
  std::string id;
  std::vector<double> vector;
};

// {"id": ..., "vector": [...]}; doubles are printed round-trip exact.
std::string embedding_json(const Embedding& e);
std::vector<Embedding> read_embeddings(std::istream& in, std::size_t* malformed = nullptr);

// JSONL text records ({id, text[, source]}); malformed lines are skipped and counted.
std::vector<corpus::TextRecord> read_records(std::istream& in, std::size_t* malformed = nullptr);
// (id, text) of each record.
std::vector<std::pair<std::string, std::string>> as_pairs(const std::vector<corpus::TextRecord>& records);

// Builds an index from embeddings in file order.
std::unique_ptr<retrieval::VectorIndex> build_index(const std::vector<Embedding>& embeddings, retrieval::IndexMode mode);

}  // namespace hembed::pipeline
