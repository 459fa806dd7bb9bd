#include "hembed/pipeline.hpp"

#include <fstream>
#include <istream>
#include <sstream>

#include "hembed/errors.hpp"
#include "hembed/text.hpp"
#include "json.hpp"

namespace hembed::pipeline {

void PipelineConfig::validate() const {
  if (service.port < 1 || service.port > 65535) throw ConfigError("port must be in [1, 65535]");
  if (service.max_batch == 0 || service.batch_window_ms < 0) throw ConfigError("service batching parameters out of range");
  if (retrieval.k == 0) throw ConfigError("k must be at least 1");
  if (retrieval.cache_capacity == 0) throw ConfigError("cache capacity must be at least 1");
  encoder.validate();
  train.validate();
}

void require_files(std::initializer_list<std::filesystem::path> paths) {
  for (const auto& p : paths) {
    if (p.empty()) throw ConfigError("a required path was not given");
    if (!std::filesystem::exists(p)) throw DataError("no such file: " + p.string());
  }
}

std::vector<int> token_ids(const tokenizer::TokenizerModel& tok, std::size_t max_len, const std::string& text) {
  std::vector<int> ids{tokenizer::kBosId};
  for (int id : tokenizer::encode(tok, corpus::clean_text(text))) {
    if (ids.size() >= max_len) break;
    ids.push_back(id);
  }
  return ids;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string model_version(std::string_view weights_bytes, std::string_view tokenizer_bytes) {
  const std::uint64_t h = text::fnv1a(weights_bytes);
  return text::hex64(text::fnv1a(tokenizer_bytes, h));
}

Embedder::Embedder(tokenizer::TokenizerModel tok, encoder::EncoderConfig config, encoder::EncoderWeights weights,
                   std::string version)
    : tok_(std::move(tok)), config_(config), weights_(std::move(weights)), version_(std::move(version)) {
  if (tok_.num_ids() > config_.vocab_size) {
    throw ModelError("tokenizer has " + std::to_string(tok_.num_ids()) + " ids but the encoder vocabulary is " +
                     std::to_string(config_.vocab_size));
  }
}

std::unique_ptr<Embedder> Embedder::load(const std::filesystem::path& tokenizer_path,
                                         const std::filesystem::path& weights_path) {
  if (!std::filesystem::exists(tokenizer_path)) throw ModelError("tokenizer model not found: " + tokenizer_path.string());
  if (!std::filesystem::exists(weights_path)) throw ModelError("encoder weights not found: " + weights_path.string());
  const std::string tok_bytes = read_file(tokenizer_path);
  const std::string w_bytes = read_file(weights_path);
  encoder::EncoderConfig cfg;
  encoder::EncoderWeights w;
  encoder::deserialize_weights(w_bytes, cfg, w);
  return std::make_unique<Embedder>(tokenizer::TokenizerModel::from_json(tok_bytes), cfg, std::move(w),
                                    pipeline::model_version(w_bytes, tok_bytes));
}

std::vector<int> Embedder::token_ids(const std::string& text) const {
  return pipeline::token_ids(tok_, config_.max_seq_len, text);
}

std::vector<double> Embedder::embed(const std::string& text) const {
  if (cache_) {
    if (auto hit = cache_->get(text); hit.vector) return *hit.vector;
  }
  const RowVec v = encoder::embed_ids(config_, weights_, token_ids(text));
  std::vector<double> out(v.data(), v.data() + v.size());
  if (cache_) cache_->put(text, out);
  return out;
}

std::vector<std::vector<double>> Embedder::embed_batch(const std::vector<std::string>& texts) const {
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed(t));
  return out;
}

std::string embedding_json(const Embedding& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["vector"] = e.vector;
  return j.dump();
}

std::vector<Embedding> read_embeddings(std::istream& in, std::size_t* malformed) {
  std::vector<Embedding> out;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("vector") || !j["vector"].is_array() || !j.contains("id")) {
      ++bad;
      continue;
    }
    Embedding e;
    e.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    bool ok = true;
    for (const auto& x : j["vector"]) {
      if (!x.is_number()) {
        ok = false;
        break;
      }
      e.vector.push_back(x.get<double>());
    }
    if (!ok || e.vector.empty()) {
      ++bad;
      continue;
    }
    out.push_back(std::move(e));
  }
  if (malformed) *malformed = bad;
  return out;
}

std::vector<corpus::TextRecord> read_records(std::istream& in, std::size_t* malformed) {
  std::vector<corpus::TextRecord> out;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (auto r = corpus::parse_jsonl(line)) {
      out.push_back(std::move(*r));
    } else {
      ++bad;
    }
  }
  if (malformed) *malformed = bad;
  return out;
}

std::vector<std::pair<std::string, std::string>> as_pairs(const std::vector<corpus::TextRecord>& records) {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.emplace_back(r.id, r.text);
  return out;
}

std::unique_ptr<retrieval::VectorIndex> build_index(const std::vector<Embedding>& embeddings,
                                                    retrieval::IndexMode mode) {
  if (embeddings.empty()) throw DataError("no embeddings to index");
  auto index = std::make_unique<retrieval::VectorIndex>(embeddings.front().vector.size(), mode);
  for (const auto& e : embeddings) index->add(e.id, std::span<const double>(e.vector));
  return index;
}

}  // namespace hembed::pipeline
