#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace hembed::retrieval {

enum class IndexMode : std::uint8_t { float32 = 0, int8 = 1 };

std::string_view mode_name(IndexMode m);
IndexMode parse_mode(std::string_view name);

struct QuantizedVector {
  std::vector<std::int8_t> codes;
  float scale = 0.0f;  // max |x| / 127; zero for the all-zero vector

  std::size_t payload_bytes() const { return codes.size() + sizeof(float); }
};

// Symmetric per-vector scaling; the largest-magnitude component maps to +-127.
QuantizedVector quantize_int8(std::span<const float> x);
std::vector<float> dequantize(const QuantizedVector& q);

inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr std::size_t kRerankFactor = 4;

struct Hit {
  std::string doc_id;
  double score = 0.0;
  std::size_t position = 0;  // insertion order
};

struct RetrievalResult {
  std::string query_id;
  std::vector<Hit> hits;  // score descending, ties by ascending position
};

// Exact cosine index over unit-norm float32 vectors. Concurrent searches are
// allowed; add() takes the lock exclusively.
class VectorIndex {
 public:
  explicit VectorIndex(std::size_t dim, IndexMode mode = IndexMode::float32);
  VectorIndex(const VectorIndex&) = delete;
  VectorIndex& operator=(const VectorIndex&) = delete;

  std::size_t dim() const { return dim_; }
  IndexMode mode() const { return mode_; }
  std::size_t size() const;

  // Throws DataError on a duplicate id, wrong dimension or a norm off by more than 1e-6.
  void add(const std::string& doc_id, std::span<const double> vector);
  void add(const std::string& doc_id, std::span<const float> vector);

  // Full scan. In int8 mode with rerank the top kRerankFactor * k quantized
  // candidates are rescored with the float vectors. Throws DataError on an
  // empty index and ConfigError for k == 0.
  RetrievalResult search(std::span<const double> query, std::size_t k, bool rerank = true,
                         const std::string& query_id = {}) const;
  // int8 mode only: the quantized candidate pool search() reranks.
  std::vector<Hit> quantized_candidates(std::span<const double> query, std::size_t n) const;

  const std::string& id(std::size_t position) const { return ids_[position]; }
  std::span<const float> vector(std::size_t position) const;
  const QuantizedVector& quantized(std::size_t position) const { return codes_[position]; }

  // Versioned little-endian file: magic, version, dim, count, mode, ids,
  // float block and in int8 mode one scale + dim codes per entry.
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<VectorIndex> load(const std::filesystem::path& path);

 private:
  std::vector<Hit> rank(std::vector<double> scores, std::size_t k, const std::vector<std::size_t>* positions) const;

  std::size_t dim_;
  IndexMode mode_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::vector<float> data_;
  std::vector<QuantizedVector> codes_;
  mutable std::shared_mutex mutex_;
};

inline constexpr std::uint32_t kIndexFileVersion = 1;

}  // namespace hembed::retrieval
