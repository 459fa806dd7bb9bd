#include "hembed/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#include "hembed/errors.hpp"

namespace hembed::retrieval {

std::string_view mode_name(IndexMode m) { return m == IndexMode::int8 ? "int8" : "float"; }

IndexMode parse_mode(std::string_view name) {
  if (name == "float" || name == "float32") return IndexMode::float32;
  if (name == "int8") return IndexMode::int8;
  throw ConfigError("unknown index mode '" + std::string(name) + "' (expected float or int8)");
}

QuantizedVector quantize_int8(std::span<const float> x) {
  QuantizedVector q;
  q.codes.assign(x.size(), 0);
  float peak = 0.0f;
  for (float v : x) {
    if (!std::isfinite(v)) throw DataError("quantize_int8: non-finite component");
    peak = std::max(peak, std::fabs(v));
  }
  if (peak == 0.0f) return q;
  q.scale = peak / 127.0f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = std::nearbyint(static_cast<double>(x[i]) / static_cast<double>(q.scale));
    q.codes[i] = static_cast<std::int8_t>(std::clamp(c, -127.0, 127.0));
  }
  return q;
}

std::vector<float> dequantize(const QuantizedVector& q) {
  std::vector<float> out(q.codes.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(q.codes[i]) * static_cast<double>(q.scale));
  }
  return out;
}

VectorIndex::VectorIndex(std::size_t dim, IndexMode mode) : dim_(dim), mode_(mode) {
  if (dim == 0) throw ConfigError("index dimension must be positive");
}

std::size_t VectorIndex::size() const {
  std::shared_lock lock(mutex_);
  return ids_.size();
}

std::span<const float> VectorIndex::vector(std::size_t position) const {
  return std::span<const float>(data_).subspan(position * dim_, dim_);
}

void VectorIndex::add(const std::string& doc_id, std::span<const double> v) {
  std::vector<float> f(v.size());
  double norm2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    norm2 += v[i] * v[i];
    f[i] = static_cast<float>(v[i]);
  }
  if (v.size() == dim_ && std::fabs(std::sqrt(norm2) - 1.0) > kUnitNormTolerance) {
    throw DataError("index_add: vector for '" + doc_id + "' is not unit norm");
  }
  add(doc_id, std::span<const float>(f));
}

void VectorIndex::add(const std::string& doc_id, std::span<const float> v) {
  if (v.size() != dim_) {
    throw DataError("index_add: dimension " + std::to_string(v.size()) + " != index dimension " + std::to_string(dim_));
  }
  double norm2 = 0.0;
  for (float x : v) norm2 += static_cast<double>(x) * static_cast<double>(x);
  if (!std::isfinite(norm2) || std::fabs(std::sqrt(norm2) - 1.0) > kUnitNormTolerance) {
    throw DataError("index_add: vector for '" + doc_id + "' is not unit norm");
  }
  std::unique_lock lock(mutex_);
  if (by_id_.contains(doc_id)) throw DataError("index_add: duplicate doc id '" + doc_id + "'");
  by_id_.emplace(doc_id, ids_.size());
  ids_.push_back(doc_id);
  data_.insert(data_.end(), v.begin(), v.end());
  if (mode_ == IndexMode::int8) codes_.push_back(quantize_int8(v));
}

std::vector<Hit> VectorIndex::rank(std::vector<double> scores, std::size_t k,
                                   const std::vector<std::size_t>* positions) const {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto pos = [&](std::size_t i) { return positions ? (*positions)[i] : i; };
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return pos(a) < pos(b);
  };
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<Hit> hits;
  hits.reserve(k);
  for (std::size_t r = 0; r < k; ++r) hits.push_back({ids_[pos(order[r])], scores[order[r]], pos(order[r])});
  return hits;
}

namespace {

double dot(std::span<const double> q, std::span<const float> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * static_cast<double>(v[i]);
  return s;
}

double quantized_dot(std::span<const double> q, const QuantizedVector& c) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * static_cast<double>(c.codes[i]);
  return s * static_cast<double>(c.scale);
}

}  // namespace

std::vector<Hit> VectorIndex::quantized_candidates(std::span<const double> query, std::size_t n) const {
  if (mode_ != IndexMode::int8) throw ConfigError("quantized_candidates: index is not int8");
  if (query.size() != dim_) throw DataError("search: query dimension mismatch");
  std::shared_lock lock(mutex_);
  std::vector<double> scores(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) scores[i] = quantized_dot(query, codes_[i]);
  return rank(std::move(scores), n, nullptr);
}

RetrievalResult VectorIndex::search(std::span<const double> query, std::size_t k, bool rerank,
                                    const std::string& query_id) const {
  if (k == 0) throw ConfigError("search: k must be at least 1");
  if (query.size() != dim_) throw DataError("search: query dimension mismatch");
  RetrievalResult result{query_id, {}};
  if (mode_ == IndexMode::int8) {
    std::vector<Hit> pool = quantized_candidates(query, rerank ? kRerankFactor * k : k);
    if (pool.empty()) throw DataError("search: index is empty");
    if (!rerank) {
      result.hits = std::move(pool);
      return result;
    }
    std::shared_lock lock(mutex_);
    std::vector<double> scores;
    std::vector<std::size_t> positions;
    for (const Hit& h : pool) {
      positions.push_back(h.position);
      scores.push_back(dot(query, vector(h.position)));
    }
    result.hits = rank(std::move(scores), k, &positions);
    return result;
  }
  std::shared_lock lock(mutex_);
  if (ids_.empty()) throw DataError("search: index is empty");
  std::vector<double> scores(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) scores[i] = dot(query, vector(i));
  result.hits = rank(std::move(scores), k, nullptr);
  return result;
}

namespace {

constexpr char kMagic[8] = {'H', 'E', 'M', 'B', 'I', 'D', 'X', '\0'};

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "index files are little-endian");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("index file truncated");
  return v;
}

}  // namespace

void VectorIndex::save(const std::filesystem::path& path) const {
  std::shared_lock lock(mutex_);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write index " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kIndexFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  put<std::uint64_t>(out, ids_.size());
  put<std::uint8_t>(out, static_cast<std::uint8_t>(mode_));
  for (const auto& id : ids_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  out.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size() * sizeof(float)));
  if (mode_ == IndexMode::int8) {
    for (const auto& q : codes_) {
      put<float>(out, q.scale);
      out.write(reinterpret_cast<const char*>(q.codes.data()), static_cast<std::streamsize>(q.codes.size()));
    }
  }
  if (!out) throw DataError("failed writing index " + path.string());
}

std::unique_ptr<VectorIndex> VectorIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read index " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
    throw DataError("not an index file: " + path.string());
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kIndexFileVersion) throw DataError("unsupported index version " + std::to_string(version));
  const auto dim = get<std::uint32_t>(in);
  const auto count = get<std::uint64_t>(in);
  const auto mode = get<std::uint8_t>(in);
  if (mode > 1) throw DataError("index file: bad mode");
  auto index = std::make_unique<VectorIndex>(dim, static_cast<IndexMode>(mode));
  std::vector<std::string> ids(count);
  for (auto& id : ids) {
    const auto n = get<std::uint32_t>(in);
    id.resize(n);
    if (!in.read(id.data(), n)) throw DataError("index file truncated");
  }
  std::vector<float> block(count * dim);
  if (!in.read(reinterpret_cast<char*>(block.data()), static_cast<std::streamsize>(block.size() * sizeof(float)))) {
    throw DataError("index file truncated");
  }
  for (std::size_t i = 0; i < count; ++i) {
    index->add(ids[i], std::span<const float>(block).subspan(i * dim, dim));
  }
  if (index->mode_ == IndexMode::int8) {
    for (std::size_t i = 0; i < count; ++i) {
      QuantizedVector q;
      q.scale = get<float>(in);
      q.codes.resize(dim);
      if (!in.read(reinterpret_cast<char*>(q.codes.data()), dim)) throw DataError("index file truncated");
      index->codes_[i] = std::move(q);
    }
  }
  return index;
}

}  // namespace hembed::retrieval
