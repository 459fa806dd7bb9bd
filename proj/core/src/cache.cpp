#include "hembed/cache.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>

#include "hembed/errors.hpp"
#include "hembed/text.hpp"

namespace hembed::cache {

namespace {
constexpr char kMagic[8] = {'H', 'E', 'M', 'B', 'V', 'E', 'C', '\0'};
static_assert(std::endian::native == std::endian::little, "cache files are little-endian");
}  // namespace

EmbeddingCache::EmbeddingCache(std::size_t capacity, std::filesystem::path disk_dir, std::string model_version,
                               Warn warn)
    : capacity_(capacity), dir_(std::move(disk_dir)), model_version_(std::move(model_version)), warn_(std::move(warn)) {
  if (capacity_ == 0) throw ConfigError("cache capacity must be at least 1");
  if (!warn_) warn_ = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  if (dir_.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec || !std::filesystem::is_directory(dir_)) {
    warn_("embedding cache directory " + dir_.string() + " unavailable; using memory only");
    return;
  }
  disk_ = true;
}

std::string EmbeddingCache::key(const std::string& text) const {
  std::string material = model_version_;
  material.push_back('\0');
  material += text;
  return text::hex64(text::fnv1a(material));
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mutex_);
  return map_.size();
}

bool EmbeddingCache::disk_enabled() const {
  std::lock_guard lock(mutex_);
  return disk_;
}

CacheStats EmbeddingCache::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

void EmbeddingCache::disable_disk(const std::string& why) {
  if (!disk_) return;
  disk_ = false;
  warn_("embedding cache disk level disabled: " + why);
}

void EmbeddingCache::insert_memory(const std::string& k, Entry e) {
  auto it = map_.find(k);
  if (it != map_.end()) {
    lru_.erase(it->second.second);
    map_.erase(it);
  }
  lru_.push_front(k);
  map_.emplace(k, std::make_pair(std::move(e), lru_.begin()));
  while (map_.size() > capacity_) {
    map_.erase(lru_.back());
    lru_.pop_back();
    ++stats_.evictions;
  }
}

std::optional<std::vector<double>> EmbeddingCache::read_disk(const std::string& k, const std::string& text) {
  if (!disk_) return std::nullopt;
  std::ifstream in(dir_ / (k + ".vec"), std::ios::binary);
  if (!in) return std::nullopt;
  char magic[sizeof kMagic];
  std::uint64_t text_len = 0, dim = 0;
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) return std::nullopt;
  if (!in.read(reinterpret_cast<char*>(&text_len), sizeof text_len) || text_len != text.size()) return std::nullopt;
  std::string stored(text_len, '\0');
  if (!in.read(stored.data(), static_cast<std::streamsize>(text_len)) || stored != text) return std::nullopt;
  if (!in.read(reinterpret_cast<char*>(&dim), sizeof dim) || dim > (1u << 20)) return std::nullopt;
  std::vector<double> v(dim);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(dim * sizeof(double)))) return std::nullopt;
  return v;
}

void EmbeddingCache::write_disk(const std::string& k, const Entry& e) {
  if (!disk_) return;
  const auto final_path = dir_ / (k + ".vec");
  const auto tmp = dir_ / (k + ".vec.tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    const std::uint64_t text_len = e.text.size();
    const std::uint64_t dim = e.vector.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&text_len), sizeof text_len);
    out.write(e.text.data(), static_cast<std::streamsize>(text_len));
    out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
    out.write(reinterpret_cast<const char*>(e.vector.data()), static_cast<std::streamsize>(dim * sizeof(double)));
    if (!out) {
      disable_disk("cannot write " + tmp.string());
      return;
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) disable_disk("cannot write " + final_path.string() + ": " + ec.message());
}

Lookup EmbeddingCache::get(const std::string& text) {
  std::lock_guard lock(mutex_);
  const std::string k = key(text);
  auto it = map_.find(k);
  if (it != map_.end() && it->second.first.text == text) {
    lru_.splice(lru_.begin(), lru_, it->second.second);
    ++stats_.memory_hits;
    return {Level::memory, it->second.first.vector};
  }
  if (auto v = read_disk(k, text)) {
    insert_memory(k, Entry{text, *v});
    ++stats_.disk_hits;
    return {Level::disk, std::move(v)};
  }
  ++stats_.misses;
  return {};
}

void EmbeddingCache::put(const std::string& text, const std::vector<double>& vector) {
  std::lock_guard lock(mutex_);
  const std::string k = key(text);
  Entry e{text, vector};
  write_disk(k, e);
  insert_memory(k, std::move(e));
}

}  // namespace hembed::cache
