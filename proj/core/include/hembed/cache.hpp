#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace hembed::cache {

enum class Level { miss, memory, disk };

struct Lookup {
  Level level = Level::miss;
  std::optional<std::vector<double>> vector;
};

struct CacheStats {
  std::size_t memory_hits = 0;
  std::size_t disk_hits = 0;
  std::size_t misses = 0;
  std::size_t evictions = 0;
};

// Level 1: strict LRU in memory. Level 2: one file per entry under disk_dir,
// storing the text next to the vector so hash collisions are detected.
// get() promotes disk hits to memory. Both levels are keyed by
// hash(model_version, text). All operations are serialized by one mutex.
class EmbeddingCache {
 public:
  using Warn = std::function<void(const std::string&)>;

  // capacity 0 throws ConfigError. An empty disk_dir disables level 2; an
  // unusable one degrades to memory-only and reports through warn.
  EmbeddingCache(std::size_t capacity, std::filesystem::path disk_dir, std::string model_version, Warn warn = {});

  Lookup get(const std::string& text);
  void put(const std::string& text, const std::vector<double>& vector);

  std::size_t size() const;
  bool disk_enabled() const;
  CacheStats stats() const;
  std::string key(const std::string& text) const;

 private:
  struct Entry {
    std::string text;
    std::vector<double> vector;
  };
  void insert_memory(const std::string& k, Entry e);
  std::optional<std::vector<double>> read_disk(const std::string& k, const std::string& text);
  void write_disk(const std::string& k, const Entry& e);
  void disable_disk(const std::string& why);

  std::size_t capacity_;
  std::filesystem::path dir_;
  std::string model_version_;
  Warn warn_;
  bool disk_ = false;
  std::list<std::string> lru_;  // front = most recent
  std::unordered_map<std::string, std::pair<Entry, std::list<std::string>::iterator>> map_;
  CacheStats stats_;
  mutable std::mutex mutex_;
};

}  // namespace hembed::cache
