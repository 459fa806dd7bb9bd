#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hembed::corpus {

inline constexpr std::string_view kUrlPlaceholder = "<url>";
inline constexpr std::string_view kNumPlaceholder = "<num>";

enum class RecordStatus { raw, cleaned, rejected };

struct TextRecord {
  std::string id;
  std::string text;
  std::string source;
  RecordStatus status = RecordStatus::raw;
  std::string reject_reason;  // set iff status == rejected
};

// Ordered code-point substitutions applied after NFC. Applied to a fixpoint.
using SubstitutionTable = std::vector<std::pair<std::string, std::string>>;

// Devanagari nukta forms, zero-width joiners and Devanagari digits.
SubstitutionTable default_script_table();

std::string apply_substitutions(std::string s, const SubstitutionTable& table);

struct CleaningConfig {
  std::string url_placeholder{kUrlPlaceholder};
  std::string num_placeholder{kNumPlaceholder};
  std::size_t max_run = 3;
  SubstitutionTable script_table = default_script_table();
};

struct UnicodeRange {
  char32_t first;
  char32_t last;
  bool contains(char32_t c) const { return c >= first && c <= last; }
};

// Devanagari blocks plus ASCII digits/punctuation and general punctuation.
std::vector<UnicodeRange> default_allowed_ranges();

struct ScriptDecision {
  bool keep = false;
  std::string reason;  // empty when kept
  double fraction = 0.0;
};

struct CorpusStats {
  std::size_t records = 0;
  std::size_t total_chars = 0;
  std::size_t unique_chars = 0;
  std::size_t total_words = 0;
  std::size_t unique_words = 0;
  double char_ratio = 0.0;
  double word_ratio = 0.0;
  std::size_t bucket_width = 0;
  // bucket lower bound (in code points) -> record count
  std::map<std::size_t, std::size_t> length_histogram;
};

struct Chunk {
  std::string doc_id;
  std::size_t ordinal = 0;
  std::string text;
  // [begin, end) in code points of the source document
  std::size_t begin = 0;
  std::size_t end = 0;
  bool hard_split = false;
};

std::string clean_text(std::string_view text, const CleaningConfig& config = {});

// Placeholder literals are ignored when counting; so is whitespace.
ScriptDecision filter_script(std::string_view text, std::span<const UnicodeRange> allowed_ranges,
                             double min_fraction);

// Character 3-gram shingles packed losslessly into 64-bit keys, sorted and unique.
std::vector<std::uint64_t> shingles(std::string_view text);
double jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

// Exact duplicates first (first occurrence wins), then near duplicates of any
// earlier survivor with shingle Jaccard >= threshold.
std::vector<TextRecord> deduplicate(std::vector<TextRecord> records, double near_dup_threshold = 0.85);

std::vector<TextRecord> length_filter(std::vector<TextRecord> records, std::size_t min_chars,
                                      std::size_t max_chars);

CorpusStats corpus_stats(std::span<const TextRecord> records, std::size_t bucket_width = 100);

std::vector<Chunk> chunk_document(std::string_view doc_id, std::string_view text,
                                  std::size_t max_chunk_chars);

struct PipelineOptions {
  CleaningConfig cleaning;
  std::vector<UnicodeRange> allowed_ranges = default_allowed_ranges();
  double script_min_fraction = 0.8;
  std::size_t min_chars = 10;
  std::size_t max_chars = 2000;
  double near_dup_threshold = 0.85;
  std::vector<std::string> blocklist;  // ECMAScript regexes; matching records are rejected
};

struct CleanReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::size_t malformed_lines = 0;
  std::map<std::string, std::size_t> rejected;  // reason -> count
};

// clean -> blocklist -> script filter -> length filter -> dedup. Every input
// record is returned, in input order, with status cleaned or rejected.
std::vector<TextRecord> run_pipeline(std::vector<TextRecord> records, const PipelineOptions& options,
                                     CleanReport& report);

// JSON-lines {id, text, source, status}. Rejected status is "rejected:<reason>".
std::string to_jsonl(const TextRecord& record);
std::optional<TextRecord> parse_jsonl(std::string_view line);

std::string_view status_name(RecordStatus s);

}  // namespace hembed::corpus
