#include "hembed/corpus.hpp"

#include <algorithm>
#include <regex>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "hembed/errors.hpp"
#include "hembed/text.hpp"

namespace hembed::corpus {

using text::to_u32;
using text::to_utf8;

SubstitutionTable default_script_table() {
  SubstitutionTable t;
  // zero-width joiner / non-joiner carry no meaning after normalization
  t.emplace_back(to_utf8(U"\u200C"), "");
  t.emplace_back(to_utf8(U"\u200D"), "");
  // doubled nukta
  t.emplace_back(to_utf8(U"\u093C\u093C"), to_utf8(U"\u093C"));
  // precomposed nukta letters are NFC composition exclusions; spell them as base + nukta
  const char32_t nukta_letters[] = {0x0958, 0x0959, 0x095A, 0x095B, 0x095C, 0x095D, 0x095E, 0x095F};
  const char32_t nukta_bases[] = {0x0915, 0x0916, 0x0917, 0x091C, 0x0921, 0x0922, 0x092B, 0x092F};
  for (std::size_t i = 0; i < std::size(nukta_letters); ++i) {
    t.emplace_back(to_utf8(std::u32string(1, nukta_letters[i])),
                   to_utf8(std::u32string{nukta_bases[i], 0x093C}));
  }
  // Devanagari digits fold to ASCII so number replacement sees them
  for (char32_t d = 0; d < 10; ++d) {
    t.emplace_back(to_utf8(std::u32string(1, 0x0966 + d)), std::string(1, static_cast<char>('0' + d)));
  }
  return t;
}

std::vector<UnicodeRange> default_allowed_ranges() {
  return {
      {0x0900, 0x097F},  // Devanagari
      {0xA8E0, 0xA8FF},  // Devanagari Extended
      {0x1CD0, 0x1CFF},  // Vedic Extensions
      {U'0', U'9'},
      {0x21, 0x2F},
      {0x3A, 0x40},
      {0x5B, 0x60},
      {0x7B, 0x7E},
      {0x2000, 0x206F},  // General Punctuation
  };
}

std::string apply_substitutions(std::string s, const SubstitutionTable& table) {
  for (int pass = 0; pass < 8; ++pass) {
    bool changed = false;
    for (const auto& [from, to] : table) {
      if (from.empty()) continue;
      std::size_t pos = 0;
      while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
        changed = true;
      }
    }
    if (!changed) break;
  }
  return s;
}

namespace {

std::u32string collapse_runs(const std::u32string& s, std::size_t max_run) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t run = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    run = (i > 0 && s[i] == s[i - 1]) ? run + 1 : 1;
    if (run <= max_run) out.push_back(s[i]);
  }
  return out;
}

// Horizontal runs become one space; runs with one newline become "\n", with
// two or more "\n\n". Leading and trailing whitespace is dropped.
std::u32string normalize_whitespace(const std::u32string& s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (!text::is_space(s[i])) {
      out.push_back(s[i++]);
      continue;
    }
    std::size_t newlines = 0;
    while (i < s.size() && text::is_space(s[i])) {
      if (s[i] == U'\n') ++newlines;
      ++i;
    }
    if (out.empty() || i == s.size()) continue;
    if (newlines == 0) {
      out.push_back(U' ');
    } else if (newlines == 1) {
      out.push_back(U'\n');
    } else {
      out.append(U"\n\n");
    }
  }
  return out;
}

std::u32string strip(const std::u32string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && text::is_space(s[b])) ++b;
  while (e > b && text::is_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

const std::regex& url_regex() {
  static const std::regex re(R"((https?://|www\.)[^\s]+)", std::regex::icase);
  return re;
}

const std::regex& number_regex() {
  static const std::regex re(R"([0-9]+(?:[.,:/][0-9]+)*)");
  return re;
}

}  // namespace

std::string clean_text(std::string_view input, const CleaningConfig& config) {
  std::string t = to_utf8(strip(to_u32(input)));
  t = std::regex_replace(t, url_regex(), config.url_placeholder);
  t = text::nfc(t);
  t = apply_substitutions(std::move(t), config.script_table);
  // the table may leave sequences that are no longer composed
  t = text::nfc(t);
  std::u32string cps = collapse_runs(to_u32(t), config.max_run);
  t = std::regex_replace(to_utf8(cps), number_regex(), config.num_placeholder);
  return to_utf8(normalize_whitespace(to_u32(t)));
}

ScriptDecision filter_script(std::string_view input, std::span<const UnicodeRange> allowed_ranges,
                             double min_fraction) {
  if (allowed_ranges.empty()) throw ConfigError("filter_script: allowed ranges must be nonempty");
  std::string stripped(input);
  for (std::string_view ph : {kUrlPlaceholder, kNumPlaceholder}) {
    std::size_t pos = 0;
    while ((pos = stripped.find(ph, pos)) != std::string::npos) stripped.replace(pos, ph.size(), " ");
  }
  std::size_t counted = 0;
  std::size_t inside = 0;
  for (char32_t c : to_u32(stripped)) {
    if (text::is_space(c)) continue;
    ++counted;
    if (std::any_of(allowed_ranges.begin(), allowed_ranges.end(),
                    [c](const UnicodeRange& r) { return r.contains(c); })) {
      ++inside;
    }
  }
  ScriptDecision d;
  if (counted == 0) {
    d.reason = "empty";
    return d;
  }
  d.fraction = static_cast<double>(inside) / static_cast<double>(counted);
  d.keep = d.fraction >= min_fraction;
  if (!d.keep) d.reason = "script";
  return d;
}

std::vector<std::uint64_t> shingles(std::string_view input) {
  constexpr std::uint64_t kPad = 0x1FFFFF;  // not a valid code point
  const std::u32string cps = to_u32(input);
  std::vector<std::uint64_t> out;
  if (cps.empty()) return out;
  if (cps.size() < 3) {
    std::uint64_t k = 0;
    for (std::size_t i = 0; i < 3; ++i) k = (k << 21) | (i < cps.size() ? cps[i] : kPad);
    out.push_back(k);
    return out;
  }
  out.reserve(cps.size() - 2);
  for (std::size_t i = 0; i + 3 <= cps.size(); ++i) {
    out.push_back((std::uint64_t{cps[i]} << 42) | (std::uint64_t{cps[i + 1]} << 21) | cps[i + 2]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

namespace {

// Per-record verdict: empty string = survivor, otherwise rejection reason.
std::vector<std::string> dedup_verdicts(std::span<const TextRecord> records, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ConfigError("near-duplicate threshold must be in (0, 1]");
  }
  std::vector<std::string> verdict(records.size());
  std::unordered_set<std::string_view> seen;
  std::vector<std::vector<std::uint64_t>> kept_shingles;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> postings;

  for (std::size_t r = 0; r < records.size(); ++r) {
    const std::string& t = records[r].text;
    if (!seen.insert(t).second) {
      verdict[r] = "duplicate";
      continue;
    }
    auto sh = shingles(t);
    std::unordered_map<std::size_t, std::size_t> overlap;
    for (std::uint64_t s : sh) {
      auto it = postings.find(s);
      if (it == postings.end()) continue;
      for (std::size_t k : it->second) ++overlap[k];
    }
    bool near = false;
    for (const auto& [k, inter] : overlap) {
      const double j = static_cast<double>(inter) /
                       static_cast<double>(sh.size() + kept_shingles[k].size() - inter);
      if (j >= threshold) {
        near = true;
        break;
      }
    }
    if (near) {
      verdict[r] = "near_duplicate";
      continue;
    }
    const std::size_t idx = kept_shingles.size();
    for (std::uint64_t s : sh) postings[s].push_back(idx);
    kept_shingles.push_back(std::move(sh));
  }
  return verdict;
}

void check_bounds(std::size_t min_chars, std::size_t max_chars) {
  if (min_chars > max_chars) throw ConfigError("length bounds: min_chars > max_chars");
}

std::string length_verdict(const std::string& t, std::size_t min_chars, std::size_t max_chars) {
  const std::size_t n = text::length(t);
  if (n < min_chars) return "too_short";
  if (n > max_chars) return "too_long";
  return {};
}

}  // namespace

std::vector<TextRecord> deduplicate(std::vector<TextRecord> records, double near_dup_threshold) {
  const auto verdict = dedup_verdicts(records, near_dup_threshold);
  std::vector<TextRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (verdict[i].empty()) out.push_back(std::move(records[i]));
  }
  return out;
}

std::vector<TextRecord> length_filter(std::vector<TextRecord> records, std::size_t min_chars,
                                      std::size_t max_chars) {
  check_bounds(min_chars, max_chars);
  std::vector<TextRecord> out;
  for (auto& r : records) {
    if (length_verdict(r.text, min_chars, max_chars).empty()) out.push_back(std::move(r));
  }
  return out;
}

CorpusStats corpus_stats(std::span<const TextRecord> records, std::size_t bucket_width) {
  if (records.empty()) throw DataError("empty corpus");
  if (bucket_width == 0) throw ConfigError("bucket width must be positive");
  CorpusStats st;
  st.records = records.size();
  st.bucket_width = bucket_width;
  std::unordered_set<char32_t> chars;
  std::unordered_set<std::u32string> words;
  for (const auto& r : records) {
    const std::u32string cps = to_u32(r.text);
    st.total_chars += cps.size();
    chars.insert(cps.begin(), cps.end());
    std::size_t i = 0;
    while (i < cps.size()) {
      while (i < cps.size() && text::is_space(cps[i])) ++i;
      const std::size_t b = i;
      while (i < cps.size() && !text::is_space(cps[i])) ++i;
      if (i > b) {
        ++st.total_words;
        words.insert(cps.substr(b, i - b));
      }
    }
    ++st.length_histogram[(cps.size() / bucket_width) * bucket_width];
  }
  if (st.total_chars == 0 || st.total_words == 0) throw DataError("corpus has no words");
  st.unique_chars = chars.size();
  st.unique_words = words.size();
  st.char_ratio = static_cast<double>(st.unique_chars) / static_cast<double>(st.total_chars);
  st.word_ratio = static_cast<double>(st.unique_words) / static_cast<double>(st.total_words);
  return st;
}

namespace {

bool is_terminator(char32_t c) {
  return c == U'।' || c == U'॥' || c == U'?' || c == U'!' || c == U'.';
}

struct Span {
  std::size_t begin;
  std::size_t end;
};

std::vector<Span> split_sentences(const std::u32string& s) {
  std::vector<Span> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && text::is_space(s[i])) ++i;
    if (i == s.size()) break;
    const std::size_t b = i;
    std::size_t last_visible = i;
    while (i < s.size()) {
      if (is_terminator(s[i])) {
        while (i < s.size() && is_terminator(s[i])) ++i;
        last_visible = i;
        break;
      }
      if (text::is_space(s[i])) {
        // blank line = paragraph break
        std::size_t j = i;
        std::size_t newlines = 0;
        while (j < s.size() && text::is_space(s[j])) newlines += (s[j++] == U'\n');
        if (newlines >= 2 || j == s.size()) {
          i = j;
          break;
        }
        i = j;
        continue;
      }
      ++i;
      last_visible = i;
    }
    out.push_back({b, last_visible});
  }
  return out;
}

}  // namespace

std::vector<Chunk> chunk_document(std::string_view doc_id, std::string_view input,
                                  std::size_t max_chunk_chars) {
  if (max_chunk_chars == 0) throw ConfigError("max_chunk_chars must be positive");
  const std::u32string s = to_u32(input);
  std::vector<Chunk> out;
  auto emit = [&](std::size_t b, std::size_t e, bool hard) {
    Chunk c;
    c.doc_id = std::string(doc_id);
    c.ordinal = out.size();
    c.text = to_utf8(std::u32string_view(s).substr(b, e - b));
    c.begin = b;
    c.end = e;
    c.hard_split = hard;
    out.push_back(std::move(c));
  };

  std::optional<Span> open;
  for (const Span& sent : split_sentences(s)) {
    if (sent.end - sent.begin > max_chunk_chars) {
      if (open) emit(open->begin, open->end, false);
      open.reset();
      for (std::size_t b = sent.begin; b < sent.end; b += max_chunk_chars) {
        emit(b, std::min(sent.end, b + max_chunk_chars), true);
      }
      continue;
    }
    if (open && sent.end - open->begin <= max_chunk_chars) {
      open->end = sent.end;
    } else {
      if (open) emit(open->begin, open->end, false);
      open = sent;
    }
  }
  if (open) emit(open->begin, open->end, false);
  return out;
}

std::vector<TextRecord> run_pipeline(std::vector<TextRecord> records, const PipelineOptions& options,
                                     CleanReport& report) {
  check_bounds(options.min_chars, options.max_chars);
  std::vector<std::regex> blocklist;
  for (const auto& pattern : options.blocklist) {
    try {
      blocklist.emplace_back(pattern);
    } catch (const std::regex_error& e) {
      throw ConfigError("invalid blocklist pattern '" + pattern + "': " + e.what());
    }
  }
  report.input += records.size();

  auto reject = [&](TextRecord& r, std::string reason) {
    r.status = RecordStatus::rejected;
    ++report.rejected[reason];
    r.reject_reason = std::move(reason);
  };

  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    r.text = clean_text(r.text, options.cleaning);
    r.status = RecordStatus::cleaned;
    r.reject_reason.clear();
    if (std::any_of(blocklist.begin(), blocklist.end(),
                    [&](const std::regex& re) { return std::regex_search(r.text, re); })) {
      reject(r, "blocklist");
      continue;
    }
    const auto script = filter_script(r.text, options.allowed_ranges, options.script_min_fraction);
    if (!script.keep) {
      reject(r, script.reason);
      continue;
    }
    if (auto v = length_verdict(r.text, options.min_chars, options.max_chars); !v.empty()) {
      reject(r, v);
      continue;
    }
    alive.push_back(i);
  }

  std::vector<TextRecord> survivors;
  survivors.reserve(alive.size());
  for (std::size_t i : alive) survivors.push_back(records[i]);
  const auto verdict = dedup_verdicts(survivors, options.near_dup_threshold);
  for (std::size_t k = 0; k < alive.size(); ++k) {
    if (!verdict[k].empty()) {
      reject(records[alive[k]], verdict[k]);
    } else {
      ++report.kept;
    }
  }
  return records;
}

std::string_view status_name(RecordStatus s) {
  switch (s) {
    case RecordStatus::raw: return "raw";
    case RecordStatus::cleaned: return "cleaned";
    case RecordStatus::rejected: return "rejected";
  }
  return "raw";
}

std::string to_jsonl(const TextRecord& record) {
  nlohmann::ordered_json j;
  j["id"] = record.id;
  j["text"] = record.text;
  j["source"] = record.source;
  std::string status(status_name(record.status));
  if (record.status == RecordStatus::rejected) status += ":" + record.reject_reason;
  j["status"] = status;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::optional<TextRecord> parse_jsonl(std::string_view line) {
  auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto text = j.find("text");
  if (text == j.end() || !text->is_string()) return std::nullopt;
  TextRecord r;
  r.text = text->get<std::string>();
  if (auto it = j.find("id"); it != j.end()) {
    if (it->is_string()) {
      r.id = it->get<std::string>();
    } else if (it->is_number_integer()) {
      r.id = std::to_string(it->get<long long>());
    } else {
      return std::nullopt;
    }
  }
  if (auto it = j.find("source"); it != j.end() && it->is_string()) r.source = it->get<std::string>();
  if (auto it = j.find("status"); it != j.end() && it->is_string()) {
    const auto s = it->get<std::string>();
    if (s == "cleaned") {
      r.status = RecordStatus::cleaned;
    } else if (s.rfind("rejected", 0) == 0) {
      r.status = RecordStatus::rejected;
      r.reject_reason = s.size() > 9 ? s.substr(9) : "";
    }
  }
  return r;
}

}  // namespace hembed::corpus
