#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace hembed::text {

// Invalid UTF-8 sequences decode to U+FFFD.
std::u32string to_u32(std::string_view utf8);
std::string to_utf8(std::u32string_view cps);
void append_utf8(std::string& out, char32_t cp);

// Number of code points.
std::size_t length(std::string_view utf8);

std::string nfc(std::string_view utf8);
bool is_nfc(std::string_view utf8);

bool is_space(char32_t cp);

// 64-bit FNV-1a; stable across platforms and runs.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace hembed::text
