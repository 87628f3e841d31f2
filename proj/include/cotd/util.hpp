#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cotd {

inline constexpr std::string_view kVersion = "0.3.1";

// UTF-8 helpers. Invalid sequences decode to U+FFFD.
bool is_valid_utf8(std::string_view s);
std::vector<char32_t> decode_utf8(std::string_view s);
void append_utf8(std::string& out, char32_t cp);

std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);
bool iequals(std::string_view a, std::string_view b);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// 64-bit FNV-1a followed by a splitmix64 finalizer; stable across platforms.
std::uint64_t stable_hash64(std::string_view data, std::uint64_t seed = 0);

/// UTC timestamp, ISO-8601 with second precision.
std::string utc_timestamp();

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view data);

/// Whitespace-delimited tokens as views into `text`.
std::vector<std::string_view> whitespace_tokens(std::string_view text);

}  // namespace cotd

#include <random>

namespace cotd {

/// Uniform integer in [0, n) from raw engine output. Unlike the standard
/// distributions this is identical on every platform.
std::uint64_t bounded_random(std::mt19937_64& rng, std::uint64_t n);

/// Fisher-Yates shuffle driven by bounded_random.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[bounded_random(rng, i)]);
}

}  // namespace cotd
