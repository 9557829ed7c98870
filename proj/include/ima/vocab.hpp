#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace ima {

// Character-level target vocabulary. Ids 0..3 are reserved; real symbols
// follow in sorted order.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecialIds = 4;

// Sorted unique characters over all texts.
inline std::string build_symbols(std::span<const std::string> texts) {
  std::set<char> chars;
  for (const std::string& t : texts) chars.insert(t.begin(), t.end());
  return std::string(chars.begin(), chars.end());
}

inline int symbol_id(char c, const std::string& symbols) {
  const auto it = std::lower_bound(symbols.begin(), symbols.end(), c);
  if (it == symbols.end() || *it != c) return kUnkId;
  return kNumSpecialIds + static_cast<int>(it - symbols.begin());
}

// BOS-prefixed, EOS-terminated id sequence.
inline std::vector<int> encode_chars(const std::string& text, const std::string& symbols) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBosId);
  for (const char c : text) ids.push_back(symbol_id(c, symbols));
  ids.push_back(kEosId);
  return ids;
}

// Renders symbol ids back to text. PAD/BOS are stripped, EOS terminates,
// UNK renders as '?'.
inline std::string decode_ids(std::span<const int> ids, const std::string& symbols) {
  std::string out;
  for (const int id : ids) {
    if (id == kPadId || id == kBosId) continue;
    if (id == kEosId) break;
    if (id == kUnkId || id < 0 || static_cast<std::size_t>(id - kNumSpecialIds) >= symbols.size()) {
      out.push_back('?');
      continue;
    }
    out.push_back(symbols[static_cast<std::size_t>(id - kNumSpecialIds)]);
  }
  return out;
}

}  // namespace ima
