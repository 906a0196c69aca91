#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ofit::tok {

inline constexpr int kPad = 256;
inline constexpr int kBos = 257;
inline constexpr int kEos = 258;
inline constexpr int kSep = 259;
inline constexpr int kVocabSize = 260;

// Byte-level encoding: each UTF-8 byte maps to its value. No specials.
std::vector<int> encode(std::string_view text);

struct Decoded {
  std::string text;
  // True when the byte stream was not valid UTF-8 and U+FFFD was
  // substituted for the offending bytes.
  bool replaced = false;
};

// Inverse of encode. Throws std::invalid_argument on any id outside [0, 256).
Decoded decode(std::span<const int> ids);

struct Framed {
  std::vector<int> ids;
  std::vector<int> loss_mask;
};

// [BOS] prompt [SEP] completion [EOS], with the mask set on the completion
// tokens and the EOS.
Framed frame(std::span<const int> prompt, std::span<const int> completion);

}  // namespace ofit::tok
