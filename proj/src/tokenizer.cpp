#include "ofit/tokenizer.hpp"

#include <stdexcept>

namespace ofit::tok {

namespace {

// Length of the UTF-8 sequence starting at s[i], or 0 if it is malformed.
std::size_t utf8_sequence_length(const std::string& s, std::size_t i) {
  const auto lead = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  unsigned min_cp = 0;
  unsigned cp = 0;
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) {
    len = 2, cp = lead & 0x1F, min_cp = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3, cp = lead & 0x0F, min_cp = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4, cp = lead & 0x07, min_cp = 0x10000;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto c = static_cast<unsigned char>(s[i + k]);
    if ((c & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

}  // namespace

std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

Decoded decode(std::span<const int> ids) {
  std::string raw;
  raw.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= 256) {
      throw std::invalid_argument(id >= kPad && id < kVocabSize ? "special token in decode"
                                                                 : "token id out of range in decode");
    }
    raw.push_back(static_cast<char>(id));
  }

  Decoded out;
  out.text.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size();) {
    const std::size_t len = utf8_sequence_length(raw, i);
    if (len == 0) {
      out.text += "\xEF\xBF\xBD";
      out.replaced = true;
      ++i;
    } else {
      out.text.append(raw, i, len);
      i += len;
    }
  }
  return out;
}

Framed frame(std::span<const int> prompt, std::span<const int> completion) {
  Framed f;
  f.ids.reserve(prompt.size() + completion.size() + 3);
  f.ids.push_back(kBos);
  f.ids.insert(f.ids.end(), prompt.begin(), prompt.end());
  f.ids.push_back(kSep);
  f.ids.insert(f.ids.end(), completion.begin(), completion.end());
  f.ids.push_back(kEos);

  f.loss_mask.assign(f.ids.size(), 0);
  for (std::size_t i = prompt.size() + 2; i < f.ids.size(); ++i) f.loss_mask[i] = 1;
  return f;
}

}  // namespace ofit::tok
