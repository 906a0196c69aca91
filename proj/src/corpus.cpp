#include "ofit/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "ofit/errors.hpp"

namespace ofit::corpus {

using nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into line/column for the message.
    const std::size_t offset = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const std::size_t line = 1 + std::count(text.begin(), text.begin() + offset, '\n');
    const std::size_t line_start = text.rfind('\n', offset == 0 ? 0 : offset - 1);
    const std::size_t col = line_start == std::string::npos ? offset + 1 : offset - line_start;
    const std::size_t begin = line_start == std::string::npos ? 0 : line_start + 1;
    const std::size_t end = std::min(text.find('\n', begin), text.size());
    std::ostringstream msg;
    msg << path.string() << ":" << line << ":" << col << ": malformed JSON (" << e.what() << ")\n  "
        << text.substr(begin, std::min<std::size_t>(end - begin, 120));
    throw ParseError(msg.str());
  }
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

template <class Fn>
auto with_context(const std::filesystem::path& path, std::size_t index, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": entry " + std::to_string(index) + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": entry " + std::to_string(index) + ": " + e.what());
  }
}

std::vector<std::string> string_list(const json& j, const char* key) {
  const json& arr = j.at(key);
  if (!arr.is_array()) throw ValidationError(std::string("'") + key + "' must be an array");
  std::vector<std::string> out;
  for (const auto& v : arr) out.push_back(v.get<std::string>());
  return out;
}

}  // namespace

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<Outfit> load_outfits(const std::filesystem::path& path, std::optional<Split> split) {
  if (!split) {
    const std::string stem = path.stem().string();
    const bool train = stem.find("train") != std::string::npos;
    const bool test = stem.find("test") != std::string::npos;
    if (train == test) {
      throw ValidationError(path.string() + ": cannot infer split from file name; pass it explicitly");
    }
    split = train ? Split::train : Split::test;
  }

  const json root = parse_json_file(path);
  if (!root.is_array()) throw ParseError(path.string() + ": expected a JSON array of outfits");

  std::vector<Outfit> outfits;
  std::unordered_set<std::string> seen;
  std::unordered_map<std::string, std::string> category_of;
  for (std::size_t n = 0; n < root.size(); ++n) {
    outfits.push_back(with_context(path, n, [&] {
      const json& entry = root[n];
      Outfit outfit;
      outfit.outfit_id = entry.at("set_id").get<std::string>();
      outfit.split = *split;
      if (outfit.outfit_id.empty()) throw ValidationError("empty set_id");
      std::unordered_set<std::string> in_outfit;
      for (const auto& item : entry.at("items")) {
        auto id = item.at("item_id").get<std::string>();
        auto category = item.at("category").get<std::string>();
        if (id.empty()) throw ValidationError("empty item_id in outfit " + outfit.outfit_id);
        if (!in_outfit.insert(id).second) {
          throw ValidationError("duplicate item " + id + " in outfit " + outfit.outfit_id);
        }
        auto [it, fresh] = category_of.emplace(id, category);
        if (!fresh && it->second != category) {
          throw ValidationError("item " + id + " listed with categories '" + it->second + "' and '" +
                                category + "'");
        }
        outfit.item_ids.push_back(std::move(id));
        outfit.categories.push_back(std::move(category));
      }
      if (outfit.item_ids.size() < 2) {
        throw ValidationError("outfit " + outfit.outfit_id + " has fewer than 2 items");
      }
      return outfit;
    }));
    if (!seen.insert(outfits.back().outfit_id).second) {
      throw ValidationError(path.string() + ": duplicate outfit_id " + outfits.back().outfit_id);
    }
  }
  return outfits;
}

CaptionMap load_captions(const std::filesystem::path& path) {
  const json root = parse_json_file(path);
  if (!root.is_object()) throw ParseError(path.string() + ": expected a JSON object of captions");
  CaptionMap captions;
  std::vector<std::string> empty;
  for (const auto& [id, value] : root.items()) {
    if (!value.is_string()) throw ParseError(path.string() + ": caption for " + id + " is not a string");
    std::string caption = trim(value.get<std::string>());
    if (caption.empty()) empty.push_back(id);
    captions.emplace(id, std::move(caption));
  }
  if (!empty.empty()) {
    std::sort(empty.begin(), empty.end());
    throw ValidationError(path.string() + ": empty caption for items: " + join(empty, ", "));
  }
  return captions;
}

CaptionMap load_captions(const std::filesystem::path& path, std::span<const Outfit> outfits) {
  CaptionMap captions = load_captions(path);
  require_captions(captions, outfits, {}, {});
  return captions;
}

void validate(const FitbExample& example) {
  if (example.candidates.size() != 4) {
    throw ValidationError("expected 4 candidates, got " + std::to_string(example.candidates.size()));
  }
  if (example.answer_index < 0 || example.answer_index >= 4) {
    throw ValidationError("answer_index " + std::to_string(example.answer_index) +
                          " out of range [0, 4)");
  }
  if (example.question_items.empty()) throw ValidationError("empty question");
  const std::set<std::string> question(example.question_items.begin(), example.question_items.end());
  for (const auto& c : example.candidates) {
    if (question.count(c)) throw ValidationError("candidate " + c + " also appears in the question");
  }
}

void validate(const CpExample& example) {
  if (example.item_ids.size() < 2) throw ValidationError("compatibility example needs at least 2 items");
  if (example.label != 0 && example.label != 1) {
    throw ValidationError("label must be 0 or 1, got " + std::to_string(example.label));
  }
}

std::vector<FitbExample> load_fitb(const std::filesystem::path& path) {
  const json root = parse_json_file(path);
  if (!root.is_array()) throw ParseError(path.string() + ": expected a JSON array of questions");
  std::vector<FitbExample> out;
  for (std::size_t n = 0; n < root.size(); ++n) {
    out.push_back(with_context(path, n, [&] {
      FitbExample ex;
      ex.question_items = string_list(root[n], "question");
      ex.candidates = string_list(root[n], "answers");
      ex.answer_index = root[n].at("answer_index").get<int>();
      validate(ex);
      return ex;
    }));
  }
  return out;
}

std::vector<CpExample> load_cp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<CpExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::istringstream ss(line);
    std::string label;
    ss >> label;
    if (label != "0" && label != "1") {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                       label + "'");
    }
    CpExample ex;
    ex.label = label == "1" ? 1 : 0;
    for (std::string id; ss >> id;) ex.item_ids.push_back(id);
    try {
      validate(ex);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void require_captions(const CaptionMap& captions, std::span<const std::string> ids) {
  std::set<std::string> missing;
  for (const auto& id : ids) {
    if (!captions.count(id)) missing.insert(id);
  }
  if (!missing.empty()) {
    throw ValidationError("no caption for items: " +
                          join(std::vector<std::string>(missing.begin(), missing.end()), ", "));
  }
}

void require_captions(const CaptionMap& captions, std::span<const Outfit> outfits,
                      std::span<const FitbExample> fitb, std::span<const CpExample> cp) {
  std::vector<std::string> ids;
  for (const auto& o : outfits) ids.insert(ids.end(), o.item_ids.begin(), o.item_ids.end());
  for (const auto& f : fitb) {
    ids.insert(ids.end(), f.question_items.begin(), f.question_items.end());
    ids.insert(ids.end(), f.candidates.begin(), f.candidates.end());
  }
  for (const auto& c : cp) ids.insert(ids.end(), c.item_ids.begin(), c.item_ids.end());
  require_captions(captions, ids);
}

void check_disjoint(std::span<const Outfit> train, std::span<const Outfit> test) {
  std::unordered_set<std::string> ids;
  for (const auto& o : train) ids.insert(o.outfit_id);
  for (const auto& o : test) {
    if (ids.count(o.outfit_id)) {
      throw ValidationError("outfit " + o.outfit_id + " appears in both train and test splits");
    }
  }
}

namespace {

struct CategoryPools {
  // category -> (item_id, owning outfit index), first-appearance order
  std::map<std::string, std::vector<std::pair<std::string, std::size_t>>> pools;

  explicit CategoryPools(std::span<const Outfit> outfits) {
    std::unordered_set<std::string> seen;
    for (std::size_t o = 0; o < outfits.size(); ++o) {
      for (std::size_t k = 0; k < outfits[o].item_ids.size(); ++k) {
        if (seen.insert(outfits[o].item_ids[k]).second) {
          pools[outfits[o].categories[k]].emplace_back(outfits[o].item_ids[k], o);
        }
      }
    }
  }
};

// One same-category replacement negative built from outfits[base].
CpExample replace_items(std::span<const Outfit> outfits, const CategoryPools& pools, std::size_t base,
                        std::mt19937_64& rng, std::set<std::string>* starved) {
  const Outfit& src = outfits[base];
  CpExample neg;
  neg.label = 0;
  for (std::size_t k = 0; k < src.item_ids.size(); ++k) {
    const auto& pool = pools.pools.at(src.categories[k]);
    std::vector<std::size_t> eligible;
    for (std::size_t p = 0; p < pool.size(); ++p) {
      if (pool[p].second != base &&
          std::find(neg.item_ids.begin(), neg.item_ids.end(), pool[p].first) == neg.item_ids.end()) {
        eligible.push_back(p);
      }
    }
    if (eligible.empty()) {
      if (starved) starved->insert(src.categories[k]);
      neg.item_ids.push_back(src.item_ids[k]);
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    neg.item_ids.push_back(pool[eligible[pick(rng)]].first);
  }
  return neg;
}

}  // namespace

std::vector<CpExample> make_cp_negatives(std::span<const Outfit> outfits, double ratio, std::uint64_t seed,
                                         std::vector<std::string>* warnings) {
  if (!(ratio > 0)) throw ConfigError("negative ratio must be > 0");
  if (outfits.empty()) throw ValidationError("make_cp_negatives needs at least one outfit");

  std::vector<CpExample> out;
  for (const auto& o : outfits) out.push_back({o.item_ids, 1});

  const CategoryPools pools(outfits);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_outfit(0, outfits.size() - 1);
  const auto n_neg = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(outfits.size()) - 1e-9));
  std::set<std::string> starved;
  for (std::size_t n = 0; n < n_neg; ++n) {
    out.push_back(replace_items(outfits, pools, pick_outfit(rng), rng, &starved));
  }
  if (warnings) {
    for (const auto& c : starved) {
      warnings->push_back("category '" + c + "' has no item outside the sampled outfit; slot kept as-is");
    }
  }
  return out;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= n) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void write_outfits(const std::filesystem::path& path, std::span<const Outfit> outfits) {
  json root = json::array();
  for (const auto& o : outfits) {
    json items = json::array();
    for (std::size_t k = 0; k < o.item_ids.size(); ++k) {
      items.push_back({{"item_id", o.item_ids[k]}, {"category", o.categories[k]}});
    }
    root.push_back({{"set_id", o.outfit_id}, {"items", std::move(items)}});
  }
  std::ofstream(path, std::ios::binary) << root.dump(1) << '\n';
}

void write_captions(const std::filesystem::path& path, const CaptionMap& captions) {
  json root = json::object();
  for (const auto& [id, caption] : captions) root[id] = caption;
  std::ofstream(path, std::ios::binary) << root.dump(1) << '\n';
}

void write_fitb(const std::filesystem::path& path, std::span<const FitbExample> examples) {
  json root = json::array();
  for (const auto& ex : examples) {
    root.push_back({{"question", ex.question_items},
                    {"answers", ex.candidates},
                    {"blank_position", static_cast<int>(ex.question_items.size())},
                    {"answer_index", ex.answer_index}});
  }
  std::ofstream(path, std::ios::binary) << root.dump(1) << '\n';
}

void write_cp(const std::filesystem::path& path, std::span<const CpExample> examples) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& ex : examples) {
    out << ex.label;
    for (const auto& id : ex.item_ids) out << ' ' << id;
    out << '\n';
  }
}

std::vector<Outfit> SynthCorpus::split(Split s) const {
  std::vector<Outfit> out;
  std::copy_if(outfits.begin(), outfits.end(), std::back_inserter(out),
               [s](const Outfit& o) { return o.split == s; });
  return out;
}

namespace synth {

namespace {

using namespace std::string_view_literals;

constexpr std::array kStyles = {"boho"sv, "punk"sv, "sporty"sv, "classic"sv, "minimal"sv};
constexpr std::array kPaletteNames = {"warm"sv, "cool"sv, "neutral"sv, "earth"sv};
constexpr std::array<std::array<std::string_view, 3>, 4> kPalettes = {{
    {"red"sv, "orange"sv, "coral"sv},
    {"blue"sv, "teal"sv, "navy"sv},
    {"black"sv, "white"sv, "gray"sv},
    {"brown"sv, "olive"sv, "tan"sv},
}};
constexpr std::array kCategories = {"tops"sv, "bottoms"sv, "shoes"sv, "bags"sv, "outerwear"sv, "accessories"sv};
constexpr std::array<std::array<std::string_view, 4>, 6> kNouns = {{
    {"tee"sv, "blouse"sv, "sweater"sv, "tank"sv},
    {"jeans"sv, "skirt"sv, "shorts"sv, "trousers"sv},
    {"boots"sv, "sneakers"sv, "sandals"sv, "heels"sv},
    {"tote"sv, "clutch"sv, "backpack"sv, "satchel"sv},
    {"jacket"sv, "coat"sv, "blazer"sv, "parka"sv},
    {"scarf"sv, "hat"sv, "belt"sv, "necklace"sv},
}};

struct Parsed {
  int style = -1;
  int palette = -1;
};

Parsed parse_caption(std::string_view caption) {
  Parsed p;
  std::istringstream ss{std::string(caption)};
  for (std::string word; ss >> word;) {
    for (std::size_t s = 0; s < kStyles.size(); ++s) {
      if (word == kStyles[s]) p.style = static_cast<int>(s);
    }
    for (std::size_t q = 0; q < kPalettes.size(); ++q) {
      for (auto c : kPalettes[q]) {
        if (word == c) p.palette = static_cast<int>(q);
      }
    }
  }
  return p;
}

}  // namespace

std::span<const std::string_view> styles() { return kStyles; }
std::span<const std::string_view> palette_names() { return kPaletteNames; }
std::span<const std::string_view> palette(std::size_t index) { return kPalettes.at(index); }
std::span<const std::string_view> categories() { return kCategories; }

bool compatible(std::span<const std::string> captions) {
  if (captions.empty()) return false;
  const Parsed first = parse_caption(captions[0]);
  if (first.style < 0 || first.palette < 0) return false;
  for (const auto& c : captions) {
    const Parsed p = parse_caption(c);
    if (p.style != first.style || p.palette != first.palette) return false;
  }
  return true;
}

}  // namespace synth

namespace {

using synth::kCategories;
using synth::kNouns;
using synth::kPalettes;
using synth::kStyles;

template <class Rng>
std::size_t uniform(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::string make_caption(std::size_t color_palette, std::size_t color, std::size_t style, std::size_t category,
                         std::size_t noun) {
  std::string caption(kPalettes[color_palette][color]);
  caption += ' ';
  caption += kStyles[style];
  caption += ' ';
  caption += kNouns[category][noun];
  return caption;
}

}  // namespace

SynthCorpus synth_corpus(std::size_t n_outfits, std::uint64_t seed) {
  if (n_outfits < 8) throw ConfigError("synth_corpus needs at least 8 outfits");
  std::mt19937_64 rng(seed);
  SynthCorpus corpus;

  const std::size_t n_train = (n_outfits * 4 + 2) / 5;
  std::vector<std::size_t> outfit_style(n_outfits);
  for (std::size_t o = 0; o < n_outfits; ++o) {
    Outfit outfit;
    char id[24];
    std::snprintf(id, sizeof id, "%06zu", o + 1);
    outfit.outfit_id = id;
    outfit.split = o < n_train ? Split::train : Split::test;

    const std::size_t style = uniform(rng, kStyles.size());
    const std::size_t pal = uniform(rng, kPalettes.size());
    outfit_style[o] = style;
    const std::size_t n_items = 3 + uniform(rng, 3);
    std::vector<std::size_t> cats(kCategories.size());
    std::iota(cats.begin(), cats.end(), std::size_t{0});
    std::shuffle(cats.begin(), cats.end(), rng);
    cats.resize(n_items);
    std::sort(cats.begin(), cats.end());

    for (std::size_t k = 0; k < n_items; ++k) {
      const std::string item_id = outfit.outfit_id + "_" + std::to_string(k + 1);
      corpus.captions[item_id] =
          make_caption(pal, uniform(rng, 3), style, cats[k], uniform(rng, kNouns[cats[k]].size()));
      outfit.item_ids.push_back(item_id);
      outfit.categories.emplace_back(kCategories[cats[k]]);
    }
    corpus.outfits.push_back(std::move(outfit));
  }

  // FITB: one question per outfit. Distractors share the answer's category
  // and each carries a different off-outfit style.
  for (std::size_t o = 0; o < n_outfits; ++o) {
    const Outfit& outfit = corpus.outfits[o];
    const std::size_t blank = uniform(rng, outfit.item_ids.size());
    const auto cat = static_cast<std::size_t>(
        std::find(kCategories.begin(), kCategories.end(), outfit.categories[blank]) - kCategories.begin());

    FitbExample ex;
    for (std::size_t k = 0; k < outfit.item_ids.size(); ++k) {
      if (k != blank) ex.question_items.push_back(outfit.item_ids[k]);
    }
    std::vector<std::size_t> other_styles;
    for (std::size_t s = 0; s < kStyles.size(); ++s) {
      if (s != outfit_style[o]) other_styles.push_back(s);
    }
    std::shuffle(other_styles.begin(), other_styles.end(), rng);
    std::vector<std::string> distractors;
    for (std::size_t d = 0; d < 3; ++d) {
      const std::string item_id = "x" + outfit.outfit_id + "_" + std::to_string(d + 1);
      corpus.captions[item_id] = make_caption(uniform(rng, kPalettes.size()), uniform(rng, 3), other_styles[d], cat,
                                              uniform(rng, kNouns[cat].size()));
      distractors.push_back(item_id);
    }
    ex.answer_index = static_cast<int>(uniform(rng, 4));
    for (std::size_t c = 0, d = 0; c < 4; ++c) {
      ex.candidates.push_back(static_cast<int>(c) == ex.answer_index ? outfit.item_ids[blank] : distractors[d++]);
    }
    (outfit.split == Split::train ? corpus.fitb_train : corpus.fitb_test).push_back(std::move(ex));
  }

  // CP: positives are the outfits; negatives are same-category replacements
  // within the split, redrawn until they break the rule.
  for (Split s : {Split::train, Split::test}) {
    const std::vector<Outfit> part = corpus.split(s);
    const CategoryPools pools(part);
    auto& dest = s == Split::train ? corpus.cp_train : corpus.cp_test;
    for (const auto& o : part) dest.push_back({o.item_ids, 1});
    for (std::size_t n = 0; n < part.size(); ++n) {
      const std::size_t base = uniform(rng, part.size());
      bool placed = false;
      for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
        CpExample neg = replace_items(part, pools, base, rng, nullptr);
        std::vector<std::string> caps;
        for (const auto& id : neg.item_ids) caps.push_back(corpus.captions.at(id));
        if (!synth::compatible(caps)) {
          dest.push_back(std::move(neg));
          placed = true;
        }
      }
      if (!placed) {
        // Tiny splits can lack any rule-breaking replacement; swap in one
        // fresh off-style item instead.
        const Outfit& src = part[base];
        const auto cat = static_cast<std::size_t>(
            std::find(kCategories.begin(), kCategories.end(), src.categories[0]) - kCategories.begin());
        const std::string item_id = "y" + src.outfit_id + "_" + std::to_string(n + 1);
        const int src_style = synth::parse_caption(corpus.captions.at(src.item_ids[0])).style;
        const std::size_t style = (static_cast<std::size_t>(src_style) + 1) % kStyles.size();
        corpus.captions[item_id] = make_caption(uniform(rng, kPalettes.size()), uniform(rng, 3), style, cat, 0);
        CpExample neg{src.item_ids, 0};
        neg.item_ids[0] = item_id;
        dest.push_back(std::move(neg));
      }
    }
  }
  return corpus;
}

}  // namespace ofit::corpus
