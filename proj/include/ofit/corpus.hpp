#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ofit::corpus {

enum class Split { train, test };

std::string to_string(Split split);

struct Item {
  std::string item_id;
  std::string category;
  std::string caption;
};

struct Outfit {
  std::string outfit_id;
  std::vector<std::string> item_ids;
  // Parallel to item_ids; taken from the outfits file.
  std::vector<std::string> categories;
  Split split = Split::train;

  friend bool operator==(const Outfit&, const Outfit&) = default;
};

struct FitbExample {
  std::vector<std::string> question_items;
  std::vector<std::string> candidates;
  int answer_index = 0;

  friend bool operator==(const FitbExample&, const FitbExample&) = default;
};

struct CpExample {
  std::vector<std::string> item_ids;
  int label = 0;

  friend bool operator==(const CpExample&, const CpExample&) = default;
};

// Ordered so that anything serialized from it is byte-stable.
using CaptionMap = std::map<std::string, std::string>;

// Outfits file loader. When `split` is not given it is read from the file
// name ("train" or "test" must appear in the stem).
std::vector<Outfit> load_outfits(const std::filesystem::path& path,
                                 std::optional<Split> split = std::nullopt);

CaptionMap load_captions(const std::filesystem::path& path);
// Same, plus the totality check against every item referenced by `outfits`.
CaptionMap load_captions(const std::filesystem::path& path, std::span<const Outfit> outfits);

std::vector<FitbExample> load_fitb(const std::filesystem::path& path);
std::vector<CpExample> load_cp(const std::filesystem::path& path);

void validate(const FitbExample& example);
void validate(const CpExample& example);

// Throws ValidationError naming every id in `ids` that has no caption.
void require_captions(const CaptionMap& captions, std::span<const std::string> ids);
// Referential integrity over everything that will be rendered.
void require_captions(const CaptionMap& captions, std::span<const Outfit> outfits,
                      std::span<const FitbExample> fitb, std::span<const CpExample> cp);

// Throws ValidationError if any outfit_id appears in both lists.
void check_disjoint(std::span<const Outfit> train, std::span<const Outfit> test);

// Positives (one per outfit, input order) followed by ceil(ratio * n)
// negatives. Each negative starts from a uniformly sampled outfit and swaps
// every item for a random same-category item drawn from a different outfit.
// Slots whose category has no such item keep the original; a message per
// affected category is appended to `warnings` when given.
std::vector<CpExample> make_cp_negatives(std::span<const Outfit> outfits, double ratio,
                                         std::uint64_t seed,
                                         std::vector<std::string>* warnings = nullptr);

// Uniform sample of min(k, n) elements without replacement, kept in input order.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed);

template <class T>
std::vector<T> sample_subset(std::span<const T> items, std::size_t k, std::uint64_t seed) {
  std::vector<T> out;
  for (std::size_t i : sample_indices(items.size(), k, seed)) out.push_back(items[i]);
  return out;
}

void write_outfits(const std::filesystem::path& path, std::span<const Outfit> outfits);
void write_captions(const std::filesystem::path& path, const CaptionMap& captions);
void write_fitb(const std::filesystem::path& path, std::span<const FitbExample> examples);
void write_cp(const std::filesystem::path& path, std::span<const CpExample> examples);

// Desk-scale stand-in for the curated corpus. Every caption reads
// "<color> <style> <noun>"; a set of items is compatible iff all items share
// the style word and all colors come from one palette.
struct SynthCorpus {
  std::vector<Outfit> outfits;  // train outfits first, then test
  CaptionMap captions;
  std::vector<FitbExample> fitb_train, fitb_test;
  std::vector<CpExample> cp_train, cp_test;

  std::vector<Outfit> split(Split s) const;
};

namespace synth {

std::span<const std::string_view> styles();
std::span<const std::string_view> palette_names();
std::span<const std::string_view> palette(std::size_t index);
std::span<const std::string_view> categories();

// The generating rule, evaluated on captions.
bool compatible(std::span<const std::string> captions);

}  // namespace synth

// Requires n_outfits >= 8. Deterministic in (n_outfits, seed).
SynthCorpus synth_corpus(std::size_t n_outfits, std::uint64_t seed);

}  // namespace ofit::corpus
