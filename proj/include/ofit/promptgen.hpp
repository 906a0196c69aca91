#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ofit/corpus.hpp"

namespace ofit::prompt {

enum class Task { fitb, cp };

std::string to_string(Task task);
Task task_from_string(std::string_view name);

struct PromptRecord {
  std::string prompt;      // "Human: ..." through the trailing "Assistant:" line
  std::string completion;  // the assistant turn
  Task task = Task::fitb;

  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  Task task = Task::fitb;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

inline constexpr std::string_view kFitbInstruction =
    "You have two lists: the first list contains item descriptions that make up an incomplete outfit, and the "
    "second list contains additional item descriptions as options to complete the look. Your task is to select "
    "exactly one item from List 2 that best complements each item in List 1, considering factors like style, "
    "color, and overall aesthetic.";

inline constexpr std::string_view kCpInstruction =
    "As a fashion consultant, your task is to evaluate the overall style compatibility of a list of clothing item "
    "descriptions. You need to assign a single compatibility score between 0 and 1 for the entire list. A score of "
    "1 indicates that the items are very compatible style-wise and can be combined to create a cohesive outfit. A "
    "score of 0 indicates that the items are not compatible at all.";

inline constexpr std::string_view kHumanMarker = "Human: ";
inline constexpr std::string_view kAssistantMarker = "Assistant:";

// Canonical completion for a binary compatibility label.
std::string score_string(int label);

// Prompt text only; shared by the SFT and DPO renderers.
std::string fitb_prompt(const corpus::FitbExample& example, const corpus::CaptionMap& captions);
std::string cp_prompt(const corpus::CpExample& example, const corpus::CaptionMap& captions);

PromptRecord render_sft_fitb(const corpus::FitbExample& example, const corpus::CaptionMap& captions);
PromptRecord render_sft_cp(const corpus::CpExample& example, const corpus::CaptionMap& captions);

// One pair per incorrect candidate, all sharing the prompt.
std::vector<PreferencePair> render_dpo_fitb(const corpus::FitbExample& example,
                                            const corpus::CaptionMap& captions);
PreferencePair render_dpo_cp(const corpus::CpExample& example, const corpus::CaptionMap& captions);

// Records in both task formats built from uniformly random items of
// `item_pool`: FITB completions are a random candidate and CP scores a coin
// flip, so the text carries no compatibility signal.
std::vector<PromptRecord> background_records(const corpus::CaptionMap& captions,
                                             std::span<const std::string> item_pool, std::size_t n,
                                             std::uint64_t seed);

// JSON-lines (de)serialization used by the `prompts` subcommand.
std::string to_jsonl(const PromptRecord& record);
std::string to_jsonl(const PreferencePair& pair);
PromptRecord prompt_record_from_json(std::string_view line);
PreferencePair preference_pair_from_json(std::string_view line);

}  // namespace ofit::prompt
