#include "ofit/promptgen.hpp"

#include <numeric>
#include <random>

#include "json.hpp"
#include "ofit/errors.hpp"

namespace ofit::prompt {

using nlohmann::json;

namespace {

const std::string& caption_of(const corpus::CaptionMap& captions, const std::string& id) {
  const auto it = captions.find(id);
  if (it == captions.end()) throw ValidationError("no caption for item " + id);
  if (it->second.empty()) throw ValidationError("empty caption for item " + id);
  return it->second;
}

void append_numbered(std::string& out, const std::vector<std::string>& ids, const corpus::CaptionMap& captions) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += std::to_string(i + 1);
    out += ". ";
    out += caption_of(captions, ids[i]);
    out += '\n';
  }
}

}  // namespace

std::string to_string(Task task) { return task == Task::fitb ? "FITB" : "CP"; }

Task task_from_string(std::string_view name) {
  if (name == "FITB" || name == "fitb") return Task::fitb;
  if (name == "CP" || name == "cp") return Task::cp;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::string score_string(int label) {
  if (label != 0 && label != 1) throw ValidationError("label must be 0 or 1");
  return label == 1 ? "1" : "0";
}

std::string fitb_prompt(const corpus::FitbExample& example, const corpus::CaptionMap& captions) {
  corpus::validate(example);
  std::string p(kHumanMarker);
  p += kFitbInstruction;
  p += "\nList 1 (Incomplete outfit):\n";
  append_numbered(p, example.question_items, captions);
  p += "List 2 (Options to complete the outfit):\n";
  append_numbered(p, example.candidates, captions);
  p += kAssistantMarker;
  return p;
}

std::string cp_prompt(const corpus::CpExample& example, const corpus::CaptionMap& captions) {
  corpus::validate(example);
  std::string p(kHumanMarker);
  p += kCpInstruction;
  p += "\nList of clothing item descriptions (Complete Outfit):\n";
  append_numbered(p, example.item_ids, captions);
  p += "Output: Compatibility score (0-1).\n";
  p += kAssistantMarker;
  return p;
}

PromptRecord render_sft_fitb(const corpus::FitbExample& example, const corpus::CaptionMap& captions) {
  std::string prompt = fitb_prompt(example, captions);
  return {std::move(prompt), caption_of(captions, example.candidates[example.answer_index]), Task::fitb};
}

PromptRecord render_sft_cp(const corpus::CpExample& example, const corpus::CaptionMap& captions) {
  return {cp_prompt(example, captions), score_string(example.label), Task::cp};
}

std::vector<PreferencePair> render_dpo_fitb(const corpus::FitbExample& example,
                                            const corpus::CaptionMap& captions) {
  const std::string prompt = fitb_prompt(example, captions);
  const std::string& chosen = caption_of(captions, example.candidates[example.answer_index]);
  std::vector<PreferencePair> pairs;
  for (int c = 0; c < 4; ++c) {
    if (c == example.answer_index) continue;
    const std::string& rejected = caption_of(captions, example.candidates[c]);
    // Two candidates with the same caption carry no preference signal.
    if (rejected == chosen) continue;
    pairs.push_back({prompt, chosen, rejected, Task::fitb});
  }
  return pairs;
}

PreferencePair render_dpo_cp(const corpus::CpExample& example, const corpus::CaptionMap& captions) {
  return {cp_prompt(example, captions), score_string(example.label), score_string(1 - example.label), Task::cp};
}

std::string to_jsonl(const PromptRecord& record) {
  return json{{"prompt", record.prompt}, {"completion", record.completion}, {"task", to_string(record.task)}}
      .dump();
}

std::string to_jsonl(const PreferencePair& pair) {
  return json{{"prompt", pair.prompt},
              {"chosen", pair.chosen},
              {"rejected", pair.rejected},
              {"task", to_string(pair.task)}}
      .dump();
}

PromptRecord prompt_record_from_json(std::string_view line) {
  try {
    const json j = json::parse(line);
    return {j.at("prompt").get<std::string>(), j.at("completion").get<std::string>(),
            task_from_string(j.at("task").get<std::string>())};
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad SFT record: ") + e.what());
  }
}

PreferencePair preference_pair_from_json(std::string_view line) {
  try {
    const json j = json::parse(line);
    return {j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(),
            j.at("rejected").get<std::string>(), task_from_string(j.at("task").get<std::string>())};
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad DPO record: ") + e.what());
  }
}

}  // namespace ofit::prompt

namespace ofit::prompt {

std::vector<PromptRecord> background_records(const corpus::CaptionMap& captions,
                                             std::span<const std::string> item_pool, std::size_t n,
                                             std::uint64_t seed) {
  if (item_pool.size() < 10) throw ValidationError("background text needs at least 10 items in the pool");
  std::mt19937_64 rng(seed);
  auto draw = [&](std::size_t k) {
    std::vector<std::size_t> idx(item_pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // partial Fisher-Yates: the first k entries are a uniform sample
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
      std::swap(idx[i], idx[d(rng)]);
    }
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(item_pool[idx[i]]);
    return out;
  };
  std::vector<PromptRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 2 == 0) {
      const std::size_t q = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
      auto ids = draw(q + 4);
      corpus::FitbExample ex;
      ex.question_items.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(q));
      ex.candidates.assign(ids.begin() + static_cast<std::ptrdiff_t>(q), ids.end());
      ex.answer_index = std::uniform_int_distribution<int>(0, 3)(rng);
      out.push_back(render_sft_fitb(ex, captions));
    } else {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(3, 5)(rng);
      corpus::CpExample ex{draw(k), std::uniform_int_distribution<int>(0, 1)(rng)};
      out.push_back(render_sft_cp(ex, captions));
    }
  }
  return out;
}

}  // namespace ofit::prompt
