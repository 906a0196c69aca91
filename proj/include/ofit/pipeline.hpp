#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ofit/checkpoint.hpp"
#include "ofit/corpus.hpp"
#include "ofit/eval.hpp"
#include "ofit/promptgen.hpp"
#include "ofit/train.hpp"

namespace ofit::pipeline {

// Everything one run needs. Stage seeds come from `seed`.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  model::ModelConfig model;
  lora::LoraConfig lora;
  train::TrainConfig pretrain, sft, dpo;
  std::size_t pretrain_records = 0;  // 0 starts SFT from a random base
  std::size_t train_samples = 0;     // training examples per task, 0 = all
  double cp_neg_ratio = 1.0;
  int fitb_dpo_pairs = 3;  // incorrect options used per FITB question
  eval::FitbScoring fitb_scoring = eval::FitbScoring::mean;
  std::vector<prompt::Task> tasks = {prompt::Task::fitb, prompt::Task::cp};
  std::filesystem::path data_dir = "data";
  std::filesystem::path run_dir = "run";

  void validate() const;  // throws ConfigError
};

// "paper" or "desk"; throws ConfigError otherwise.
RunConfig preset_config(std::string_view name);

// Flat "key = value" lines; '#' starts a comment. Throws ParseError with the
// line number on malformed lines.
std::vector<std::pair<std::string, std::string>> parse_config(std::string_view text);

// Sets one dotted key. Throws ConfigError for unknown keys or bad values.
void apply(RunConfig& config, std::string_view key, std::string_view value);

// Every key with its current value, in a fixed order.
std::vector<std::pair<std::string, std::string>> to_kv(const RunConfig& config);
nlohmann::json to_json(const RunConfig& config);

// Training stage config with the run seed filled in.
train::TrainConfig stage_config(const RunConfig& config, train::Stage stage);
train::TrainConfig pretrain_config(const RunConfig& config);

struct Dataset {
  corpus::CaptionMap captions;
  std::vector<corpus::Outfit> train_outfits, test_outfits;
  std::vector<corpus::FitbExample> fitb_train, fitb_test;
  std::vector<corpus::CpExample> cp_train, cp_test;
};

Dataset from_synth(const corpus::SynthCorpus& synth);

// Fixed file names inside `dir`: outfits_{train,test}.json, captions.json,
// fitb_{train,test}.json, cp_{train,test}.txt. write_dataset returns the
// files written.
std::vector<std::filesystem::path> write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
std::vector<std::filesystem::path> dataset_files(const std::filesystem::path& dir);

// Every item of the train outfits, in order.
std::vector<std::string> train_item_pool(const Dataset& data);

std::vector<prompt::PromptRecord> sft_records(const Dataset& data, const RunConfig& config, prompt::Task task);
std::vector<prompt::PreferencePair> dpo_pairs(const Dataset& data, const RunConfig& config, prompt::Task task);

// Pretrained base (pretrain_records > 0) or a random one.
train::TrainResult make_base(const Dataset& data, const RunConfig& config, const train::LogSink& sink = {});

inline constexpr std::string_view kPlainLabel = "Plain LLM";
inline constexpr std::string_view kSftLabel = "PEFT LLM (LoRA)";
inline constexpr std::string_view kDpoLabel = "PEFT DPO LLM";

// Scores FITB with `fitb_model` and CP with `cp_model` on the test split;
// either may be null to skip that task.
eval::MetricsReport evaluate_stage(std::string_view label, const Dataset& data, const RunConfig& config,
                                   const ckpt::Checkpoint* fitb_model, const ckpt::Checkpoint* cp_model);

std::string task_slug(prompt::Task task);  // "fitb" / "cp"

}  // namespace ofit::pipeline
