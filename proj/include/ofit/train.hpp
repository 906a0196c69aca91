#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ofit/checkpoint.hpp"
#include "ofit/model.hpp"
#include "ofit/promptgen.hpp"
#include "ofit/tokenizer.hpp"

namespace ofit::train {

struct TrainConfig {
  double lr_max = 2e-4;
  double warmup_ratio = 0.3;
  int epochs = 3;
  int batch = 1;
  int grad_accum = 4;
  double beta = 0.1;  // DPO temperature
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;  // throws ConfigError
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class Stage { sft, dpo };

// "paper" or "desk"; throws ConfigError for anything else.
TrainConfig preset(std::string_view name, Stage stage);

// Linear warmup over ceil(warmup_ratio * total) steps, then linear decay to
// zero at `total`.
double lr_at(long step, long total, const TrainConfig& config);

template <class T>
using TensorRefs = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
TensorRefs<T> tensor_refs(lora::Adapters<T>& adapters);
template <class T>
TensorRefs<T> tensor_refs(model::Params<T>& params);

struct OptState {
  std::vector<Tensor<float>> m, v;
  long step = 0;
};

OptState make_opt_state(const TensorRefs<float>& params);

// AdamW with bias correction. Weight decay is decoupled and applies to
// matrices only (rank >= 2). Throws NumericError naming the first tensor
// with a non-finite gradient, before anything is modified.
void adamw_step(OptState& state, const TensorRefs<float>& params, const NamedTensors<float>& grads, double lr,
                const TrainConfig& config);

// Mean over examples of the mean next-token NLL on masked positions.
// Splitting a batch into equal micro-batches and averaging their
// gradients gives the same result.
template <class T>
model::LossAndGrad<T> sft_loss(const model::Params<T>& base, const lora::Adapters<T>* adapters,
                               std::span<const tok::Framed> batch);

// -log sigmoid(beta * ((pc - rc) - (pr - rr))) for policy (pc, pr) and
// reference (rc, rr) log-probs of the chosen / rejected completions.
struct DpoTerms {
  double loss;
  double delta;       // the sigmoid argument
  double d_chosen;    // d loss / d pc = -beta * sigmoid(-delta)
  double d_rejected;  // d loss / d pr
};
DpoTerms dpo_objective(double pc, double pr, double rc, double rr, double beta);

struct DpoExample {
  model::TargetSequence chosen, rejected;
  double ref_chosen = 0, ref_rejected = 0;
};

// Frames a pair exactly as SFT frames a record (completion plus EOS).
DpoExample make_dpo_example(const prompt::PreferencePair& pair);

// Fills ref_chosen / ref_rejected from a frozen reference model.
void score_reference(const model::Params<float>& base, const lora::Adapters<float>* adapters,
                     std::span<DpoExample> examples);

template <class T>
struct DpoResult {
  double loss = 0;  // mean over pairs
  std::vector<double> deltas;
  NamedTensors<T> grads;
};

template <class T>
DpoResult<T> dpo_loss(const model::Params<T>& base, const lora::Adapters<T>* adapters,
                      std::span<const DpoExample> batch, double beta);

// Mean of the DPO sigmoid argument over `examples` (no gradients).
double mean_margin(const model::Params<float>& base, const lora::Adapters<float>* adapters,
                   std::span<const DpoExample> examples, double beta);

struct LogEntry {
  long step = 0;
  double lr = 0;
  double loss = 0;
  std::string task;
};
std::string to_jsonl(const LogEntry& entry);
using LogSink = std::function<void(const LogEntry&)>;

struct TrainResult {
  ckpt::Checkpoint checkpoint;
  std::vector<LogEntry> log;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  long steps = 0;
};

// Full-parameter next-token training on whole records (prompt and
// completion), starting from init(model_config, config.seed).
TrainResult pretrain(std::span<const prompt::PromptRecord> records, const model::ModelConfig& model_config,
                     const TrainConfig& config, const LogSink& sink = {});

// Attaches fresh adapters (seeded by config.seed) to `start` and trains them
// on the records.
TrainResult train_sft(std::span<const prompt::PromptRecord> records, const ckpt::Checkpoint& start,
                      const lora::LoraConfig& lora_config, const TrainConfig& config, const LogSink& sink = {});

// Continues training the SFT adapters against a frozen copy of them.
TrainResult train_dpo(std::span<const prompt::PreferencePair> pairs, const ckpt::Checkpoint& sft,
                      const TrainConfig& config, const LogSink& sink = {});

// Central differences on a sample of coordinates; returns the largest
// |ga - gf| / max(1e-8, |ga| + |gf|).
struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index]"
};

GradCheckResult grad_check(const TensorRefs<double>& params, const NamedTensors<double>& analytic,
                           const std::function<double()>& loss, double eps, std::size_t samples,
                           std::uint64_t seed);

struct GradCheckCase {
  std::string loss;  // "sft" or "dpo"
  std::string mode;  // "lora" or "full"
  double eps = 0;
  GradCheckResult result;
};

// Small double-precision model (d_model 16, one layer) checked for both
// losses, with adapters and with all parameters trainable, at each eps.
std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed, std::span<const double> eps_values,
                                           std::size_t samples = 256);

}  // namespace ofit::train
