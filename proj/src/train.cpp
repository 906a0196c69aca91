#include "ofit/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "ofit/errors.hpp"

namespace ofit::train {

void TrainConfig::validate() const {
  if (!(lr_max > 0)) throw ConfigError("train.lr_max must be > 0");
  if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) throw ConfigError("train.warmup_ratio must be in [0, 1]");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (grad_accum < 1) throw ConfigError("train.grad_accum must be >= 1");
  if (!(beta > 0)) throw ConfigError("train.beta must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
}

TrainConfig preset(std::string_view name, Stage stage) {
  TrainConfig c;
  if (name == "paper") {
    if (stage == Stage::dpo) {
      c.lr_max = 1e-8;
      c.warmup_ratio = 0.1;
    }
    return c;
  }
  if (name == "desk") {
    if (stage == Stage::sft) {
      c.lr_max = 5e-3;
      c.warmup_ratio = 0.1;
    } else {
      c.lr_max = 1e-3;
      c.warmup_ratio = 0.1;
    }
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected paper or desk)");
}

double lr_at(long step, long total, const TrainConfig& config) {
  if (total <= 0) return 0.0;
  step = std::clamp(step, 0L, total);
  const long warm = static_cast<long>(std::ceil(config.warmup_ratio * static_cast<double>(total) - 1e-9));
  if (step < warm) return config.lr_max * static_cast<double>(step) / static_cast<double>(warm);
  if (warm >= total) return config.lr_max;
  return config.lr_max * static_cast<double>(total - step) / static_cast<double>(total - warm);
}

template <class T>
TensorRefs<T> tensor_refs(lora::Adapters<T>& adapters) {
  TensorRefs<T> out;
  adapters.for_each([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
  return out;
}

template <class T>
TensorRefs<T> tensor_refs(model::Params<T>& params) {
  TensorRefs<T> out;
  params.for_each([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
  return out;
}

template TensorRefs<float> tensor_refs(lora::Adapters<float>&);
template TensorRefs<double> tensor_refs(lora::Adapters<double>&);
template TensorRefs<float> tensor_refs(model::Params<float>&);
template TensorRefs<double> tensor_refs(model::Params<double>&);

OptState make_opt_state(const TensorRefs<float>& params) {
  OptState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t->shape);
    s.v.emplace_back(t->shape);
  }
  return s;
}

void adamw_step(OptState& state, const TensorRefs<float>& params, const NamedTensors<float>& grads, double lr,
                const TrainConfig& config) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter / gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].first != params[i].first || !grads[i].second.same_shape(*params[i].second)) {
      throw std::invalid_argument("optimizer: gradient does not match parameter " + params[i].first);
    }
    for (float g : grads[i].second.data) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + params[i].first);
    }
  }
  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float>& w = *params[i].second;
    const auto& g = grads[i].second.data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const bool decay = w.shape.size() >= 2;
    for (std::size_t k = 0; k < w.data.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1 - b1) * gk;
      const double vk = b2 * v[k] + (1 - b2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      double wk = w.data[k];
      if (decay) wk -= lr * config.weight_decay * wk;
      wk -= lr * (mk / c1) / (std::sqrt(vk / c2) + config.adam_eps);
      w.data[k] = static_cast<float>(wk);
    }
  }
}

template <class T>
model::LossAndGrad<T> sft_loss(const model::Params<T>& base, const lora::Adapters<T>* adapters,
                               std::span<const tok::Framed> batch) {
  std::vector<model::TargetSequence> seqs;
  seqs.reserve(batch.size());
  std::size_t total = 0;
  for (const auto& f : batch) {
    seqs.push_back(model::from_framed(f));
    total += seqs.back().targets.size();
  }
  if (total == 0) throw std::invalid_argument("empty completion batch");
  std::vector<double> weight(seqs.size(), 0.0);
  std::size_t live = 0;
  for (const auto& s : seqs) live += s.targets.empty() ? 0 : 1;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (!seqs[i].targets.empty()) weight[i] = 1.0 / (static_cast<double>(seqs[i].targets.size()) * live);
  }
  return model::loss_and_grad<T>(base, adapters, seqs, [&](std::span<const double> lp, std::span<double> adj) {
    double loss = 0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
      loss -= weight[i] * lp[i];
      adj[i] = -weight[i];
    }
    return loss;
  });
}

template model::LossAndGrad<float> sft_loss(const model::Params<float>&, const lora::Adapters<float>*,
                                            std::span<const tok::Framed>);
template model::LossAndGrad<double> sft_loss(const model::Params<double>&, const lora::Adapters<double>*,
                                             std::span<const tok::Framed>);

DpoTerms dpo_objective(double pc, double pr, double rc, double rr, double beta) {
  const double delta = beta * ((pc - rc) - (pr - rr));
  // -log sigmoid(d) = softplus(-d), evaluated without overflow.
  const double loss = delta > 0 ? std::log1p(std::exp(-delta)) : -delta + std::log1p(std::exp(delta));
  const double sig_neg = delta > 0 ? std::exp(-delta) / (1 + std::exp(-delta)) : 1 / (1 + std::exp(delta));
  return {loss, delta, -beta * sig_neg, beta * sig_neg};
}

DpoExample make_dpo_example(const prompt::PreferencePair& pair) {
  const auto p = tok::encode(pair.prompt);
  DpoExample ex;
  ex.chosen = model::conditional(p, tok::encode(pair.chosen), true);
  ex.rejected = model::conditional(p, tok::encode(pair.rejected), true);
  return ex;
}

namespace {

constexpr std::size_t kScoreChunk = 8;

std::vector<model::TargetSequence> interleave(std::span<const DpoExample> batch) {
  std::vector<model::TargetSequence> seqs;
  seqs.reserve(batch.size() * 2);
  for (const auto& ex : batch) {
    seqs.push_back(ex.chosen);
    seqs.push_back(ex.rejected);
  }
  return seqs;
}

}  // namespace

void score_reference(const model::Params<float>& base, const lora::Adapters<float>* adapters,
                     std::span<DpoExample> examples) {
  for (std::size_t start = 0; start < examples.size(); start += kScoreChunk) {
    auto chunk = examples.subspan(start, std::min(kScoreChunk, examples.size() - start));
    const auto lp = model::sum_logprobs<float>(base, adapters, interleave(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      chunk[i].ref_chosen = lp[2 * i];
      chunk[i].ref_rejected = lp[2 * i + 1];
    }
  }
}

template <class T>
DpoResult<T> dpo_loss(const model::Params<T>& base, const lora::Adapters<T>* adapters,
                      std::span<const DpoExample> batch, double beta) {
  DpoResult<T> out;
  if (batch.empty()) throw std::invalid_argument("empty preference batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto res = model::loss_and_grad<T>(
      base, adapters, interleave(batch), [&](std::span<const double> lp, std::span<double> adj) {
        double loss = 0;
        out.deltas.clear();
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const auto t = dpo_objective(lp[2 * i], lp[2 * i + 1], batch[i].ref_chosen, batch[i].ref_rejected, beta);
          loss += inv * t.loss;
          adj[2 * i] = inv * t.d_chosen;
          adj[2 * i + 1] = inv * t.d_rejected;
          out.deltas.push_back(t.delta);
        }
        return loss;
      });
  out.loss = res.loss;
  out.grads = std::move(res.grads);
  return out;
}

template DpoResult<float> dpo_loss(const model::Params<float>&, const lora::Adapters<float>*,
                                   std::span<const DpoExample>, double);
template DpoResult<double> dpo_loss(const model::Params<double>&, const lora::Adapters<double>*,
                                    std::span<const DpoExample>, double);

double mean_margin(const model::Params<float>& base, const lora::Adapters<float>* adapters,
                   std::span<const DpoExample> examples, double beta) {
  if (examples.empty()) return 0.0;
  double sum = 0;
  for (std::size_t start = 0; start < examples.size(); start += kScoreChunk) {
    auto chunk = examples.subspan(start, std::min(kScoreChunk, examples.size() - start));
    const auto lp = model::sum_logprobs<float>(base, adapters, interleave(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      sum += dpo_objective(lp[2 * i], lp[2 * i + 1], chunk[i].ref_chosen, chunk[i].ref_rejected, beta).delta;
    }
  }
  return sum / static_cast<double>(examples.size());
}

std::string to_jsonl(const LogEntry& e) {
  nlohmann::json j = {{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}, {"task", e.task}};
  return j.dump();
}

namespace {

// Splits a shuffled epoch into optimizer steps, each a list of micro-batches.
std::vector<std::vector<std::vector<std::size_t>>> plan_epoch(std::size_t n, const TrainConfig& config,
                                                              std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> micro;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(config.batch)) {
    micro.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + config.batch)));
  }
  std::vector<std::vector<std::vector<std::size_t>>> steps;
  for (std::size_t i = 0; i < micro.size(); i += static_cast<std::size_t>(config.grad_accum)) {
    steps.emplace_back(micro.begin() + static_cast<std::ptrdiff_t>(i),
                       micro.begin() + static_cast<std::ptrdiff_t>(std::min(micro.size(), i + config.grad_accum)));
  }
  return steps;
}

long steps_per_epoch(std::size_t n, const TrainConfig& config) {
  const std::size_t micro = (n + config.batch - 1) / config.batch;
  return static_cast<long>((micro + config.grad_accum - 1) / config.grad_accum);
}

template <class Item>
std::string step_task(const std::vector<std::vector<std::size_t>>& step, std::span<const Item> items) {
  std::string task;
  for (const auto& mb : step) {
    for (std::size_t i : mb) {
      const std::string t = prompt::to_string(items[i].task);
      if (task.empty()) task = t;
      else if (task != t) return "mixed";
    }
  }
  return task;
}

// Weight of each example so the step loss is the mean over micro-batches of
// the mean over their examples.
std::vector<std::pair<std::size_t, double>> step_weights(const std::vector<std::vector<std::size_t>>& step) {
  std::vector<std::pair<std::size_t, double>> out;
  for (const auto& mb : step) {
    for (std::size_t i : mb) {
      out.emplace_back(i, 1.0 / (static_cast<double>(mb.size()) * static_cast<double>(step.size())));
    }
  }
  return out;
}

template <class StepFn>
TrainResult run_loop(std::size_t n, const TrainConfig& config, const TensorRefs<float>& refs, const LogSink& sink,
                     StepFn&& step_fn) {
  TrainResult result;
  OptState opt = make_opt_state(refs);
  std::mt19937_64 rng(config.seed);
  const long total = steps_per_epoch(n, config) * config.epochs;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_sum = 0;
    long epoch_steps = 0;
    for (const auto& plan : plan_epoch(n, config, rng)) {
      const double lr = lr_at(step, total, config);
      auto [loss, grads, task] = step_fn(plan);
      adamw_step(opt, refs, grads, lr, config);
      LogEntry e{step, lr, loss, task};
      if (sink) sink(e);
      result.log.push_back(std::move(e));
      epoch_sum += loss;
      ++epoch_steps;
      ++step;
    }
    result.epoch_loss.push_back(epoch_steps ? epoch_sum / static_cast<double>(epoch_steps) : 0.0);
  }
  result.steps = step;
  return result;
}

struct StepOutput {
  double loss;
  NamedTensors<float> grads;
  std::string task;
};

}  // namespace

TrainResult pretrain(std::span<const prompt::PromptRecord> records, const model::ModelConfig& model_config,
                     const TrainConfig& config, const LogSink& sink) {
  config.validate();
  model_config.validate();
  if (records.empty()) throw std::invalid_argument("no pretraining records");
  model::Params<float> params = model::init<float>(model_config, config.seed);

  std::vector<model::TargetSequence> seqs;
  seqs.reserve(records.size());
  for (const auto& r : records) {
    const auto f = tok::frame(tok::encode(r.prompt), tok::encode(r.completion));
    model::TargetSequence ts;
    ts.input.assign(f.ids.begin(), f.ids.end() - 1);
    for (std::size_t i = 1; i < f.ids.size(); ++i) ts.targets.push_back({static_cast<int>(i) - 1, f.ids[i]});
    seqs.push_back(std::move(ts));
  }

  TrainResult result = run_loop(records.size(), config, tensor_refs(params), sink, [&](const auto& plan) {
    std::vector<model::TargetSequence> batch;
    std::vector<double> weight;
    for (auto [i, w] : step_weights(plan)) {
      batch.push_back(seqs[i]);
      weight.push_back(w / static_cast<double>(seqs[i].targets.size()));
    }
    auto res = model::loss_and_grad<float>(params, nullptr, batch,
                                           [&](std::span<const double> lp, std::span<double> adj) {
                                             double loss = 0;
                                             for (std::size_t i = 0; i < lp.size(); ++i) {
                                               loss -= weight[i] * lp[i];
                                               adj[i] = -weight[i];
                                             }
                                             return loss;
                                           });
    return StepOutput{res.loss, std::move(res.grads), "LM"};
  });
  result.checkpoint.base = std::move(params);
  return result;
}

TrainResult train_sft(std::span<const prompt::PromptRecord> records, const ckpt::Checkpoint& start,
                      const lora::LoraConfig& lora_config, const TrainConfig& config, const LogSink& sink) {
  config.validate();
  if (records.empty()) throw std::invalid_argument("no SFT records");
  lora_config.validate(start.base.config);

  auto base = std::make_shared<const model::Params<float>>(start.base);
  auto adapted = lora::attach<float>(base, lora_config, config.seed);

  std::vector<model::TargetSequence> framed;
  framed.reserve(records.size());
  for (const auto& r : records) {
    if (r.completion.empty()) throw ValidationError("SFT record with empty completion");
    framed.push_back(model::from_framed(tok::frame(tok::encode(r.prompt), tok::encode(r.completion))));
  }

  TrainResult result = run_loop(records.size(), config, tensor_refs(adapted.adapters), sink, [&](const auto& plan) {
    std::vector<model::TargetSequence> seqs;
    std::vector<double> weight;
    for (auto [i, w] : step_weights(plan)) {
      seqs.push_back(framed[i]);
      weight.push_back(w / static_cast<double>(framed[i].targets.size()));
    }
    auto res = model::loss_and_grad<float>(*base, &adapted.adapters, seqs,
                                           [&](std::span<const double> lp, std::span<double> adj) {
                                             double loss = 0;
                                             for (std::size_t i = 0; i < lp.size(); ++i) {
                                               loss -= weight[i] * lp[i];
                                               adj[i] = -weight[i];
                                             }
                                             return loss;
                                           });
    return StepOutput{res.loss, std::move(res.grads), step_task(plan, records)};
  });

  result.checkpoint.base = start.base;
  result.checkpoint.adapters = std::move(adapted.adapters);
  result.checkpoint.meta = start.meta;
  return result;
}

TrainResult train_dpo(std::span<const prompt::PreferencePair> pairs, const ckpt::Checkpoint& sft,
                      const TrainConfig& config, const LogSink& sink) {
  config.validate();
  if (pairs.empty()) throw std::invalid_argument("no preference pairs");
  if (!sft.adapters) throw ConfigError("DPO needs a checkpoint with adapters");

  const model::Params<float>& base = sft.base;
  std::vector<DpoExample> examples;
  examples.reserve(pairs.size());
  for (const auto& p : pairs) examples.push_back(make_dpo_example(p));
  score_reference(base, &*sft.adapters, examples);

  lora::Adapters<float> policy = *sft.adapters;
  TrainResult result = run_loop(pairs.size(), config, tensor_refs(policy), sink, [&](const auto& plan) {
    std::vector<DpoExample> batch;
    std::vector<double> weight;
    for (auto [i, w] : step_weights(plan)) {
      batch.push_back(examples[i]);
      weight.push_back(w);
    }
    std::vector<double> deltas;
    auto res = model::loss_and_grad<float>(base, &policy, interleave(batch),
                                           [&](std::span<const double> lp, std::span<double> adj) {
                                             double loss = 0;
                                             for (std::size_t i = 0; i < batch.size(); ++i) {
                                               const auto t = dpo_objective(lp[2 * i], lp[2 * i + 1],
                                                                            batch[i].ref_chosen,
                                                                            batch[i].ref_rejected, config.beta);
                                               loss += weight[i] * t.loss;
                                               adj[2 * i] = weight[i] * t.d_chosen;
                                               adj[2 * i + 1] = weight[i] * t.d_rejected;
                                             }
                                             return loss;
                                           });
    return StepOutput{res.loss, std::move(res.grads), step_task(plan, pairs)};
  });

  result.checkpoint.base = sft.base;
  result.checkpoint.adapters = std::move(policy);
  result.checkpoint.meta = sft.meta;
  return result;
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const TensorRefs<double>& params, const NamedTensors<double>& analytic,
                           const std::function<double()>& loss, double eps, std::size_t samples,
                           std::uint64_t seed) {
  if (analytic.size() != params.size()) throw std::invalid_argument("gradient / parameter count mismatch");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t n = params[t].second->size();
    total += n;
    // a few coordinates from every tensor
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < std::min<std::size_t>(n, 4); ++k) coords.emplace_back(t, idx[k]);
  }
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  while (coords.size() < samples && coords.size() < total) {
    std::size_t g = pick(rng), t = 0;
    while (g >= params[t].second->size()) g -= params[t++].second->size();
    coords.emplace_back(t, g);
  }

  GradCheckResult out;
  for (auto [t, k] : coords) {
    double& w = params[t].second->data[k];
    const double saved = w;
    w = saved + eps;
    const double up = loss();
    w = saved - eps;
    const double down = loss();
    w = saved;
    const double fd = (up - down) / (2 * eps);
    const double ga = analytic[t].second.data[k];
    const double rel = std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
    if (rel > out.max_rel_error || out.worst.empty()) {
      out.max_rel_error = rel;
      out.worst = params[t].first + "[" + std::to_string(k) + "]";
    }
    ++out.coordinates;
  }
  return out;
}

namespace {

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<int> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

void randomize(Tensor<double>& t, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> d(0.0, std);
  for (auto& x : t.data) x = d(rng);
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed, std::span<const double> eps_values,
                                           std::size_t samples) {
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.window = 4;
  cfg.d_ff = 32;
  cfg.max_seq = 16;

  std::mt19937_64 rng(seed);
  model::Params<double> base = model::init<double>(cfg, seed, 0.4);
  // Perturb the gains so the normalization gradients are not trivially symmetric.
  base.for_each([&](const std::string&, Tensor<double>& t) {
    if (t.shape.size() == 1) {
      std::normal_distribution<double> d(1.0, 0.2);
      for (auto& x : t.data) x = d(rng);
    }
  });
  lora::LoraConfig lcfg;
  lcfg.rank = 2;
  lcfg.alpha = 4;
  lcfg.init_std = 0.4;
  auto shared = std::make_shared<const model::Params<double>>(base);
  lora::Adapters<double> adapters = lora::attach<double>(shared, lcfg, seed + 1).adapters;
  adapters.for_each([&](const std::string&, Tensor<double>& t) { randomize(t, rng, 0.4); });

  // Prompts share a prefix so the packed path is exercised.
  const auto shared_prefix = random_tokens(rng, 3);
  std::vector<tok::Framed> sft_batch;
  std::vector<DpoExample> dpo_batch;
  for (int i = 0; i < 3; ++i) {
    auto p = shared_prefix;
    const auto tail = random_tokens(rng, 2 + static_cast<std::size_t>(i));
    p.insert(p.end(), tail.begin(), tail.end());
    const auto c = random_tokens(rng, 2 + static_cast<std::size_t>(i % 2));
    sft_batch.push_back(tok::frame(p, c));
    DpoExample ex;
    ex.chosen = model::conditional(p, c, true);
    ex.rejected = model::conditional(p, random_tokens(rng, 3), true);
    std::normal_distribution<double> d(-8.0, 2.0);
    ex.ref_chosen = d(rng);
    ex.ref_rejected = d(rng);
    dpo_batch.push_back(std::move(ex));
  }
  const double beta = 0.5;

  std::vector<GradCheckCase> out;
  for (const std::string loss_name : {"sft", "dpo"}) {
    for (const std::string mode : {"lora", "full"}) {
      model::Params<double> p = base;
      lora::Adapters<double> a = adapters;
      const lora::Adapters<double>* ap = mode == "lora" ? &a : nullptr;
      auto evaluate = [&]() -> std::pair<double, NamedTensors<double>> {
        if (loss_name == "sft") {
          auto r = sft_loss<double>(p, ap, sft_batch);
          return {r.loss, std::move(r.grads)};
        }
        auto r = dpo_loss<double>(p, ap, dpo_batch, beta);
        return {r.loss, std::move(r.grads)};
      };
      const auto analytic = evaluate().second;
      const TensorRefs<double> refs = mode == "lora" ? tensor_refs(a) : tensor_refs(p);
      for (double eps : eps_values) {
        GradCheckCase c{loss_name, mode, eps, {}};
        c.result = grad_check(refs, analytic, [&] { return evaluate().first; }, eps, samples, seed + 7);
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

}  // namespace ofit::train
