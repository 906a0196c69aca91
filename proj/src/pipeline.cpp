#include "ofit/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "ofit/errors.hpp"

namespace ofit::pipeline {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  if (preset != "paper" && preset != "desk") throw ConfigError("preset must be paper or desk");
  model.validate();
  lora.validate(model);
  pretrain.validate();
  sft.validate();
  dpo.validate();
  if (!(cp_neg_ratio > 0)) throw ConfigError("data.cp_neg_ratio must be > 0");
  if (fitb_dpo_pairs < 1 || fitb_dpo_pairs > 3) throw ConfigError("data.fitb_dpo_pairs must be in [1, 3]");
  if (tasks.empty()) throw ConfigError("run.tasks must name at least one task");
}

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  c.preset = std::string(name);
  c.sft = train::preset(name, train::Stage::sft);
  c.dpo = train::preset(name, train::Stage::dpo);
  // Prompts run to ~650 bytes, so the window and length grow past the
  // model defaults.
  c.model.window = 256;
  c.model.max_seq = 1024;
  c.lora.rank = 4;
  c.lora.alpha = 8;
  c.pretrain = train::preset("desk", train::Stage::sft);
  c.pretrain.lr_max = 2e-3;
  c.pretrain.epochs = 1;
  c.pretrain_records = 2000;
  if (name == "paper") {
    c.train_samples = 1000;
  } else {
    c.fitb_dpo_pairs = 1;
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

namespace {

template <class N>
N parse_number(std::string_view key, std::string_view value) {
  N out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("bad value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

lora::Proj parse_proj(std::string_view s) {
  for (auto p : model::kAllProjs) {
    if (s == model::proj_name(p) || s == std::string_view(model::proj_name(p)).substr(1)) return p;
  }
  throw ConfigError("unknown LoRA target '" + std::string(s) + "'");
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

struct Field {
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class N>
Field number(N RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_number<N>(k, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) {
              return fmt(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <class S, class N>
Field nested(S RunConfig::*outer, N S::*member) {
  return {[outer, member](RunConfig& c, std::string_view k, std::string_view v) {
            (c.*outer).*member = parse_number<N>(k, v);
          },
          [outer, member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) {
              return fmt((c.*outer).*member);
            } else {
              return std::to_string((c.*outer).*member);
            }
          }};
}

void add_train_fields(std::vector<std::pair<std::string, Field>>& f, const std::string& prefix,
                      train::TrainConfig RunConfig::*stage) {
  using TC = train::TrainConfig;
  f.emplace_back(prefix + ".lr_max", nested(stage, &TC::lr_max));
  f.emplace_back(prefix + ".warmup_ratio", nested(stage, &TC::warmup_ratio));
  f.emplace_back(prefix + ".epochs", nested(stage, &TC::epochs));
  f.emplace_back(prefix + ".batch", nested(stage, &TC::batch));
  f.emplace_back(prefix + ".grad_accum", nested(stage, &TC::grad_accum));
  f.emplace_back(prefix + ".beta", nested(stage, &TC::beta));
  f.emplace_back(prefix + ".weight_decay", nested(stage, &TC::weight_decay));
  f.emplace_back(prefix + ".adam_beta1", nested(stage, &TC::adam_beta1));
  f.emplace_back(prefix + ".adam_beta2", nested(stage, &TC::adam_beta2));
  f.emplace_back(prefix + ".adam_eps", nested(stage, &TC::adam_eps));
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    using MC = model::ModelConfig;
    using LC = lora::LoraConfig;
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("preset", Field{[](RunConfig& c, std::string_view, std::string_view v) { c.preset = v; },
                                   [](const RunConfig& c) { return c.preset; }});
    f.emplace_back("seed", number(&RunConfig::seed));
    f.emplace_back("model.d_model", nested(&RunConfig::model, &MC::d_model));
    f.emplace_back("model.n_layers", nested(&RunConfig::model, &MC::n_layers));
    f.emplace_back("model.n_heads", nested(&RunConfig::model, &MC::n_heads));
    f.emplace_back("model.n_kv_heads", nested(&RunConfig::model, &MC::n_kv_heads));
    f.emplace_back("model.window", nested(&RunConfig::model, &MC::window));
    f.emplace_back("model.d_ff", nested(&RunConfig::model, &MC::d_ff));
    f.emplace_back("model.max_seq", nested(&RunConfig::model, &MC::max_seq));
    f.emplace_back("lora.rank", nested(&RunConfig::lora, &LC::rank));
    f.emplace_back("lora.alpha", nested(&RunConfig::lora, &LC::alpha));
    f.emplace_back("lora.init_std", nested(&RunConfig::lora, &LC::init_std));
    f.emplace_back("lora.targets", Field{[](RunConfig& c, std::string_view, std::string_view v) {
                                           std::vector<lora::Proj> t;
                                           for (const auto& s : split_list(v)) t.push_back(parse_proj(s));
                                           c.lora.targets = std::move(t);
                                         },
                                         [](const RunConfig& c) {
                                           std::string s;
                                           for (auto p : c.lora.targets) {
                                             s += (s.empty() ? "" : ",") + std::string(model::proj_name(p));
                                           }
                                           return s;
                                         }});
    f.emplace_back("pretrain.records", number(&RunConfig::pretrain_records));
    add_train_fields(f, "pretrain", &RunConfig::pretrain);
    add_train_fields(f, "sft", &RunConfig::sft);
    add_train_fields(f, "dpo", &RunConfig::dpo);
    f.emplace_back("data.train_samples", number(&RunConfig::train_samples));
    f.emplace_back("data.cp_neg_ratio", number(&RunConfig::cp_neg_ratio));
    f.emplace_back("data.fitb_dpo_pairs", number(&RunConfig::fitb_dpo_pairs));
    f.emplace_back("data.dir", Field{[](RunConfig& c, std::string_view, std::string_view v) { c.data_dir = v; },
                                     [](const RunConfig& c) { return c.data_dir.string(); }});
    f.emplace_back("run.dir", Field{[](RunConfig& c, std::string_view, std::string_view v) { c.run_dir = v; },
                                    [](const RunConfig& c) { return c.run_dir.string(); }});
    f.emplace_back("run.tasks", Field{[](RunConfig& c, std::string_view, std::string_view v) {
                                        std::vector<prompt::Task> t;
                                        for (const auto& s : split_list(v)) t.push_back(prompt::task_from_string(s));
                                        c.tasks = std::move(t);
                                      },
                                      [](const RunConfig& c) {
                                        std::string s;
                                        for (auto t : c.tasks) s += (s.empty() ? "" : ",") + task_slug(t);
                                        return s;
                                      }});
    f.emplace_back("eval.fitb_scoring",
                   Field{[](RunConfig& c, std::string_view k, std::string_view v) {
                           if (v == "mean") {
                             c.fitb_scoring = eval::FitbScoring::mean;
                           } else if (v == "sum") {
                             c.fitb_scoring = eval::FitbScoring::sum;
                           } else {
                             throw ConfigError("bad value '" + std::string(v) + "' for " + std::string(k));
                           }
                         },
                         [](const RunConfig& c) {
                           return std::string(c.fitb_scoring == eval::FitbScoring::mean ? "mean" : "sum");
                         }});
    return f;
  }();
  return table;
}

}  // namespace

void apply(RunConfig& config, std::string_view key, std::string_view value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(config, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::vector<std::pair<std::string, std::string>> to_kv(const RunConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [name, field] : fields()) out.emplace_back(name, field.get(config));
  return out;
}

nlohmann::json to_json(const RunConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : to_kv(config)) j[k] = v;
  return j;
}

train::TrainConfig stage_config(const RunConfig& config, train::Stage stage) {
  auto c = stage == train::Stage::sft ? config.sft : config.dpo;
  c.seed = config.seed;
  return c;
}

train::TrainConfig pretrain_config(const RunConfig& config) {
  auto c = config.pretrain;
  c.seed = config.seed;
  return c;
}

Dataset from_synth(const corpus::SynthCorpus& synth) {
  Dataset d;
  d.captions = synth.captions;
  d.train_outfits = synth.split(corpus::Split::train);
  d.test_outfits = synth.split(corpus::Split::test);
  d.fitb_train = synth.fitb_train;
  d.fitb_test = synth.fitb_test;
  d.cp_train = synth.cp_train;
  d.cp_test = synth.cp_test;
  return d;
}

namespace {

struct Layout {
  fs::path outfits_train, outfits_test, captions, fitb_train, fitb_test, cp_train, cp_test;
};

Layout layout(const fs::path& dir) {
  return {dir / "outfits_train.json", dir / "outfits_test.json", dir / "captions.json",
          dir / "fitb_train.json",    dir / "fitb_test.json",    dir / "cp_train.txt",
          dir / "cp_test.txt"};
}

}  // namespace

std::vector<fs::path> dataset_files(const fs::path& dir) {
  const auto l = layout(dir);
  return {l.outfits_train, l.outfits_test, l.captions, l.fitb_train, l.fitb_test, l.cp_train, l.cp_test};
}

std::vector<fs::path> write_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  const auto l = layout(dir);
  corpus::write_outfits(l.outfits_train, data.train_outfits);
  corpus::write_outfits(l.outfits_test, data.test_outfits);
  corpus::write_captions(l.captions, data.captions);
  corpus::write_fitb(l.fitb_train, data.fitb_train);
  corpus::write_fitb(l.fitb_test, data.fitb_test);
  corpus::write_cp(l.cp_train, data.cp_train);
  corpus::write_cp(l.cp_test, data.cp_test);
  return dataset_files(dir);
}

Dataset load_dataset(const fs::path& dir) {
  const auto l = layout(dir);
  for (const auto& p : dataset_files(dir)) {
    if (!fs::exists(p)) throw ConfigError("missing dataset file " + p.string());
  }
  Dataset d;
  d.train_outfits = corpus::load_outfits(l.outfits_train, corpus::Split::train);
  d.test_outfits = corpus::load_outfits(l.outfits_test, corpus::Split::test);
  corpus::check_disjoint(d.train_outfits, d.test_outfits);
  d.captions = corpus::load_captions(l.captions);
  d.fitb_train = corpus::load_fitb(l.fitb_train);
  d.fitb_test = corpus::load_fitb(l.fitb_test);
  d.cp_train = corpus::load_cp(l.cp_train);
  d.cp_test = corpus::load_cp(l.cp_test);
  std::vector<corpus::Outfit> all = d.train_outfits;
  all.insert(all.end(), d.test_outfits.begin(), d.test_outfits.end());
  std::vector<corpus::FitbExample> fitb = d.fitb_train;
  fitb.insert(fitb.end(), d.fitb_test.begin(), d.fitb_test.end());
  std::vector<corpus::CpExample> cp = d.cp_train;
  cp.insert(cp.end(), d.cp_test.begin(), d.cp_test.end());
  corpus::require_captions(d.captions, all, fitb, cp);
  return d;
}

std::vector<std::string> train_item_pool(const Dataset& data) {
  std::vector<std::string> pool;
  for (const auto& o : data.train_outfits) pool.insert(pool.end(), o.item_ids.begin(), o.item_ids.end());
  return pool;
}

namespace {

template <class T>
std::vector<T> training_subset(const std::vector<T>& items, const RunConfig& config) {
  if (config.train_samples == 0) return items;
  return corpus::sample_subset<T>(items, config.train_samples, config.seed);
}

}  // namespace

std::vector<prompt::PromptRecord> sft_records(const Dataset& data, const RunConfig& config, prompt::Task task) {
  std::vector<prompt::PromptRecord> out;
  if (task == prompt::Task::fitb) {
    for (const auto& e : training_subset(data.fitb_train, config)) out.push_back(prompt::render_sft_fitb(e, data.captions));
  } else {
    for (const auto& e : training_subset(data.cp_train, config)) out.push_back(prompt::render_sft_cp(e, data.captions));
  }
  return out;
}

std::vector<prompt::PreferencePair> dpo_pairs(const Dataset& data, const RunConfig& config, prompt::Task task) {
  std::vector<prompt::PreferencePair> out;
  if (task == prompt::Task::cp) {
    for (const auto& e : training_subset(data.cp_train, config)) out.push_back(prompt::render_dpo_cp(e, data.captions));
    return out;
  }
  std::mt19937_64 rng(config.seed);
  for (const auto& e : training_subset(data.fitb_train, config)) {
    auto pairs = prompt::render_dpo_fitb(e, data.captions);
    if (static_cast<int>(pairs.size()) > config.fitb_dpo_pairs) {
      std::shuffle(pairs.begin(), pairs.end(), rng);
      pairs.resize(static_cast<std::size_t>(config.fitb_dpo_pairs));
    }
    out.insert(out.end(), pairs.begin(), pairs.end());
  }
  return out;
}

train::TrainResult make_base(const Dataset& data, const RunConfig& config, const train::LogSink& sink) {
  if (config.pretrain_records == 0) {
    train::TrainResult r;
    r.checkpoint.base = model::init<float>(config.model, config.seed);
    return r;
  }
  const auto records =
      prompt::background_records(data.captions, train_item_pool(data), config.pretrain_records, config.seed);
  return train::pretrain(records, config.model, pretrain_config(config), sink);
}

eval::MetricsReport evaluate_stage(std::string_view label, const Dataset& data, const RunConfig& config,
                                   const ckpt::Checkpoint* fitb_model, const ckpt::Checkpoint* cp_model) {
  auto ref = [](const ckpt::Checkpoint* c) {
    return eval::ModelRef{&c->base, c->adapters ? &*c->adapters : nullptr};
  };
  eval::MetricsReport out;
  out.strategy = std::string(label);
  out.seed = config.seed;
  if (fitb_model) {
    const auto r = eval::evaluate(out.strategy, ref(fitb_model), {}, data.fitb_test, data.captions, config.seed,
                                  config.fitb_scoring);
    out.fitb_accuracy = r.fitb_accuracy;
    out.n_fitb = r.n_fitb;
  }
  if (cp_model) {
    const auto r = eval::evaluate(out.strategy, ref(cp_model), data.cp_test, {}, data.captions, config.seed);
    out.cp_auc = r.cp_auc;
    out.n_cp = r.n_cp;
  }
  return out;
}

std::string task_slug(prompt::Task task) { return task == prompt::Task::fitb ? "fitb" : "cp"; }

}  // namespace ofit::pipeline
