#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "manifest.hpp"
#include "ofit/checkpoint.hpp"
#include "ofit/errors.hpp"
#include "ofit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ofit;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string data, run;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Preset first, then the config file, then --set, then dedicated flags.
pipeline::RunConfig resolve(const Common& c) {
  std::vector<std::pair<std::string, std::string>> file_kv;
  if (!c.config_file.empty()) file_kv = pipeline::parse_config(slurp(c.config_file));
  std::string preset = "desk";
  for (const auto& [k, v] : file_kv) {
    if (k == "preset") preset = v;
  }
  if (!c.preset.empty()) preset = c.preset;
  auto cfg = pipeline::preset_config(preset);
  for (const auto& [k, v] : file_kv) {
    if (k != "preset") pipeline::apply(cfg, k, v);
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    pipeline::apply(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.data.empty()) cfg.data_dir = c.data;
  if (!c.run.empty()) cfg.run_dir = c.run;
  cfg.validate();
  return cfg;
}

class JsonlLog {
 public:
  JsonlLog(const fs::path& path, std::string label) : out_(path, std::ios::binary), label_(std::move(label)) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  train::LogSink sink() {
    return [this](const train::LogEntry& e) {
      out_ << train::to_jsonl(e) << '\n';
      if ((e.step + 1) % 100 == 0) {
        std::fprintf(stderr, "%s step %ld lr %.3g loss %.4f\n", label_.c_str(), e.step + 1, e.lr, e.loss);
      }
    };
  }

 private:
  std::ofstream out_;
  std::string label_;
};

void print_epochs(const std::string& label, const train::TrainResult& r) {
  std::printf("%s: %ld steps, epoch loss", label.c_str(), r.steps);
  for (double l : r.epoch_loss) std::printf(" %.4f", l);
  std::printf("\n");
}

json stage_meta(const pipeline::RunConfig& cfg, const std::string& stage, const std::string& task) {
  json m = {{"stage", stage}, {"seed", cfg.seed}, {"config", pipeline::to_json(cfg)}};
  if (!task.empty()) m["task"] = task;
  return m;
}

void save_tracked(const ckpt::Checkpoint& c, const fs::path& path, cli::Manifest& m) {
  ckpt::save(c, path);
  m.artifact(path);
  m.artifact(ckpt::sidecar_path(path));
}

fs::path stage_path(const fs::path& run, const std::string& stage, prompt::Task task) {
  return run / (stage + "_" + pipeline::task_slug(task) + ".ckpt");
}

int cmd_synth(const pipeline::RunConfig& cfg, std::size_t n) {
  const auto synth = corpus::synth_corpus(n, cfg.seed);
  const auto data = pipeline::from_synth(synth);
  cli::Manifest m("synth", pipeline::to_json(cfg));
  for (const auto& p : pipeline::write_dataset(data, cfg.data_dir)) m.artifact(p);
  m.count("outfits_train", static_cast<long long>(data.train_outfits.size()));
  m.count("outfits_test", static_cast<long long>(data.test_outfits.size()));
  m.count("items", static_cast<long long>(data.captions.size()));
  m.count("fitb_train", static_cast<long long>(data.fitb_train.size()));
  m.count("fitb_test", static_cast<long long>(data.fitb_test.size()));
  m.count("cp_train", static_cast<long long>(data.cp_train.size()));
  m.count("cp_test", static_cast<long long>(data.cp_test.size()));
  m.write(cfg.data_dir);
  std::printf("synth: %zu train / %zu test outfits, %zu items, FITB %zu/%zu, CP %zu/%zu -> %s\n",
              data.train_outfits.size(), data.test_outfits.size(), data.captions.size(), data.fitb_train.size(),
              data.fitb_test.size(), data.cp_train.size(), data.cp_test.size(), cfg.data_dir.string().c_str());
  return 0;
}

struct IngestPaths {
  std::string outfits_train, outfits_test, captions, fitb_train, fitb_test, cp_train, cp_test;
};

int cmd_ingest(const pipeline::RunConfig& cfg, const IngestPaths& in) {
  cli::Manifest m("ingest", pipeline::to_json(cfg));
  pipeline::Dataset d;
  d.train_outfits = corpus::load_outfits(in.outfits_train, corpus::Split::train);
  d.test_outfits = corpus::load_outfits(in.outfits_test, corpus::Split::test);
  corpus::check_disjoint(d.train_outfits, d.test_outfits);
  std::vector<corpus::Outfit> all = d.train_outfits;
  all.insert(all.end(), d.test_outfits.begin(), d.test_outfits.end());
  d.captions = corpus::load_captions(in.captions, all);
  d.fitb_train = corpus::load_fitb(in.fitb_train);
  d.fitb_test = corpus::load_fitb(in.fitb_test);
  for (const auto& p : {in.outfits_train, in.outfits_test, in.captions, in.fitb_train, in.fitb_test}) m.input(p);

  std::vector<std::string> warnings;
  if (!in.cp_train.empty()) {
    d.cp_train = corpus::load_cp(in.cp_train);
    m.input(in.cp_train);
  } else {
    d.cp_train = corpus::make_cp_negatives(d.train_outfits, cfg.cp_neg_ratio, cfg.seed, &warnings);
  }
  if (!in.cp_test.empty()) {
    d.cp_test = corpus::load_cp(in.cp_test);
    m.input(in.cp_test);
  } else {
    d.cp_test = corpus::make_cp_negatives(d.test_outfits, cfg.cp_neg_ratio, cfg.seed + 1, &warnings);
  }
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  std::vector<corpus::FitbExample> fitb = d.fitb_train;
  fitb.insert(fitb.end(), d.fitb_test.begin(), d.fitb_test.end());
  std::vector<corpus::CpExample> cp = d.cp_train;
  cp.insert(cp.end(), d.cp_test.begin(), d.cp_test.end());
  corpus::require_captions(d.captions, all, fitb, cp);

  for (const auto& p : pipeline::write_dataset(d, cfg.data_dir)) m.artifact(p);
  m.count("outfits_train", static_cast<long long>(d.train_outfits.size()));
  m.count("outfits_test", static_cast<long long>(d.test_outfits.size()));
  m.count("cp_train", static_cast<long long>(d.cp_train.size()));
  m.count("cp_test", static_cast<long long>(d.cp_test.size()));
  m.write(cfg.data_dir);
  std::printf("ingest: %zu train / %zu test outfits, FITB %zu/%zu, CP %zu/%zu -> %s\n", d.train_outfits.size(),
              d.test_outfits.size(), d.fitb_train.size(), d.fitb_test.size(), d.cp_train.size(), d.cp_test.size(),
              cfg.data_dir.string().c_str());
  return 0;
}

int cmd_prompts(const pipeline::RunConfig& cfg, const fs::path& out) {
  const auto data = pipeline::load_dataset(cfg.data_dir);
  fs::create_directories(out);
  cli::Manifest m("prompts", pipeline::to_json(cfg));
  for (const auto& p : pipeline::dataset_files(cfg.data_dir)) m.input(p);
  for (auto task : cfg.tasks) {
    const auto slug = pipeline::task_slug(task);
    const auto sft = pipeline::sft_records(data, cfg, task);
    const auto dpo = pipeline::dpo_pairs(data, cfg, task);
    {
      std::ofstream f(out / ("sft_" + slug + ".jsonl"), std::ios::binary);
      for (const auto& r : sft) f << prompt::to_jsonl(r) << '\n';
    }
    {
      std::ofstream f(out / ("dpo_" + slug + ".jsonl"), std::ios::binary);
      for (const auto& p : dpo) f << prompt::to_jsonl(p) << '\n';
    }
    m.artifact(out / ("sft_" + slug + ".jsonl"));
    m.artifact(out / ("dpo_" + slug + ".jsonl"));
    m.count("sft_" + slug, static_cast<long long>(sft.size()));
    m.count("dpo_pairs_" + slug, static_cast<long long>(dpo.size()));
    std::printf("%s: %zu SFT records, %zu DPO pairs\n", slug.c_str(), sft.size(), dpo.size());
  }
  m.write(out);
  return 0;
}

int cmd_train_sft(const pipeline::RunConfig& cfg, const std::string& base_path) {
  const auto data = pipeline::load_dataset(cfg.data_dir);
  fs::create_directories(cfg.run_dir);
  cli::Manifest m("train-sft", pipeline::to_json(cfg));
  for (const auto& p : pipeline::dataset_files(cfg.data_dir)) m.input(p);

  ckpt::Checkpoint base;
  if (!base_path.empty()) {
    base = ckpt::load(base_path);
    m.input(base_path);
    if (base.adapters) throw ConfigError("--base must be a checkpoint without adapters");
  } else {
    JsonlLog log(cfg.run_dir / "pretrain.log.jsonl", "pretrain");
    auto res = pipeline::make_base(data, cfg, log.sink());
    if (res.steps > 0) print_epochs("pretrain", res);
    base = std::move(res.checkpoint);
    base.meta = stage_meta(cfg, "base", "");
    m.artifact(cfg.run_dir / "pretrain.log.jsonl");
  }
  save_tracked(base, cfg.run_dir / "base.ckpt", m);

  for (auto task : cfg.tasks) {
    const auto slug = pipeline::task_slug(task);
    const auto records = pipeline::sft_records(data, cfg, task);
    JsonlLog log(cfg.run_dir / ("sft_" + slug + ".log.jsonl"), "sft " + slug);
    auto res = train::train_sft(records, base, cfg.lora, pipeline::stage_config(cfg, train::Stage::sft), log.sink());
    print_epochs("sft " + slug, res);
    const std::size_t trainable = res.checkpoint.adapters->parameter_count();
    const std::size_t total = trainable + res.checkpoint.base.parameter_count();
    std::printf("trainable parameters: %zu of %zu (%.2f%%)\n", trainable, total,
                100.0 * static_cast<double>(trainable) / static_cast<double>(total));
    res.checkpoint.meta = stage_meta(cfg, "sft", slug);
    save_tracked(res.checkpoint, stage_path(cfg.run_dir, "sft", task), m);
    m.artifact(cfg.run_dir / ("sft_" + slug + ".log.jsonl"));
    m.count("sft_records_" + slug, static_cast<long long>(records.size()));
    m.count("trainable_parameters", static_cast<long long>(trainable));
    m.count("total_parameters", static_cast<long long>(total));
  }
  m.write(cfg.run_dir);
  return 0;
}

int cmd_train_dpo(const pipeline::RunConfig& cfg) {
  const auto data = pipeline::load_dataset(cfg.data_dir);
  cli::Manifest m("train-dpo", pipeline::to_json(cfg));
  for (const auto& p : pipeline::dataset_files(cfg.data_dir)) m.input(p);
  for (auto task : cfg.tasks) {
    const auto slug = pipeline::task_slug(task);
    const auto sft_path = stage_path(cfg.run_dir, "sft", task);
    if (!fs::exists(sft_path)) throw ConfigError("missing " + sft_path.string() + " (run train-sft first)");
    const auto sft = ckpt::load(sft_path);
    m.input(sft_path);
    const auto pairs = pipeline::dpo_pairs(data, cfg, task);
    std::printf("%s: %zu DPO pairs\n", slug.c_str(), pairs.size());
    JsonlLog log(cfg.run_dir / ("dpo_" + slug + ".log.jsonl"), "dpo " + slug);
    auto res = train::train_dpo(pairs, sft, pipeline::stage_config(cfg, train::Stage::dpo), log.sink());
    print_epochs("dpo " + slug, res);
    res.checkpoint.meta = stage_meta(cfg, "dpo", slug);
    save_tracked(res.checkpoint, stage_path(cfg.run_dir, "dpo", task), m);
    m.artifact(cfg.run_dir / ("dpo_" + slug + ".log.jsonl"));
    m.count("dpo_pairs_" + slug, static_cast<long long>(pairs.size()));
  }
  m.write(cfg.run_dir);
  return 0;
}

int cmd_eval(const pipeline::RunConfig& cfg, std::string out) {
  const auto data = pipeline::load_dataset(cfg.data_dir);
  cli::Manifest m("eval", pipeline::to_json(cfg));
  for (const auto& p : pipeline::dataset_files(cfg.data_dir)) m.input(p);

  std::vector<eval::MetricsReport> rows;
  const auto base_path = cfg.run_dir / "base.ckpt";
  if (fs::exists(base_path)) {
    const auto base = ckpt::load(base_path);
    m.input(base_path);
    const bool fitb = std::count(cfg.tasks.begin(), cfg.tasks.end(), prompt::Task::fitb) > 0;
    const bool cp = std::count(cfg.tasks.begin(), cfg.tasks.end(), prompt::Task::cp) > 0;
    rows.push_back(pipeline::evaluate_stage(pipeline::kPlainLabel, data, cfg, fitb ? &base : nullptr,
                                            cp ? &base : nullptr));
  }
  const std::pair<std::string, std::string_view> stages[] = {{"sft", pipeline::kSftLabel},
                                                              {"dpo", pipeline::kDpoLabel}};
  for (const auto& [stage, label] : stages) {
    std::optional<ckpt::Checkpoint> fitb, cp;
    for (auto task : cfg.tasks) {
      const auto p = stage_path(cfg.run_dir, stage, task);
      if (!fs::exists(p)) continue;
      m.input(p);
      (task == prompt::Task::fitb ? fitb : cp) = ckpt::load(p);
    }
    if (!fitb && !cp) continue;
    rows.push_back(pipeline::evaluate_stage(label, data, cfg, fitb ? &*fitb : nullptr, cp ? &*cp : nullptr));
  }
  if (rows.empty()) throw ConfigError("no checkpoints in " + cfg.run_dir.string());

  std::cout << eval::report_table(rows);
  if (out.empty()) out = (cfg.run_dir / "report.json").string();
  std::ofstream(out, std::ios::binary) << eval::report_json(rows).dump(2) << '\n';
  m.artifact(out);
  m.write(cfg.run_dir);
  return 0;
}

int cmd_gradcheck(const pipeline::RunConfig& cfg, std::size_t samples) {
  const std::vector<double> eps = {1e-4, 1e-5, 1e-6};
  const auto cases = train::gradcheck_suite(cfg.seed, eps, samples);
  std::printf("%-5s %-5s %-8s %-12s %s\n", "loss", "mode", "eps", "max_rel_err", "coords");
  double worst = 0;
  json results = json::array();
  for (const auto& c : cases) {
    std::printf("%-5s %-5s %-8.0e %-12.3e %zu\n", c.loss.c_str(), c.mode.c_str(), c.eps, c.result.max_rel_error,
                c.result.coordinates);
    results.push_back({{"loss", c.loss},
                       {"mode", c.mode},
                       {"eps", c.eps},
                       {"max_rel_error", c.result.max_rel_error},
                       {"coordinates", c.result.coordinates},
                       {"worst", c.result.worst}});
    if (c.eps == 1e-5) worst = std::max(worst, c.result.max_rel_error);
  }
  const bool ok = worst < 1e-4;
  std::printf("max relative error at eps 1e-5: %.3e (%s)\n", worst, ok ? "ok" : "FAILED");
  cli::Manifest m("gradcheck", pipeline::to_json(cfg));
  m.note("results", results);
  m.write(cfg.run_dir);
  return ok ? 0 : 1;
}

int cmd_report(const pipeline::RunConfig& cfg, const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<eval::MetricsReport> rows;
  cli::Manifest m("report", pipeline::to_json(cfg));
  for (const auto& path : inputs) {
    json j;
    try {
      j = json::parse(slurp(path));
    } catch (const json::parse_error& e) {
      throw ParseError(path + ": " + e.what());
    }
    m.input(path);
    if (j.contains("reports")) {
      for (const auto& r : j["reports"]) rows.push_back(eval::report_from_json(r));
    } else {
      rows.push_back(eval::report_from_json(j));
    }
  }
  std::cout << eval::report_table(rows);
  if (!out.empty()) {
    std::ofstream(out, std::ios::binary) << eval::report_json(rows).dump(2) << '\n';
    m.artifact(out);
  }
  m.write(out.empty() ? cfg.run_dir : fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Outfit compatibility fine-tuning: SFT with LoRA adapters, then DPO"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--preset", common.preset, "paper or desk")->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--seed", common.seed, "run seed");
  app.add_option("--set", common.sets, "override one config key (key=value)");
  app.add_option("--data", common.data, "dataset directory");
  app.add_option("--run", common.run, "run directory for checkpoints, logs and reports");

  auto* synth = app.add_subcommand("synth", "generate a synthetic rule-governed corpus");
  std::size_t synth_n = 500;
  synth->add_option("--n", synth_n, "number of outfits")->check(CLI::Range(8, 1000000));

  auto* ingest = app.add_subcommand("ingest", "validate Polyvore-format files into a dataset directory");
  IngestPaths ip;
  ingest->add_option("--outfits-train", ip.outfits_train)->required()->check(CLI::ExistingFile);
  ingest->add_option("--outfits-test", ip.outfits_test)->required()->check(CLI::ExistingFile);
  ingest->add_option("--captions", ip.captions)->required()->check(CLI::ExistingFile);
  ingest->add_option("--fitb-train", ip.fitb_train)->required()->check(CLI::ExistingFile);
  ingest->add_option("--fitb-test", ip.fitb_test)->required()->check(CLI::ExistingFile);
  ingest->add_option("--cp-train", ip.cp_train, "omit to build same-category negatives")->check(CLI::ExistingFile);
  ingest->add_option("--cp-test", ip.cp_test, "omit to build same-category negatives")->check(CLI::ExistingFile);

  auto* prompts = app.add_subcommand("prompts", "write SFT records and DPO pairs as JSON lines");
  std::string prompts_out = "prompts";
  prompts->add_option("--out", prompts_out, "output directory");

  auto* sft = app.add_subcommand("train-sft", "pretrain a base (or load one) and train LoRA adapters");
  std::string base_path;
  sft->add_option("--base", base_path, "start from this base checkpoint")->check(CLI::ExistingFile);

  auto* dpo = app.add_subcommand("train-dpo", "continue the SFT adapters with DPO");

  auto* ev = app.add_subcommand("eval", "score every stage found in the run directory");
  std::string eval_out;
  ev->add_option("--out", eval_out, "report JSON path (default <run>/report.json)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of both losses");
  std::size_t gc_samples = 256;
  gc->add_option("--samples", gc_samples, "coordinates per case")->check(CLI::Range(1, 100000));

  auto* rep = app.add_subcommand("report", "merge report JSON files into one table");
  std::vector<std::string> rep_in;
  std::string rep_out;
  rep->add_option("--in", rep_in, "report JSON files")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", rep_out, "merged JSON output");

  for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    const auto cfg = resolve(common);
    if (synth->parsed()) return cmd_synth(cfg, synth_n);
    if (ingest->parsed()) return cmd_ingest(cfg, ip);
    if (prompts->parsed()) return cmd_prompts(cfg, prompts_out);
    if (sft->parsed()) return cmd_train_sft(cfg, base_path);
    if (dpo->parsed()) return cmd_train_dpo(cfg);
    if (ev->parsed()) return cmd_eval(cfg, eval_out);
    if (gc->parsed()) return cmd_gradcheck(cfg, gc_samples);
    if (rep->parsed()) return cmd_report(cfg, rep_in, rep_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
