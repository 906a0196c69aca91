#include "doctest.h"
#include "ofit/errors.hpp"
#include "ofit/train.hpp"

#include <stdexcept>
#include <cmath>
#include <limits>
#include <random>

using namespace ofit;
using namespace ofit::train;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.window = 8;
  c.d_ff = 32;
  c.max_seq = 96;
  return c;
}

tok::Framed framed(const std::string& p, const std::string& c) { return tok::frame(tok::encode(p), tok::encode(c)); }

std::vector<tok::Framed> batch4() {
  return {framed("ab", "xyz"), framed("abc", "q"), framed("zz", "hello"), framed("", "k")};
}

double sft_oracle(const model::Params<double>& p, const std::vector<tok::Framed>& batch) {
  double total = 0;
  for (const auto& f : batch) {
    const auto logits = model::forward<double>(p, f.ids);
    const std::size_t V = logits.cols();
    double nll = 0;
    int count = 0;
    for (std::size_t t = 0; t + 1 < f.ids.size(); ++t) {
      if (!f.loss_mask[t + 1]) continue;
      const double* row = logits.data.data() + t * V;
      double mx = row[0];
      for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      double s = 0;
      for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - mx);
      nll -= row[f.ids[t + 1]] - mx - std::log(s);
      ++count;
    }
    total += nll / count;
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TEST_CASE("presets") {
  const auto sft = preset("paper", Stage::sft);
  CHECK(sft.lr_max == 2e-4);
  CHECK(sft.warmup_ratio == 0.3);
  CHECK(sft.epochs == 3);
  CHECK(sft.batch == 1);
  CHECK(sft.grad_accum == 4);
  const auto dpo = preset("paper", Stage::dpo);
  CHECK(dpo.lr_max == 1e-8);
  CHECK(dpo.warmup_ratio == 0.1);
  CHECK(dpo.beta == 0.1);
  CHECK_NOTHROW(preset("desk", Stage::sft).validate());
  CHECK_THROWS_AS(preset("fast", Stage::sft), ConfigError);
  TrainConfig bad;
  bad.grad_accum = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("lr schedule") {
  TrainConfig c;
  c.lr_max = 1.0;
  c.warmup_ratio = 0.3;
  // 10 steps: warmup of 3, peak at step 3, linear decay to zero at 10
  CHECK(lr_at(0, 10, c) == 0.0);
  CHECK(lr_at(1, 10, c) == doctest::Approx(1.0 / 3));
  CHECK(lr_at(2, 10, c) == doctest::Approx(2.0 / 3));
  CHECK(lr_at(3, 10, c) == 1.0);
  CHECK(lr_at(4, 10, c) == doctest::Approx(6.0 / 7));
  CHECK(lr_at(10, 10, c) == 0.0);
  for (long s = 1; s < 10; ++s) CHECK(lr_at(s, 10, c) > 0);
  c.warmup_ratio = 0.0;
  CHECK(lr_at(0, 4, c) == 1.0);
  CHECK(lr_at(2, 4, c) == 0.5);
}

TEST_CASE("adamw") {
  TrainConfig c;
  Tensor<float> w({2, 2}, 1.0f), bias({2}, 3.0f);
  TensorRefs<float> refs = {{"w", &w}, {"bias", &bias}};
  auto st = make_opt_state(refs);
  NamedTensors<float> zero = {{"w", Tensor<float>({2, 2})}, {"bias", Tensor<float>({2})}};

  SUBCASE("zero gradient only decays matrices") {
    adamw_step(st, refs, zero, 0.1, c);
    CHECK(bias.data[0] == 3.0f);
    CHECK(w.data[0] == doctest::Approx(1.0 - 0.1 * 0.01));
  }
  SUBCASE("lr zero is a no-op") {
    auto g = zero;
    g[0].second.data = {1, -2, 3, 4};
    adamw_step(st, refs, g, 0.0, c);
    CHECK(w.data == std::vector<float>(4, 1.0f));
    CHECK(bias.data == std::vector<float>(2, 3.0f));
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    c.weight_decay = 0;
    auto g = zero;
    g[1].second.data = {0.5f, -4.0f};
    adamw_step(st, refs, g, 0.01, c);
    CHECK(bias.data[0] == doctest::Approx(3.0 - 0.01).epsilon(1e-6));
    CHECK(bias.data[1] == doctest::Approx(3.0 + 0.01).epsilon(1e-6));
  }
  SUBCASE("non-finite gradient is rejected before any update") {
    auto g = zero;
    g[0].second.data[0] = 0.5f;
    g[1].second.data[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adamw_step(st, refs, g, 0.1, c), doctest::Contains("bias"), NumericError);
    CHECK(w.data[0] == 1.0f);
    CHECK(st.step == 0);
  }
}

TEST_CASE("sft loss matches a direct oracle") {
  const auto p = model::init<double>(tiny(), 3, 0.3);
  const auto b = batch4();
  CHECK(sft_loss<double>(p, nullptr, b).loss == doctest::Approx(sft_oracle(p, b)).epsilon(1e-12));
}

TEST_CASE("uniform model sft loss is ln 260") {
  const auto z = model::zeros<double>(tiny());
  CHECK(sft_loss<double>(z, nullptr, batch4()).loss == doctest::Approx(std::log(260.0)).epsilon(1e-12));
  std::vector<tok::Framed> none = {framed("abc", "")};
  none[0].loss_mask.assign(none[0].loss_mask.size(), 0);
  CHECK_THROWS_WITH(sft_loss<double>(z, nullptr, none), "empty completion batch");
}

TEST_CASE("gradient accumulation equals the full batch") {
  const auto p = model::init<double>(tiny(), 5, 0.3);
  auto adapted = lora::attach<double>(std::make_shared<const model::Params<double>>(p), {}, 9);
  for (auto& l : adapted.adapters.layers) {
    for (auto& s : l) {
      if (s) s->b.data.assign(s->b.data.size(), 0.05);
    }
  }
  const auto b = batch4();
  const auto full = sft_loss<double>(p, &adapted.adapters, b);
  const std::vector<tok::Framed> h1(b.begin(), b.begin() + 2), h2(b.begin() + 2, b.end());
  const auto g1 = sft_loss<double>(p, &adapted.adapters, h1);
  const auto g2 = sft_loss<double>(p, &adapted.adapters, h2);
  CHECK(full.loss == doctest::Approx((g1.loss + g2.loss) / 2).epsilon(1e-12));
  double worst = 0;
  for (std::size_t i = 0; i < full.grads.size(); ++i) {
    for (std::size_t k = 0; k < full.grads[i].second.size(); ++k) {
      const double acc = (g1.grads[i].second.data[k] + g2.grads[i].second.data[k]) / 2;
      worst = std::max(worst, std::abs(acc - full.grads[i].second.data[k]));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("dpo objective") {
  const double beta = 0.1;
  CHECK(dpo_objective(-5, -7, -5, -7, beta).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // loss falls as the chosen log-prob rises
  double prev = std::numeric_limits<double>::infinity();
  for (double pc = -20; pc <= 20; pc += 0.5) {
    const double l = dpo_objective(pc, -3, -4, -3, beta).loss;
    CHECK(l < prev);
    prev = l;
  }
  for (double pc : {-40.0, -3.0, 0.0, 12.5}) {
    const double h = 1e-5;
    const double fd = (dpo_objective(pc + h, -2, -1, -3, beta).loss - dpo_objective(pc - h, -2, -1, -3, beta).loss) /
                      (2 * h);
    const auto t = dpo_objective(pc, -2, -1, -3, beta);
    CHECK(t.d_chosen == doctest::Approx(fd).epsilon(1e-7));
    CHECK(t.d_rejected == doctest::Approx(-fd).epsilon(1e-7));
    CHECK(t.d_chosen == doctest::Approx(-beta / (1 + std::exp(t.delta))).epsilon(1e-12));
  }
  CHECK(std::isfinite(dpo_objective(-1e5, 0, 0, 0, 1).loss));
  CHECK(dpo_objective(1e5, 0, 0, 0, 1).loss == 0.0);
}

TEST_CASE("dpo loss is ln 2 when policy equals reference") {
  const auto p = model::init<float>(tiny(), 2, 0.3);
  std::vector<DpoExample> ex = {make_dpo_example({"pick", "red", "blue", prompt::Task::fitb}),
                                make_dpo_example({"score", "1", "0", prompt::Task::cp})};
  score_reference(p, nullptr, ex);
  const auto r = dpo_loss<float>(p, nullptr, ex, 0.1);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(mean_margin(p, nullptr, ex, 0.1) == doctest::Approx(0.0).epsilon(1e-6));
  // reference uses EOS-inclusive framing
  CHECK(ex[0].chosen.targets.back().token == tok::kEos);
}

TEST_CASE("analytic gradients match central differences") {
  const std::vector<double> eps = {1e-5};
  for (const auto& c : gradcheck_suite(0, eps)) {
    INFO(c.loss << " " << c.mode << " worst " << c.result.worst);
    CHECK(c.result.max_rel_error < 1e-4);
    CHECK(c.result.coordinates >= 64);
  }
}

TEST_CASE("grad_check flags a wrong gradient") {
  Tensor<double> w({3}, 0.0);
  w.data = {1, 2, 3};
  TensorRefs<double> refs = {{"w", &w}};
  auto loss = [&] { return w.data[0] * w.data[0] + 3 * w.data[1] + std::sin(w.data[2]); };
  NamedTensors<double> good = {{"w", Tensor<double>({3})}};
  good[0].second.data = {2, 3, std::cos(3.0)};
  CHECK(grad_check(refs, good, loss, 1e-5, 3, 0).max_rel_error < 1e-8);
  auto bad = good;
  bad[0].second.data[1] = 3.3;
  const auto r = grad_check(refs, bad, loss, 1e-5, 3, 0);
  CHECK(r.max_rel_error > 1e-2);
  CHECK(r.worst == "w[1]");
  CHECK(w.data == std::vector<double>{1, 2, 3});
}

namespace {

std::vector<prompt::PromptRecord> toy_records() {
  std::vector<prompt::PromptRecord> r;
  const char* words[] = {"red", "blue", "teal", "gold"};
  for (int i = 0; i < 8; ++i) {
    r.push_back({std::string("Human: item ") + std::to_string(i) + "\nAssistant:", words[i % 4],
                 i % 2 ? prompt::Task::cp : prompt::Task::fitb});
  }
  return r;
}

TrainConfig fast() {
  TrainConfig c;
  c.lr_max = 2e-2;
  c.warmup_ratio = 0.1;
  c.epochs = 4;
  c.grad_accum = 2;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("sft freezes the base, lowers the loss and is deterministic") {
  ckpt::Checkpoint start;
  start.base = model::init<float>(tiny(), 1, 0.3);
  lora::LoraConfig lc;
  lc.rank = 2;
  const auto recs = toy_records();
  std::vector<LogEntry> seen;
  const auto a = train_sft(recs, start, lc, fast(), [&](const LogEntry& e) { seen.push_back(e); });
  CHECK(a.checkpoint.base == start.base);
  CHECK(a.steps == 4 * 4);
  CHECK(seen.size() == 16);
  CHECK(seen.front().lr == 0.0);
  for (const auto& e : seen) CHECK((e.task == "FITB" || e.task == "CP" || e.task == "mixed"));
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());
  const auto b = train_sft(recs, start, lc, fast());
  CHECK(b.checkpoint.adapters->layers == a.checkpoint.adapters->layers);
  CHECK(b.log.back().loss == a.log.back().loss);
  auto other = fast();
  other.seed = 12;
  CHECK(train_sft(recs, start, lc, other).checkpoint.adapters->layers != a.checkpoint.adapters->layers);
  CHECK(to_jsonl(seen[2]).find("\"step\":2") != std::string::npos);
}

TEST_CASE("dpo raises the preference margin") {
  ckpt::Checkpoint start;
  start.base = model::init<float>(tiny(), 1, 0.3);
  lora::LoraConfig lc;
  lc.rank = 2;
  auto sft_cfg = fast();
  sft_cfg.epochs = 1;
  const auto sft = train_sft(toy_records(), start, lc, sft_cfg);
  std::vector<prompt::PreferencePair> pairs;
  for (int i = 0; i < 8; ++i) {
    pairs.push_back({"Human: look " + std::to_string(i) + "\nAssistant:", "good", "bad", prompt::Task::fitb});
  }
  auto cfg = fast();
  cfg.lr_max = 5e-3;
  const auto out = train_dpo(pairs, sft.checkpoint, cfg);
  CHECK(out.checkpoint.base == start.base);
  std::vector<DpoExample> ex;
  for (const auto& p : pairs) ex.push_back(make_dpo_example(p));
  score_reference(sft.checkpoint.base, &*sft.checkpoint.adapters, ex);
  CHECK(mean_margin(out.checkpoint.base, &*out.checkpoint.adapters, ex, cfg.beta) > 0.05);
  CHECK(out.log.front().loss == doctest::Approx(std::log(2.0)).epsilon(1e-5));
  CHECK_THROWS_AS(train_dpo(pairs, start, cfg), ConfigError);
}

TEST_CASE("dpo at lr 1e-4 still raises the margin") {
  ckpt::Checkpoint start;
  start.base = model::init<float>(tiny(), 2, 0.3);
  lora::LoraConfig lc;
  lc.rank = 2;
  auto sft_cfg = fast();
  sft_cfg.epochs = 1;
  const auto sft = train_sft(toy_records(), start, lc, sft_cfg);
  std::vector<prompt::PreferencePair> pairs;
  for (int i = 0; i < 8; ++i) {
    pairs.push_back({"Human: pick " + std::to_string(i) + "\nAssistant:", "yes", "no", prompt::Task::cp});
  }
  auto cfg = preset("desk", Stage::dpo);
  cfg.lr_max = 1e-4;
  cfg.epochs = 2;
  std::vector<DpoExample> ex;
  for (const auto& p : pairs) ex.push_back(make_dpo_example(p));
  score_reference(sft.checkpoint.base, &*sft.checkpoint.adapters, ex);
  const double before = mean_margin(sft.checkpoint.base, &*sft.checkpoint.adapters, ex, cfg.beta);
  const auto out = train_dpo(pairs, sft.checkpoint, cfg);
  CHECK(mean_margin(out.checkpoint.base, &*out.checkpoint.adapters, ex, cfg.beta) > before);
}
