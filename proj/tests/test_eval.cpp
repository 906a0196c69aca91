#include "doctest.h"
#include "ofit/eval.hpp"
#include "ofit/model.hpp"
#include "ofit/promptgen.hpp"

#include <stdexcept>
#include <algorithm>
#include <cmath>
#include <random>

using namespace ofit;
using namespace ofit::eval;

namespace {

// Area under the ROC curve by sweeping thresholds over distinct scores and
// integrating with the trapezoid rule.
double trapezoid_auc(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thr(s.begin(), s.end());
  std::sort(thr.begin(), thr.end(), std::greater<>());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  const double P = static_cast<double>(std::count(y.begin(), y.end(), 1));
  const double N = static_cast<double>(y.size()) - P;
  double area = 0, px = 0, py = 0;
  for (double t : thr) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    const double x = fp / N, yv = tp / P;
    area += (x - px) * (yv + py) / 2;
    px = x;
    py = yv;
  }
  return area + (1 - px) * (1 + py) / 2;
}

}  // namespace

TEST_CASE("cp score identities") {
  CHECK(cp_score_from_logprobs(-1.3, -1.3) == 0.5);
  CHECK(cp_score_from_logprobs(std::log(9.0) - 4, -4) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(cp_score_from_logprobs(-2, -5) + cp_score_from_logprobs(-5, -2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cp_score_from_logprobs(-1000, -2000) == doctest::Approx(1.0));
  CHECK(std::isfinite(cp_score_from_logprobs(-1e6, -1e6 - 3)));
}

TEST_CASE("auc fixed cases") {
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}) == 0.5);
  CHECK(auc(std::vector<double>{0.8, 0.4, 0.6, 0.2}, std::vector<int>{1, 1, 0, 0}) == 0.75);
  CHECK_THROWS_WITH_AS(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), doctest::Contains("AUC undefined"),
                       std::invalid_argument);
}

TEST_CASE("auc equals trapezoidal ROC area") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    const int levels = trial % 3 == 0 ? 3 : 1000;  // tie-heavy every third set
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / levels;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(std::abs(auc(s, y) - trapezoid_auc(s, y)) < 1e-12);
  }
}

TEST_CASE("choose uses mean or sum and breaks ties low") {
  const std::vector<double> lp = {-6, -4, -4, -9};
  const std::vector<std::size_t> len = {3, 1, 1, 9};
  CHECK(choose(lp, len, FitbScoring::sum) == 1);
  CHECK(choose(lp, len, FitbScoring::mean) == 3);  // -1 per token
  CHECK(choose(std::vector<double>{-2, -2, -2, -2}, std::vector<std::size_t>{1, 1, 1, 1}, FitbScoring::mean) == 0);
}

namespace {

corpus::CaptionMap captions() {
  return {{"a", "red boho tee"},      {"b", "coral boho skirt"}, {"c1", "blue punk boots"},
          {"c2", "red boho sandals"}, {"c3", "tan sporty heels"}, {"c4", "gray minimal flats"}};
}

}  // namespace

TEST_CASE("uniform model picks the first candidate and scores one half") {
  model::ModelConfig c;
  c.max_seq = 1024;
  c.window = 16;
  const auto z = model::zeros<float>(c);
  const corpus::FitbExample f{{"a", "b"}, {"c1", "c2", "c3", "c4"}, 2};
  CHECK(fitb_choose({&z, nullptr}, f, captions()) == 0);
  CHECK(cp_score({&z, nullptr}, {{"a", "b"}, 1}, captions()) == doctest::Approx(0.5));
}

TEST_CASE("fitb_choose agrees with a per-candidate scoring oracle") {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 32;
  c.max_seq = 1024;
  c.window = 32;
  auto caps = captions();
  caps["c3"] = "red boho sandalz";  // differs from c2 in one token
  const corpus::FitbExample f{{"a", "b"}, {"c1", "c2", "c3", "c4"}, 1};
  corpus::FitbExample g = f;
  std::reverse(g.candidates.begin(), g.candidates.end());
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto p = model::init<float>(c, seed, 0.3);
    for (const auto& ex : {f, g}) {
      const auto prompt = tok::encode(prompt::fitb_prompt(ex, caps));
      std::vector<double> means;
      for (const auto& id : ex.candidates) {
        const auto comp = tok::encode(caps.at(id));
        means.push_back(model::sequence_logprob<float>(p, prompt, comp) / static_cast<double>(comp.size()));
      }
      const int want = static_cast<int>(std::max_element(means.begin(), means.end()) - means.begin());
      CHECK(fitb_choose({&p, nullptr}, ex, caps) == want);
    }
  }
}

TEST_CASE("report table and json") {
  std::vector<MetricsReport> rows = {{"Plain LLM", 0.579, 0.29, 10, 10, 1},
                                     {"PEFT LLM (LoRA)", 0.6227, 0.49, 10, 10, 1},
                                     {"PEFT DPO LLM", 0.8103, 0.61, 10, 10, 1},
                                     {"CP only", 0.5, std::nullopt, 4, 0, 1}};
  const auto t = report_table(rows);
  const auto p1 = t.find("Plain LLM"), p2 = t.find("PEFT LLM (LoRA)"), p3 = t.find("PEFT DPO LLM");
  CHECK(p1 < p2);
  CHECK(p2 < p3);
  CHECK(t.find("57.90") != std::string::npos);
  CHECK(t.find("62.27") != std::string::npos);
  CHECK(t.find("81.03") != std::string::npos);
  CHECK(t.find("29.00") != std::string::npos);
  CHECK(t.find("49.00") != std::string::npos);
  CHECK(t.find("61.00") != std::string::npos);
  CHECK(t.find("—") != std::string::npos);

  const auto j = report_json(rows);
  CHECK(j["reports"].size() == 4);
  CHECK(j["reports"][3]["fitb_accuracy"].is_null());
  CHECK(report_from_json(j["reports"][1]) == rows[1]);
  CHECK(report_from_json(j["reports"][3]) == rows[3]);
  CHECK_THROWS(report_table(std::vector<MetricsReport>{}));
}
