#include "ofit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "ofit/errors.hpp"
#include "ofit/model.hpp"
#include "ofit/promptgen.hpp"

namespace ofit::eval {

namespace {

constexpr std::size_t kChunk = 8;

}  // namespace

double cp_score_from_logprobs(double a, double b) {
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return ea / (ea + eb);
}

std::vector<double> cp_scores(ModelRef model, std::span<const corpus::CpExample> examples,
                              const corpus::CaptionMap& captions) {
  const std::vector<int> one = tok::encode(prompt::score_string(1));
  const std::vector<int> zero = tok::encode(prompt::score_string(0));
  std::vector<double> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    std::vector<model::TargetSequence> seqs;
    const std::size_t end = std::min(examples.size(), start + kChunk);
    for (std::size_t i = start; i < end; ++i) {
      const auto p = tok::encode(prompt::cp_prompt(examples[i], captions));
      seqs.push_back(model::conditional(p, one, false));
      seqs.push_back(model::conditional(p, zero, false));
    }
    const auto lp = model::sum_logprobs<float>(*model.base, model.adapters, seqs);
    for (std::size_t k = 0; k < end - start; ++k) out.push_back(cp_score_from_logprobs(lp[2 * k], lp[2 * k + 1]));
  }
  return out;
}

double cp_score(ModelRef model, const corpus::CpExample& example, const corpus::CaptionMap& captions) {
  return cp_scores(model, std::span(&example, 1), captions).front();
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank-sum form: each positive counts the negatives strictly below it,
  // plus half of those tied with it.
  double pairs = 0;
  std::size_t neg_below = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++pos_here;
      else if (labels[order[j]] == 0) ++neg_here;
      else throw std::invalid_argument("labels must be 0 or 1");
      ++j;
    }
    pairs += static_cast<double>(pos_here) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_here));
    neg_below += neg_here;
    n_pos += pos_here;
    n_neg += neg_here;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("AUC undefined: need both positive and negative labels");
  return pairs / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

int choose(std::span<const double> logprobs, std::span<const std::size_t> lengths, FitbScoring scoring) {
  int best = -1;
  double best_score = 0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    double s = logprobs[i];
    if (scoring == FitbScoring::mean) s = lengths[i] ? s / static_cast<double>(lengths[i]) : 0.0;
    if (best < 0 || s > best_score) {
      best = static_cast<int>(i);
      best_score = s;
    }
  }
  return best;
}

std::vector<int> fitb_choices(ModelRef model, std::span<const corpus::FitbExample> examples,
                              const corpus::CaptionMap& captions, FitbScoring scoring) {
  std::vector<int> out;
  out.reserve(examples.size());
  const std::size_t chunk = std::max<std::size_t>(1, kChunk / 4);
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const std::size_t end = std::min(examples.size(), start + chunk);
    std::vector<model::TargetSequence> seqs;
    std::vector<std::size_t> lengths;
    for (std::size_t i = start; i < end; ++i) {
      corpus::validate(examples[i]);
      const auto p = tok::encode(prompt::fitb_prompt(examples[i], captions));
      for (const auto& id : examples[i].candidates) {
        const auto c = tok::encode(captions.at(id));
        lengths.push_back(c.size());
        seqs.push_back(model::conditional(p, c, false));
      }
    }
    const auto lp = model::sum_logprobs<float>(*model.base, model.adapters, seqs);
    for (std::size_t k = 0; k < end - start; ++k) {
      out.push_back(choose(std::span(lp).subspan(4 * k, 4), std::span(lengths).subspan(4 * k, 4), scoring));
    }
  }
  return out;
}

int fitb_choose(ModelRef model, const corpus::FitbExample& example, const corpus::CaptionMap& captions,
                FitbScoring scoring) {
  return fitb_choices(model, std::span(&example, 1), captions, scoring).front();
}

MetricsReport evaluate(const std::string& strategy, ModelRef model, std::span<const corpus::CpExample> cp,
                       std::span<const corpus::FitbExample> fitb, const corpus::CaptionMap& captions,
                       std::uint64_t seed, FitbScoring scoring) {
  if (cp.empty() && fitb.empty()) throw std::invalid_argument("nothing to evaluate");
  MetricsReport r;
  r.strategy = strategy;
  r.seed = seed;
  if (!cp.empty()) {
    const auto scores = cp_scores(model, cp, captions);
    std::vector<int> labels;
    for (const auto& e : cp) labels.push_back(e.label);
    r.cp_auc = auc(scores, labels);
    r.n_cp = cp.size();
  }
  if (!fitb.empty()) {
    const auto picks = fitb_choices(model, fitb, captions, scoring);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < fitb.size(); ++i) correct += picks[i] == fitb[i].answer_index ? 1 : 0;
    r.fitb_accuracy = static_cast<double>(correct) / static_cast<double>(fitb.size());
    r.n_fitb = fitb.size();
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"strategy", r.strategy}, {"n_examples", r.n_examples()}, {"n_cp", r.n_cp},
                      {"n_fitb", r.n_fitb},     {"seed", r.seed}};
  j["cp_auc"] = r.cp_auc ? nlohmann::json(*r.cp_auc) : nlohmann::json(nullptr);
  j["fitb_accuracy"] = r.fitb_accuracy ? nlohmann::json(*r.fitb_accuracy) : nlohmann::json(nullptr);
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.strategy = j.at("strategy").get<std::string>();
    if (j.contains("cp_auc") && !j["cp_auc"].is_null()) r.cp_auc = j["cp_auc"].get<double>();
    if (j.contains("fitb_accuracy") && !j["fitb_accuracy"].is_null()) r.fitb_accuracy = j["fitb_accuracy"].get<double>();
    r.n_cp = j.value("n_cp", std::size_t{0});
    r.n_fitb = j.value("n_fitb", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metrics report: ") + e.what());
  }
  for (const auto& m : {r.cp_auc, r.fitb_accuracy}) {
    if (m && (*m < 0 || *m > 1)) throw ValidationError("metric outside [0, 1] in report " + r.strategy);
  }
  return r;
}

namespace {

std::string percent(const std::optional<double>& v) {
  if (!v) return "—";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

// Pads to `width` display columns (the dash is one column, three bytes).
std::string pad_left(const std::string& s, std::size_t width) {
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80 ? 1 : 0;
  return cols >= width ? s : std::string(width - cols, ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string report_table(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw std::invalid_argument("no reports to render");
  std::size_t name_w = 8;
  for (const auto& r : reports) name_w = std::max(name_w, r.strategy.size());
  const std::size_t col_w = 12;
  std::string out = pad_right("Strategy", name_w) + "  " + pad_left("CP AUC (%)", col_w) + "  " +
                    pad_left("FITB acc (%)", col_w) + "\n";
  out += std::string(name_w + 2 * (col_w + 2), '-') + "\n";
  for (const auto& r : reports) {
    out += pad_right(r.strategy, name_w) + "  " + pad_left(percent(r.cp_auc), col_w) + "  " +
           pad_left(percent(r.fitb_accuracy), col_w) + "\n";
  }
  return out;
}

nlohmann::json report_json(std::span<const MetricsReport> reports) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) rows.push_back(to_json(r));
  return {{"reports", rows}};
}

}  // namespace ofit::eval
