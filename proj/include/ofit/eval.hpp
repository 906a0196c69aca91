#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ofit/corpus.hpp"
#include "ofit/lora.hpp"
#include "ofit/params.hpp"

namespace ofit::eval {

// A model to score with: base weights, optionally adapted.
struct ModelRef {
  const model::Params<float>* base = nullptr;
  const lora::Adapters<float>* adapters = nullptr;
};

// exp(a) / (exp(a) + exp(b)) for a = log p("1"), b = log p("0").
double cp_score_from_logprobs(double a, double b);

double cp_score(ModelRef model, const corpus::CpExample& example, const corpus::CaptionMap& captions);
std::vector<double> cp_scores(ModelRef model, std::span<const corpus::CpExample> examples,
                              const corpus::CaptionMap& captions);

// Mann-Whitney AUC with ties counted as one half. Throws std::invalid_argument
// ("AUC undefined") unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

enum class FitbScoring { mean, sum };

// Index of the best candidate given each candidate's summed log-prob and
// token count; ties go to the lowest index.
int choose(std::span<const double> logprobs, std::span<const std::size_t> lengths, FitbScoring scoring);

int fitb_choose(ModelRef model, const corpus::FitbExample& example, const corpus::CaptionMap& captions,
                FitbScoring scoring = FitbScoring::mean);
std::vector<int> fitb_choices(ModelRef model, std::span<const corpus::FitbExample> examples,
                              const corpus::CaptionMap& captions, FitbScoring scoring = FitbScoring::mean);

struct MetricsReport {
  std::string strategy;
  std::optional<double> cp_auc;
  std::optional<double> fitb_accuracy;
  std::size_t n_cp = 0;
  std::size_t n_fitb = 0;
  std::uint64_t seed = 0;

  std::size_t n_examples() const { return n_cp + n_fitb; }
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

// Either set may be empty (its metric is then absent), not both.
MetricsReport evaluate(const std::string& strategy, ModelRef model, std::span<const corpus::CpExample> cp,
                       std::span<const corpus::FitbExample> fitb, const corpus::CaptionMap& captions,
                       std::uint64_t seed, FitbScoring scoring = FitbScoring::mean);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

// Fixed-width table, one row per report in the given order.
std::string report_table(std::span<const MetricsReport> reports);
nlohmann::json report_json(std::span<const MetricsReport> reports);

}  // namespace ofit::eval
