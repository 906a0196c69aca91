#include "doctest.h"
#include "ofit/errors.hpp"
#include "ofit/lora.hpp"
#include "ofit/model.hpp"

#include <stdexcept>
#include <Eigen/Dense>
#include <random>

using namespace ofit;
using namespace ofit::lora;

namespace {

model::ModelConfig square8() {
  model::ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.window = 4;
  c.d_ff = 16;
  c.max_seq = 16;
  return c;
}

void randomize(Adapters<float>& a, std::uint64_t seed, double std) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, std);
  a.for_each([&](const std::string&, Tensor<float>& t) {
    for (auto& x : t.data) x = static_cast<float>(d(rng));
  });
}

}  // namespace

TEST_CASE("trainable parameter count") {
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(square8(), 1));
  LoraConfig cfg;
  cfg.rank = 2;
  cfg.alpha = 4;
  const auto m = attach<float>(base, cfg, 1);
  CHECK(m.adapters.parameter_count() == 256);

  cfg.targets = {model::Proj::q, model::Proj::v};
  CHECK(attach<float>(base, cfg, 1).adapters.parameter_count() == 128);
}

TEST_CASE("default adapters are a small fraction of the model") {
  model::ModelConfig c;
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(c, 1));
  const auto m = attach<float>(base, LoraConfig{}, 1);
  CHECK(static_cast<double>(m.adapters.parameter_count()) < 0.05 * static_cast<double>(base->parameter_count()));
}

TEST_CASE("config validation") {
  const auto c = square8();
  LoraConfig cfg;
  cfg.rank = 8;
  CHECK_THROWS_AS(cfg.validate(c), ConfigError);
  cfg.rank = 0;
  CHECK_THROWS_AS(cfg.validate(c), ConfigError);
  cfg.rank = 7;
  CHECK_NOTHROW(cfg.validate(c));
  cfg.targets.clear();
  CHECK_THROWS_AS(cfg.validate(c), ConfigError);
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(c, 1));
  LoraConfig big;
  big.rank = 9;
  CHECK_THROWS_AS(attach<float>(base, big, 1), ConfigError);
}

TEST_CASE("attach initializes B to zero and A from the seed") {
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(square8(), 1));
  LoraConfig cfg;
  cfg.rank = 2;
  const auto m = attach<float>(base, cfg, 3);
  const auto* ad = m.adapters.get(0, model::Proj::q);
  REQUIRE(ad);
  CHECK(ad->a.shape == std::vector<std::size_t>{8, 2});
  CHECK(ad->b.shape == std::vector<std::size_t>{2, 8});
  for (float v : ad->b.data) CHECK(v == 0.0f);
  CHECK(attach<float>(base, cfg, 3).adapters == m.adapters);
  CHECK_FALSE(attach<float>(base, cfg, 4).adapters == m.adapters);
}

TEST_CASE("adapted forward equals base forward at attach") {
  model::ModelConfig c;
  c.max_seq = 64;
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(c, 2));
  const auto m = attach<float>(base, LoraConfig{}, 5);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tok(0, 259);
  std::vector<int> ids(40);
  for (auto& t : ids) t = tok(rng);
  CHECK(model::forward<float>(m, ids) == model::forward<float>(*base, ids));
}

TEST_CASE("effective weight formula") {
  Tensor<double> w({3, 4});
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = 0.1 * static_cast<double>(i);
  Adapter<double> ad{Tensor<double>({3, 2}), Tensor<double>({2, 4})};
  for (std::size_t i = 0; i < 6; ++i) ad.a.data[i] = static_cast<double>(i) - 2.0;
  for (std::size_t i = 0; i < 8; ++i) ad.b.data[i] = 0.5 * static_cast<double>(i % 3);
  Tensor<double> out;
  effective_weight(w, ad, 1.5, out);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double ab = 0;
      for (std::size_t k = 0; k < 2; ++k) ab += ad.a.at(i, k) * ad.b.at(k, j);
      CHECK(out.at(i, j) == doctest::Approx(w.at(i, j) + 1.5 * ab).epsilon(1e-14));
    }
  }
}

TEST_CASE("merge matches the adapted model") {
  model::ModelConfig c;
  c.max_seq = 64;
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(c, 7));
  auto m = attach<float>(base, LoraConfig{}, 8);
  randomize(m.adapters, 9, 0.05);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> tok(0, 259);
  std::vector<std::vector<int>> inputs;
  for (int s = 0; s < 10; ++s) {
    std::vector<int> ids(10 + s * 3);
    for (auto& t : ids) t = tok(rng);
    inputs.push_back(ids);
  }
  std::vector<Tensor<float>> adapted;
  for (const auto& ids : inputs) adapted.push_back(model::forward<float>(m, ids));
  const auto merged = merge(*base, std::move(m.adapters));
  CHECK(m.adapters.layers.empty());
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    CHECK(model::forward<float>(merged, inputs[s]) == adapted[s]);
  }
  // untargeted tensors pass through untouched
  CHECK(merged.layers[0].w_up == base->layers[0].w_up);
  CHECK(merged.tok_emb == base->tok_emb);
}

TEST_CASE("merge with zero B returns the base") {
  auto base = std::make_shared<const model::Params<float>>(model::init<float>(square8(), 1));
  LoraConfig cfg;
  cfg.rank = 2;
  auto m = attach<float>(base, cfg, 2);
  CHECK(merge(*base, std::move(m.adapters)) == *base);
}

TEST_CASE("update rank is bounded by r") {
  for (int r : {1, 2, 3}) {
    model::ModelConfig c = square8();
    c.d_model = 16;
    c.n_heads = 4;
    c.n_kv_heads = 4;
    auto base = std::make_shared<const model::Params<double>>(model::init<double>(c, 1));
    LoraConfig cfg;
    cfg.rank = r;
    cfg.alpha = 2.0 * r;
    auto m = attach<double>(base, cfg, 3);
    m.adapters.for_each([&](const std::string&, Tensor<double>& t) {
      std::mt19937_64 rng(t.size() + static_cast<std::size_t>(r));
      std::normal_distribution<double> d(0, 1);
      for (auto& x : t.data) x = d(rng);
    });
    Tensor<double> eff;
    effective_weight(base->layers[1].wv, *m.adapters.get(1, model::Proj::v), cfg.scale(), eff);
    Eigen::MatrixXd dw(16, 16);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) dw(i, j) = eff.at(i, j) - base->layers[1].wv.at(i, j);
    }
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(dw).singularValues();
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i) rank += sv(i) > 1e-8 ? 1 : 0;
    CHECK(rank == r);
  }
}
