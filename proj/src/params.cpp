#include "ofit/params.hpp"

#include <random>

#include "ofit/errors.hpp"

namespace ofit::model {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || d_ff < 1 || vocab < 1 || max_seq < 1) {
    fail("all sizes must be positive");
  }
  if (n_heads % n_kv_heads != 0) {
    fail("n_heads (" + std::to_string(n_heads) + ") must be a multiple of n_kv_heads (" +
         std::to_string(n_kv_heads) + ")");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (window < 1) fail("window must be >= 1");
}

const char* proj_name(Proj p) {
  switch (p) {
    case Proj::q: return "wq";
    case Proj::k: return "wk";
    case Proj::v: return "wv";
    case Proj::o: return "wo";
  }
  return "?";
}

template <class T>
Params<T> zeros(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto qd = static_cast<std::size_t>(config.n_heads * config.head_dim());
  const auto kvd = static_cast<std::size_t>(config.kv_dim());
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto V = static_cast<std::size_t>(config.vocab);

  Params<T> p;
  p.config = config;
  p.tok_emb = Tensor<T>({V, d});
  p.pos_emb = Tensor<T>({static_cast<std::size_t>(config.max_seq), d});
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    L.attn_norm = Tensor<T>({d}, T(1));
    L.wq = Tensor<T>({d, qd});
    L.wk = Tensor<T>({d, kvd});
    L.wv = Tensor<T>({d, kvd});
    L.wo = Tensor<T>({qd, d});
    L.mlp_norm = Tensor<T>({d}, T(1));
    L.w_gate = Tensor<T>({d, ff});
    L.w_up = Tensor<T>({d, ff});
    L.w_down = Tensor<T>({ff, d});
  }
  p.final_norm = Tensor<T>({d}, T(1));
  p.lm_head = Tensor<T>({d, V});
  return p;
}

template <class T>
Params<T> init(const ModelConfig& config, std::uint64_t seed, double stddev) {
  Params<T> p = zeros<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  p.for_each([&](const std::string&, Tensor<T>& t) {
    if (t.shape.size() < 2) return;  // normalization gains stay at 1
    for (auto& v : t.data) v = static_cast<T>(normal(rng));
  });
  return p;
}

template Params<float> zeros<float>(const ModelConfig&);
template Params<double> zeros<double>(const ModelConfig&);
template Params<float> init<float>(const ModelConfig&, std::uint64_t, double);
template Params<double> init<double>(const ModelConfig&, std::uint64_t, double);

}  // namespace ofit::model
