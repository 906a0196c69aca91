#include "ofit/lora.hpp"

#include <algorithm>
#include <random>

#include "ofit/errors.hpp"

namespace ofit::lora {

bool LoraConfig::targets_proj(Proj p) const { return std::find(targets.begin(), targets.end(), p) != targets.end(); }

void LoraConfig::validate(const model::ModelConfig& config) const {
  if (targets.empty()) throw ConfigError("lora: targets must be non-empty");
  if (!(alpha > 0)) throw ConfigError("lora: alpha must be positive");
  if (!(init_std >= 0)) throw ConfigError("lora: init_std must be non-negative");
  const int qd = config.n_heads * config.head_dim();
  for (Proj p : targets) {
    const int in = p == Proj::o ? qd : config.d_model;
    const int out = p == Proj::q ? qd : p == Proj::o ? config.d_model : config.kv_dim();
    if (rank < 1 || rank >= std::min(in, out)) {
      throw ConfigError("lora: rank " + std::to_string(rank) + " invalid for " + model::proj_name(p) + " [" +
                        std::to_string(in) + "x" + std::to_string(out) + "]; need 1 <= r < " +
                        std::to_string(std::min(in, out)));
    }
  }
}

template <class T>
AdaptedModel<T> attach(std::shared_ptr<const model::Params<T>> base, const LoraConfig& config, std::uint64_t seed) {
  config.validate(base->config);
  AdaptedModel<T> m{std::move(base), {}};
  m.adapters.config = config;
  m.adapters.layers.resize(m.base->layers.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  const auto r = static_cast<std::size_t>(config.rank);
  for (std::size_t l = 0; l < m.base->layers.size(); ++l) {
    for (Proj p : model::kAllProjs) {
      if (!config.targets_proj(p)) continue;
      const Tensor<T>& w = m.base->layers[l].proj(p);
      Adapter<T> ad{Tensor<T>({w.rows(), r}), Tensor<T>({r, w.cols()})};
      for (auto& v : ad.a.data) v = static_cast<T>(normal(rng));
      m.adapters.layers[l][static_cast<std::size_t>(p)] = std::move(ad);
    }
  }
  return m;
}

template <class T>
void effective_weight(const Tensor<T>& w, const Adapter<T>& adapter, double scale, Tensor<T>& out) {
  const std::size_t in = w.rows(), cols = w.cols(), r = adapter.a.cols();
  out.shape = w.shape;
  out.data.assign(w.data.begin(), w.data.end());
  std::vector<T> delta(cols);
  for (std::size_t i = 0; i < in; ++i) {
    std::fill(delta.begin(), delta.end(), T(0));
    for (std::size_t k = 0; k < r; ++k) {
      const T a = adapter.a.at(i, k);
      const T* brow = adapter.b.row(k);
      for (std::size_t j = 0; j < cols; ++j) delta[j] += a * brow[j];
    }
    T* orow = out.row(i);
    for (std::size_t j = 0; j < cols; ++j) orow[j] += static_cast<T>(scale) * delta[j];
  }
}

template <class T>
model::Params<T> merge(const model::Params<T>& base, Adapters<T>&& adapters) {
  model::Params<T> out = base;
  const double scale = adapters.config.scale();
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    for (Proj p : model::kAllProjs) {
      if (const Adapter<T>* ad = adapters.get(l, p)) {
        Tensor<T> merged;
        effective_weight(base.layers[l].proj(p), *ad, scale, merged);
        out.layers[l].proj(p) = std::move(merged);
      }
    }
  }
  adapters.layers.clear();
  return out;
}

template AdaptedModel<float> attach<float>(std::shared_ptr<const model::Params<float>>, const LoraConfig&, std::uint64_t);
template AdaptedModel<double> attach<double>(std::shared_ptr<const model::Params<double>>, const LoraConfig&, std::uint64_t);
template void effective_weight<float>(const Tensor<float>&, const Adapter<float>&, double, Tensor<float>&);
template void effective_weight<double>(const Tensor<double>&, const Adapter<double>&, double, Tensor<double>&);
template model::Params<float> merge<float>(const model::Params<float>&, Adapters<float>&&);
template model::Params<double> merge<double>(const model::Params<double>&, Adapters<double>&&);

}  // namespace ofit::lora
