#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "ofit/params.hpp"

namespace ofit::lora {

using model::Proj;

struct LoraConfig {
  int rank = 4;
  double alpha = 8.0;  // scale applied to A·B is alpha / rank
  std::vector<Proj> targets = {Proj::q, Proj::k, Proj::v, Proj::o};
  double init_std = 0.02;

  double scale() const { return alpha / rank; }
  bool targets_proj(Proj p) const;
  // Rank must satisfy 1 <= r < min(in, out) for every targeted matrix.
  void validate(const model::ModelConfig& config) const;

  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

template <class T>
struct Adapter {
  Tensor<T> a;  // [in, r]
  Tensor<T> b;  // [r, out]

  friend bool operator==(const Adapter&, const Adapter&) = default;
};

template <class T>
struct Adapters {
  LoraConfig config;
  // layers[l][proj] is set for targeted projections only.
  std::vector<std::array<std::optional<Adapter<T>>, 4>> layers;

  const Adapter<T>* get(std::size_t layer, Proj p) const {
    const auto& slot = layers[layer][static_cast<std::size_t>(p)];
    return slot ? &*slot : nullptr;
  }

  // Visits A and B tensors in canonical order with their checkpoint names.
  template <class F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Proj p : model::kAllProjs) {
        auto& slot = layers[l][static_cast<std::size_t>(p)];
        if (!slot) continue;
        const std::string base = "lora.layers." + std::to_string(l) + "." + model::proj_name(p);
        f(base + ".a", slot->a);
        f(base + ".b", slot->b);
      }
    }
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<Adapters*>(this)->for_each([&](const std::string& n, Tensor<T>& t) { f(n, std::as_const(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <class U>
  Adapters<U> cast() const {
    Adapters<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t p = 0; p < 4; ++p) {
        if (layers[l][p]) out.layers[l][p] = Adapter<U>{layers[l][p]->a.template cast<U>(), layers[l][p]->b.template cast<U>()};
      }
    }
    return out;
  }

  friend bool operator==(const Adapters&, const Adapters&) = default;
};

// Frozen shared base plus trainable adapters.
template <class T>
struct AdaptedModel {
  std::shared_ptr<const model::Params<T>> base;
  Adapters<T> adapters;
};

// A ~ N(0, init_std), B = 0.
template <class T>
AdaptedModel<T> attach(std::shared_ptr<const model::Params<T>> base, const LoraConfig& config, std::uint64_t seed);

// W + (alpha/r)·A·B, written into `out` ([in, out]).
template <class T>
void effective_weight(const Tensor<T>& w, const Adapter<T>& adapter, double scale, Tensor<T>& out);

// Dense params with every targeted projection replaced by its effective
// weight. Takes the adapters by rvalue: merging the same adapters twice
// would add the update twice.
template <class T>
model::Params<T> merge(const model::Params<T>& base, Adapters<T>&& adapters);

}  // namespace ofit::lora
