#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ofit/tensor.hpp"

namespace ofit::model {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 2;
  int window = 64;
  int d_ff = 256;
  int vocab = 260;
  int max_seq = 512;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }
  // Throws ConfigError when any structural invariant fails.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The four adaptable attention projections.
enum class Proj : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::array kAllProjs = {Proj::q, Proj::k, Proj::v, Proj::o};
const char* proj_name(Proj p);  // "wq", "wk", "wv", "wo"

// Weights use the x·W convention: W has shape [in, out].
template <class T>
struct LayerParams {
  Tensor<T> attn_norm;  // [d]
  Tensor<T> wq;         // [d, H*hd]
  Tensor<T> wk;         // [d, KV*hd]
  Tensor<T> wv;         // [d, KV*hd]
  Tensor<T> wo;         // [H*hd, d]
  Tensor<T> mlp_norm;   // [d]
  Tensor<T> w_gate;     // [d, d_ff]
  Tensor<T> w_up;       // [d, d_ff]
  Tensor<T> w_down;     // [d_ff, d]

  Tensor<T>& proj(Proj p) { return p == Proj::q ? wq : p == Proj::k ? wk : p == Proj::v ? wv : wo; }
  const Tensor<T>& proj(Proj p) const { return const_cast<LayerParams*>(this)->proj(p); }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <class T>
struct Params {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab, d]
  Tensor<T> pos_emb;  // [max_seq, d]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;  // [d]
  Tensor<T> lm_head;     // [d, vocab]

  // Visits every tensor in canonical (serialization) order.
  template <class F>
  void for_each(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "attn_norm", L.attn_norm);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "mlp_norm", L.mlp_norm);
      f(p + "w_gate", L.w_gate);
      f(p + "w_up", L.w_up);
      f(p + "w_down", L.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("lm_head"), lm_head);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each([&](const std::string& name, Tensor<T>& t) { f(name, std::as_const(t)); });
  }

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    auto src = named();
    std::size_t i = 0;
    out.for_each([&](const std::string&, Tensor<U>& t) { t = src[i++].second->template cast<U>(); });
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> named() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for_each([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  friend bool operator==(const Params&, const Params&) = default;
};

using ModelParams = Params<float>;

// Correctly shaped tensors: zero weights, unit normalization gains.
template <class T>
Params<T> zeros(const ModelConfig& config);

// Gaussian(0, 0.02) weights and embeddings, unit normalization gains.
template <class T>
Params<T> init(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02);

}  // namespace ofit::model
