#pragma once

// Straightforward dense reference implementations used as test oracles.
// Everything is computed position by position in double precision with no
// packing, pruning or shared code paths from the library.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ofit/params.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat matmul(const Mat& x, const ofit::Tensor<double>& w) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  Mat y(x.size(), std::vector<double>(out, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t j = 0; j < out; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.data[i * out + j];
      y[r][j] = s;
    }
  }
  return y;
}

inline Mat rmsnorm(const Mat& x, const ofit::Tensor<double>& g) {
  Mat y = x;
  for (auto& row : y) {
    double ss = 0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(row.size()) + 1e-5);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = g.data[i] * row[i] * inv;
  }
  return y;
}

// Multi-head attention with one key/value head per query head. The key/value
// projections have n_heads * head_dim columns.
inline Mat mha(const Mat& q, const Mat& k, const Mat& v, int n_heads, int window) {
  const std::size_t T = q.size();
  const std::size_t hd = q[0].size() / static_cast<std::size_t>(n_heads);
  Mat out(T, std::vector<double>(q[0].size(), 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - static_cast<std::size_t>(window) : 0;
    for (int h = 0; h < n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * hd;
      std::vector<double> s;
      for (std::size_t j = lo; j <= i; ++j) {
        double d = 0;
        for (std::size_t e = 0; e < hd; ++e) d += q[i][off + e] * k[j][off + e];
        s.push_back(d / std::sqrt(static_cast<double>(hd)));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = lo; j <= i; ++j) {
        for (std::size_t e = 0; e < hd; ++e) out[i][off + e] += s[j - lo] / z * v[j][off + e];
      }
    }
  }
  return out;
}

// Repeats each key/value head's columns for every query head that shares it,
// turning a grouped projection into an ordinary multi-head one.
inline ofit::Tensor<double> expand_kv(const ofit::Tensor<double>& w, int n_heads, int n_kv_heads) {
  const std::size_t in = w.shape[0], hd = w.shape[1] / static_cast<std::size_t>(n_kv_heads);
  const int group = n_heads / n_kv_heads;
  ofit::Tensor<double> out({in, hd * static_cast<std::size_t>(n_heads)});
  for (std::size_t i = 0; i < in; ++i) {
    for (int h = 0; h < n_heads; ++h) {
      for (std::size_t e = 0; e < hd; ++e) {
        out.data[i * out.shape[1] + static_cast<std::size_t>(h) * hd + e] =
            w.data[i * w.shape[1] + static_cast<std::size_t>(h / group) * hd + e];
      }
    }
  }
  return out;
}

struct Trace {
  std::vector<Mat> layer_out;  // residual stream after each layer
  Mat logits;
};

inline Trace run(const ofit::model::Params<double>& p, const std::vector<int>& ids) {
  const auto& c = p.config;
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  Mat x(ids.size(), std::vector<double>(d));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t][i] = p.tok_emb.data[static_cast<std::size_t>(ids[t]) * d + i] + p.pos_emb.data[t * d + i];
    }
  }
  Trace tr;
  for (const auto& L : p.layers) {
    const Mat xn = rmsnorm(x, L.attn_norm);
    const Mat q = matmul(xn, L.wq);
    const Mat k = matmul(xn, expand_kv(L.wk, c.n_heads, c.n_kv_heads));
    const Mat v = matmul(xn, expand_kv(L.wv, c.n_heads, c.n_kv_heads));
    const Mat a = matmul(mha(q, k, v, c.n_heads, c.window), L.wo);
    for (std::size_t t = 0; t < x.size(); ++t) {
      for (std::size_t i = 0; i < d; ++i) x[t][i] += a[t][i];
    }
    const Mat xn2 = rmsnorm(x, L.mlp_norm);
    const Mat g = matmul(xn2, L.w_gate), u = matmul(xn2, L.w_up);
    Mat h = g;
    for (std::size_t t = 0; t < h.size(); ++t) {
      for (std::size_t j = 0; j < h[t].size(); ++j) h[t][j] = g[t][j] / (1 + std::exp(-g[t][j])) * u[t][j];
    }
    const Mat m = matmul(h, L.w_down);
    for (std::size_t t = 0; t < x.size(); ++t) {
      for (std::size_t i = 0; i < d; ++i) x[t][i] += m[t][i];
    }
    tr.layer_out.push_back(x);
  }
  tr.logits = matmul(rmsnorm(x, p.final_norm), p.lm_head);
  return tr;
}

// log p(completion | [BOS] prompt [SEP]) by one full forward per step.
inline double completion_logprob(const ofit::model::Params<double>& p, std::vector<int> prefix,
                                 const std::vector<int>& completion) {
  double total = 0;
  for (int tok : completion) {
    const auto logits = run(p, prefix).logits.back();
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    total += std::log(std::exp(logits[static_cast<std::size_t>(tok)] - mx) / z);
    prefix.push_back(tok);
  }
  return total;
}

}  // namespace oracle
