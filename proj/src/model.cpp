#include "ofit/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ofit/errors.hpp"

namespace ofit::model {

namespace {

constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Dense kernels over a subset of rows. Matrices are row-major; X rows have
// `in` columns, Y rows have `out` columns, W is [in, out].

template <class T>
void gemm_rows(const std::vector<int>& rows, const T* X, std::size_t in, const T* W, std::size_t out, T* Y,
               bool accumulate) {
  for (int r : rows) {
    const T* x = X + static_cast<std::size_t>(r) * in;
    T* __restrict y = Y + static_cast<std::size_t>(r) * out;
    if (!accumulate) std::fill(y, y + out, T(0));
    for (std::size_t i = 0; i < in; ++i) {
      const T a = x[i];
      const T* __restrict w = W + i * out;
      for (std::size_t j = 0; j < out; ++j) y[j] += a * w[j];
    }
  }
}

// dW[in, out] += sum_r X[r]^T dY[r]
template <class T>
void outer_rows(const std::vector<int>& rows, const T* X, std::size_t in, const T* dY, std::size_t out, T* dW) {
  for (int r : rows) {
    const T* x = X + static_cast<std::size_t>(r) * in;
    const T* __restrict dy = dY + static_cast<std::size_t>(r) * out;
    for (std::size_t i = 0; i < in; ++i) {
      const T a = x[i];
      T* __restrict dw = dW + i * out;
      for (std::size_t j = 0; j < out; ++j) dw[j] += a * dy[j];
    }
  }
}

template <class T>
std::vector<T> transpose(const Tensor<T>& w) {
  const std::size_t R = w.rows(), C = w.cols();
  std::vector<T> t(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) t[j * R + i] = w.data[i * C + j];
  }
  return t;
}

// y = g * x / sqrt(mean(x^2) + eps), recording 1/rms per row.
template <class T>
void rms_norm_rows(const std::vector<int>& rows, const T* X, const T* gain, std::size_t d, T* Y, T* inv_rms) {
  for (int r : rows) {
    const T* x = X + static_cast<std::size_t>(r) * d;
    T* y = Y + static_cast<std::size_t>(r) * d;
    double ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(x[i]) * x[i];
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps));
    inv_rms[r] = inv;
    for (std::size_t i = 0; i < d; ++i) y[i] = gain[i] * (x[i] * inv);
  }
}

// Accumulates dX and (optionally) dgain for the normalization above.
template <class T>
void rms_norm_backward_rows(const std::vector<int>& rows, const T* X, const T* gain, const T* inv_rms, const T* dY,
                            std::size_t d, T* dX, T* dgain) {
  for (int r : rows) {
    const T* x = X + static_cast<std::size_t>(r) * d;
    const T* dy = dY + static_cast<std::size_t>(r) * d;
    T* dx = dX + static_cast<std::size_t>(r) * d;
    const T inv = inv_rms[r];
    double dot = 0;
    for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(gain[i] * dy[i]) * x[i];
    const T coef = static_cast<T>(dot * static_cast<double>(inv) * inv * inv / static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) dx[i] += inv * (gain[i] * dy[i]) - coef * x[i];
    if (dgain) {
      for (std::size_t i = 0; i < d; ++i) dgain[i] += dy[i] * (x[i] * inv);
    }
  }
}

template <class T>
T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

void check_tokens(const Packed& packed, const ModelConfig& config) {
  for (int i = 0; i < packed.size(); ++i) {
    if (packed.pos[i] >= config.max_seq) {
      throw LengthError("sequence length " + std::to_string(packed.pos[i] + 1) + " exceeds max_seq " +
                        std::to_string(config.max_seq));
    }
    if (packed.ids[i] < 0 || packed.ids[i] >= config.vocab) {
      throw std::invalid_argument("token id " + std::to_string(packed.ids[i]) + " outside vocabulary");
    }
  }
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

PackResult pack(std::span<const std::vector<int>> sequences) {
  struct Node {
    int token;
    int parent;
    std::vector<int> children;
  };
  std::vector<Node> nodes{{-1, -1, {}}};
  std::vector<std::vector<int>> node_of(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    int cur = 0;
    for (int tok : sequences[s]) {
      int next = -1;
      for (int c : nodes[cur].children) {
        if (nodes[c].token == tok) {
          next = c;
          break;
        }
      }
      if (next < 0) {
        next = static_cast<int>(nodes.size());
        nodes.push_back({tok, cur, {}});
        nodes[cur].children.push_back(next);
      }
      node_of[s].push_back(next);
      cur = next;
    }
  }

  PackResult result;
  Packed& p = result.packed;
  std::vector<int> row_of(nodes.size(), -1);
  std::vector<int> depth(nodes.size(), -1);
  // (first node of segment, parent segment)
  std::vector<std::pair<int, int>> stack;
  for (auto it = nodes[0].children.rbegin(); it != nodes[0].children.rend(); ++it) stack.emplace_back(*it, -1);
  while (!stack.empty()) {
    auto [n, parent_seg] = stack.back();
    stack.pop_back();
    const int seg_id = static_cast<int>(p.segments.size());
    Packed::Segment seg{p.size(), 0, parent_seg};
    for (;;) {
      row_of[n] = p.size();
      depth[n] = nodes[n].parent == 0 ? 0 : depth[nodes[n].parent] + 1;
      p.ids.push_back(nodes[n].token);
      p.pos.push_back(depth[n]);
      p.seg.push_back(seg_id);
      if (nodes[n].children.size() != 1) break;
      n = nodes[n].children.front();
    }
    seg.end = p.size();
    p.segments.push_back(seg);
    for (auto it = nodes[n].children.rbegin(); it != nodes[n].children.rend(); ++it) stack.emplace_back(*it, seg_id);
  }

  result.rows.resize(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    for (int n : node_of[s]) result.rows[s].push_back(row_of[n]);
  }
  return result;
}

template <class T>
const Tensor<T>& Tape<T>::weight(std::size_t layer, Proj p) const {
  if (adapters && adapters->get(layer, p)) return effective[layer][static_cast<std::size_t>(p)];
  return base->layers[layer].proj(p);
}

template <class T>
Tape<T> forward_tape(const Params<T>& base, const lora::Adapters<T>* adapters, Packed packed,
                     std::vector<int> out_rows) {
  const ModelConfig& cfg = base.config;
  check_tokens(packed, cfg);
  if (adapters && adapters->layers.size() != base.layers.size()) {
    throw ConfigError("adapter layer count does not match the model");
  }

  Tape<T> tape;
  tape.base = &base;
  tape.adapters = adapters;
  tape.packed = std::move(packed);
  tape.out_rows = std::move(out_rows);
  const Packed& pk = tape.packed;

  const int N = pk.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const auto qd = H * hd;
  const auto kvd = static_cast<std::size_t>(cfg.kv_dim());
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  const std::size_t group = H / static_cast<std::size_t>(cfg.n_kv_heads);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const std::size_t L = base.layers.size();

  // Key ranges: row i sees rows of its own segment and its ancestors whose
  // position lies in [pos_i - window + 1, pos_i].
  tape.key_offsets.assign(static_cast<std::size_t>(N) + 1, 0);
  tape.key_base.assign(static_cast<std::size_t>(N) + 1, 0);
  std::vector<std::pair<int, int>> spans;
  for (int i = 0; i < N; ++i) {
    const int lo = std::max(0, pk.pos[i] - cfg.window + 1);
    spans.clear();
    int s = pk.seg[i];
    int last = i + 1;
    while (s >= 0) {
      const auto& sg = pk.segments[s];
      const int first_pos = pk.pos[sg.begin];
      const int first = sg.begin + std::max(0, lo - first_pos);
      if (first < last) spans.emplace_back(first, last);
      if (lo >= first_pos) break;
      s = sg.parent;
      if (s >= 0) last = pk.segments[s].end;
    }
    std::reverse(spans.begin(), spans.end());
    int count = 0;
    for (auto& sp : spans) {
      tape.key_spans.push_back(sp);
      count += sp.second - sp.first;
    }
    tape.key_offsets[i + 1] = static_cast<int>(tape.key_spans.size());
    tape.key_base[i + 1] = tape.key_base[i] + count;
  }

  // Effective weights for adapted projections.
  tape.effective.resize(L);
  if (adapters) {
    const double s = adapters->config.scale();
    for (std::size_t l = 0; l < L; ++l) {
      for (Proj p : kAllProjs) {
        if (const auto* ad = adapters->get(l, p)) {
          lora::effective_weight(base.layers[l].proj(p), *ad, s, tape.effective[l][static_cast<std::size_t>(p)]);
        }
      }
    }
  }

  // Rows each layer has to produce, working back from the requested logits.
  tape.layers.resize(L);
  {
    std::vector<int> needed = sorted_unique(tape.out_rows);
    std::vector<char> mark(static_cast<std::size_t>(N));
    for (std::size_t l = L; l-- > 0;) {
      auto& lt = tape.layers[l];
      lt.q_rows = needed;
      std::fill(mark.begin(), mark.end(), 0);
      for (int r : needed) {
        for (int k = tape.key_offsets[r]; k < tape.key_offsets[r + 1]; ++k) {
          for (int j = tape.key_spans[k].first; j < tape.key_spans[k].second; ++j) mark[j] = 1;
        }
      }
      lt.kv_rows.clear();
      for (int j = 0; j < N; ++j) {
        if (mark[j]) lt.kv_rows.push_back(j);
      }
      needed = lt.kv_rows;
    }
  }

  const std::size_t ND = static_cast<std::size_t>(N) * d;
  std::vector<T> x(ND, T(0));
  if (L > 0) {
    for (int r : tape.layers[0].kv_rows) {
      const T* te = base.tok_emb.row(static_cast<std::size_t>(pk.ids[r]));
      const T* pe = base.pos_emb.row(static_cast<std::size_t>(pk.pos[r]));
      T* xr = x.data() + static_cast<std::size_t>(r) * d;
      for (std::size_t i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
    }
  }

  for (std::size_t l = 0; l < L; ++l) {
    const LayerParams<T>& P = base.layers[l];
    LayerTape<T>& lt = tape.layers[l];
    lt.x = std::move(x);
    lt.xn1.assign(ND, T(0));
    lt.inv_rms1.assign(static_cast<std::size_t>(N), T(0));
    rms_norm_rows(lt.kv_rows, lt.x.data(), P.attn_norm.data.data(), d, lt.xn1.data(), lt.inv_rms1.data());

    lt.q.assign(static_cast<std::size_t>(N) * qd, T(0));
    lt.k.assign(static_cast<std::size_t>(N) * kvd, T(0));
    lt.v.assign(static_cast<std::size_t>(N) * kvd, T(0));
    gemm_rows(lt.q_rows, lt.xn1.data(), d, tape.weight(l, Proj::q).data.data(), qd, lt.q.data(), false);
    gemm_rows(lt.kv_rows, lt.xn1.data(), d, tape.weight(l, Proj::k).data.data(), kvd, lt.k.data(), false);
    gemm_rows(lt.kv_rows, lt.xn1.data(), d, tape.weight(l, Proj::v).data.data(), kvd, lt.v.data(), false);

    lt.probs.assign(static_cast<std::size_t>(tape.key_base[N]) * H, T(0));
    lt.ctx.assign(static_cast<std::size_t>(N) * qd, T(0));
    for (int i : lt.q_rows) {
      const auto nk = static_cast<std::size_t>(tape.key_base[i + 1] - tape.key_base[i]);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / group;
        const T* qh = lt.q.data() + static_cast<std::size_t>(i) * qd + h * hd;
        T* p = lt.probs.data() + static_cast<std::size_t>(tape.key_base[i]) * H + h * nk;
        std::size_t idx = 0;
        T mx = -std::numeric_limits<T>::infinity();
        for (int sp = tape.key_offsets[i]; sp < tape.key_offsets[i + 1]; ++sp) {
          for (int j = tape.key_spans[sp].first; j < tape.key_spans[sp].second; ++j) {
            const T* kj = lt.k.data() + static_cast<std::size_t>(j) * kvd + g * hd;
            T s = 0;
            for (std::size_t e = 0; e < hd; ++e) s += qh[e] * kj[e];
            s *= scale;
            p[idx++] = s;
            mx = std::max(mx, s);
          }
        }
        T sum = 0;
        for (std::size_t t = 0; t < nk; ++t) {
          p[t] = std::exp(p[t] - mx);
          sum += p[t];
        }
        const T inv = T(1) / sum;
        for (std::size_t t = 0; t < nk; ++t) p[t] *= inv;

        T* ch = lt.ctx.data() + static_cast<std::size_t>(i) * qd + h * hd;
        idx = 0;
        for (int sp = tape.key_offsets[i]; sp < tape.key_offsets[i + 1]; ++sp) {
          for (int j = tape.key_spans[sp].first; j < tape.key_spans[sp].second; ++j) {
            const T* vj = lt.v.data() + static_cast<std::size_t>(j) * kvd + g * hd;
            const T w = p[idx++];
            for (std::size_t e = 0; e < hd; ++e) ch[e] += w * vj[e];
          }
        }
      }
    }

    lt.xmid.assign(ND, T(0));
    for (int r : lt.q_rows) {
      std::copy_n(lt.x.data() + static_cast<std::size_t>(r) * d, d, lt.xmid.data() + static_cast<std::size_t>(r) * d);
    }
    gemm_rows(lt.q_rows, lt.ctx.data(), qd, tape.weight(l, Proj::o).data.data(), d, lt.xmid.data(), true);

    lt.xn2.assign(ND, T(0));
    lt.inv_rms2.assign(static_cast<std::size_t>(N), T(0));
    rms_norm_rows(lt.q_rows, lt.xmid.data(), P.mlp_norm.data.data(), d, lt.xn2.data(), lt.inv_rms2.data());
    lt.gate.assign(static_cast<std::size_t>(N) * ff, T(0));
    lt.up.assign(static_cast<std::size_t>(N) * ff, T(0));
    lt.act.assign(static_cast<std::size_t>(N) * ff, T(0));
    gemm_rows(lt.q_rows, lt.xn2.data(), d, P.w_gate.data.data(), ff, lt.gate.data(), false);
    gemm_rows(lt.q_rows, lt.xn2.data(), d, P.w_up.data.data(), ff, lt.up.data(), false);
    // act = silu(gate) * up
    for (int r : lt.q_rows) {
      const std::size_t o = static_cast<std::size_t>(r) * ff;
      for (std::size_t j = 0; j < ff; ++j) {
        const T a = lt.gate[o + j];
        lt.act[o + j] = a * sigmoid(a) * lt.up[o + j];
      }
    }
    x.assign(ND, T(0));
    for (int r : lt.q_rows) {
      std::copy_n(lt.xmid.data() + static_cast<std::size_t>(r) * d, d, x.data() + static_cast<std::size_t>(r) * d);
    }
    gemm_rows(lt.q_rows, lt.act.data(), ff, P.w_down.data.data(), d, x.data(), true);
  }
  tape.x_out = std::move(x);

  const std::size_t R = tape.out_rows.size();
  tape.xf.assign(R * d, T(0));
  tape.inv_rmsf.assign(R, T(0));
  tape.logits = Tensor<T>({R, V});
  for (std::size_t o = 0; o < R; ++o) {
    const T* xr = tape.x_out.data() + static_cast<std::size_t>(tape.out_rows[o]) * d;
    double ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(xr[i]) * xr[i];
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps));
    tape.inv_rmsf[o] = inv;
    T* f = tape.xf.data() + o * d;
    for (std::size_t i = 0; i < d; ++i) f[i] = base.final_norm.data[i] * (xr[i] * inv);
  }
  std::vector<int> seq(R);
  for (std::size_t o = 0; o < R; ++o) seq[o] = static_cast<int>(o);
  gemm_rows(seq, tape.xf.data(), d, base.lm_head.data.data(), V, tape.logits.data.data(), false);
  return tape;
}

template <class T>
NamedTensors<T> backward(const Tape<T>& tape, const Tensor<T>& dlogits) {
  const Params<T>& base = *tape.base;
  const lora::Adapters<T>* adapters = tape.adapters;
  const ModelConfig& cfg = base.config;
  const Packed& pk = tape.packed;
  const bool full = adapters == nullptr;

  const int N = pk.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const auto qd = H * hd;
  const auto kvd = static_cast<std::size_t>(cfg.kv_dim());
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  const std::size_t group = H / static_cast<std::size_t>(cfg.n_kv_heads);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const std::size_t L = base.layers.size();
  const std::size_t ND = static_cast<std::size_t>(N) * d;
  const std::size_t R = tape.out_rows.size();
  if (dlogits.rows() != R || dlogits.cols() != V) throw std::invalid_argument("dlogits shape mismatch");

  Params<T> g;  // dense gradients (full mode only)
  if (full) {
    g = base;
    g.for_each([](const std::string&, Tensor<T>& t) { std::fill(t.data.begin(), t.data.end(), T(0)); });
  }
  // d(loss)/d(effective weight) for adapted projections.
  std::vector<std::array<Tensor<T>, 4>> d_eff(L);
  auto weight_grad = [&](std::size_t l, Proj p) -> T* {
    if (full) return g.layers[l].proj(p).data.data();
    if (!adapters->get(l, p)) return nullptr;
    Tensor<T>& t = d_eff[l][static_cast<std::size_t>(p)];
    if (t.data.empty()) t = Tensor<T>(base.layers[l].proj(p).shape);
    return t.data.data();
  };

  // Output head and final norm.
  std::vector<T> dx(ND, T(0));
  {
    std::vector<int> seq(R);
    for (std::size_t o = 0; o < R; ++o) seq[o] = static_cast<int>(o);
    std::vector<T> dxf(R * d, T(0));
    const std::vector<T> head_t = transpose(base.lm_head);
    gemm_rows(seq, dlogits.data.data(), V, head_t.data(), d, dxf.data(), true);
    if (full) outer_rows(seq, tape.xf.data(), d, dlogits.data.data(), V, g.lm_head.data.data());

    std::vector<T> xo(R * d);
    for (std::size_t o = 0; o < R; ++o) {
      std::copy_n(tape.x_out.data() + static_cast<std::size_t>(tape.out_rows[o]) * d, d, xo.data() + o * d);
    }
    std::vector<T> dxo(R * d, T(0));
    rms_norm_backward_rows(seq, xo.data(), base.final_norm.data.data(), tape.inv_rmsf.data(), dxf.data(), d,
                           dxo.data(), full ? g.final_norm.data.data() : nullptr);
    for (std::size_t o = 0; o < R; ++o) {
      T* dst = dx.data() + static_cast<std::size_t>(tape.out_rows[o]) * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += dxo[o * d + i];
    }
  }

  for (std::size_t l = L; l-- > 0;) {
    const LayerParams<T>& P = base.layers[l];
    const LayerTape<T>& lt = tape.layers[l];

    // MLP: out = xmid + act · W_down
    std::vector<T> dact(static_cast<std::size_t>(N) * ff, T(0));
    gemm_rows(lt.q_rows, dx.data(), d, transpose(P.w_down).data(), ff, dact.data(), true);
    if (full) outer_rows(lt.q_rows, lt.act.data(), ff, dx.data(), d, g.layers[l].w_down.data.data());
    std::vector<T> dgate(static_cast<std::size_t>(N) * ff, T(0)), dup(static_cast<std::size_t>(N) * ff, T(0));
    for (int r : lt.q_rows) {
      const std::size_t o = static_cast<std::size_t>(r) * ff;
      for (std::size_t j = 0; j < ff; ++j) {
        const T a = lt.gate[o + j];
        const T sg = sigmoid(a);
        const T silu = a * sg;
        dup[o + j] = dact[o + j] * silu;
        dgate[o + j] = dact[o + j] * lt.up[o + j] * (sg * (T(1) + a * (T(1) - sg)));
      }
    }
    std::vector<T> dxn2(ND, T(0));
    gemm_rows(lt.q_rows, dgate.data(), ff, transpose(P.w_gate).data(), d, dxn2.data(), true);
    gemm_rows(lt.q_rows, dup.data(), ff, transpose(P.w_up).data(), d, dxn2.data(), true);
    if (full) {
      outer_rows(lt.q_rows, lt.xn2.data(), d, dgate.data(), ff, g.layers[l].w_gate.data.data());
      outer_rows(lt.q_rows, lt.xn2.data(), d, dup.data(), ff, g.layers[l].w_up.data.data());
    }
    std::vector<T> dxmid = dx;
    rms_norm_backward_rows(lt.q_rows, lt.xmid.data(), P.mlp_norm.data.data(), lt.inv_rms2.data(), dxn2.data(), d,
                           dxmid.data(), full ? g.layers[l].mlp_norm.data.data() : nullptr);

    // Attention output projection.
    std::vector<T> dctx(static_cast<std::size_t>(N) * qd, T(0));
    gemm_rows(lt.q_rows, dxmid.data(), d, transpose(tape.weight(l, Proj::o)).data(), qd, dctx.data(), true);
    if (T* gw = weight_grad(l, Proj::o)) outer_rows(lt.q_rows, lt.ctx.data(), qd, dxmid.data(), d, gw);

    std::vector<T> dq(static_cast<std::size_t>(N) * qd, T(0));
    std::vector<T> dk(static_cast<std::size_t>(N) * kvd, T(0)), dv(static_cast<std::size_t>(N) * kvd, T(0));
    std::vector<T> dp;
    for (int i : lt.q_rows) {
      const auto nk = static_cast<std::size_t>(tape.key_base[i + 1] - tape.key_base[i]);
      dp.resize(nk);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t gi = h / group;
        const T* p = lt.probs.data() + static_cast<std::size_t>(tape.key_base[i]) * H + h * nk;
        const T* dch = dctx.data() + static_cast<std::size_t>(i) * qd + h * hd;
        const T* qh = lt.q.data() + static_cast<std::size_t>(i) * qd + h * hd;
        T* dqh = dq.data() + static_cast<std::size_t>(i) * qd + h * hd;

        std::size_t idx = 0;
        T sum = 0;
        for (int sp = tape.key_offsets[i]; sp < tape.key_offsets[i + 1]; ++sp) {
          for (int j = tape.key_spans[sp].first; j < tape.key_spans[sp].second; ++j) {
            const T* vj = lt.v.data() + static_cast<std::size_t>(j) * kvd + gi * hd;
            T* dvj = dv.data() + static_cast<std::size_t>(j) * kvd + gi * hd;
            T s = 0;
            const T w = p[idx];
            for (std::size_t e = 0; e < hd; ++e) {
              s += dch[e] * vj[e];
              dvj[e] += w * dch[e];
            }
            dp[idx++] = s;
            sum += w * s;
          }
        }
        idx = 0;
        for (int sp = tape.key_offsets[i]; sp < tape.key_offsets[i + 1]; ++sp) {
          for (int j = tape.key_spans[sp].first; j < tape.key_spans[sp].second; ++j) {
            const T ds = p[idx] * (dp[idx] - sum) * scale;
            ++idx;
            const T* kj = lt.k.data() + static_cast<std::size_t>(j) * kvd + gi * hd;
            T* dkj = dk.data() + static_cast<std::size_t>(j) * kvd + gi * hd;
            for (std::size_t e = 0; e < hd; ++e) {
              dqh[e] += ds * kj[e];
              dkj[e] += ds * qh[e];
            }
          }
        }
      }
    }

    std::vector<T> dxn1(ND, T(0));
    gemm_rows(lt.q_rows, dq.data(), qd, transpose(tape.weight(l, Proj::q)).data(), d, dxn1.data(), true);
    gemm_rows(lt.kv_rows, dk.data(), kvd, transpose(tape.weight(l, Proj::k)).data(), d, dxn1.data(), true);
    gemm_rows(lt.kv_rows, dv.data(), kvd, transpose(tape.weight(l, Proj::v)).data(), d, dxn1.data(), true);
    if (T* gw = weight_grad(l, Proj::q)) outer_rows(lt.q_rows, lt.xn1.data(), d, dq.data(), qd, gw);
    if (T* gw = weight_grad(l, Proj::k)) outer_rows(lt.kv_rows, lt.xn1.data(), d, dk.data(), kvd, gw);
    if (T* gw = weight_grad(l, Proj::v)) outer_rows(lt.kv_rows, lt.xn1.data(), d, dv.data(), kvd, gw);

    // Gradient w.r.t. this layer's input: residual path plus the norm.
    std::vector<T> dx_in(ND, T(0));
    for (int r : lt.q_rows) {
      std::copy_n(dxmid.data() + static_cast<std::size_t>(r) * d, d, dx_in.data() + static_cast<std::size_t>(r) * d);
    }
    rms_norm_backward_rows(lt.kv_rows, lt.x.data(), P.attn_norm.data.data(), lt.inv_rms1.data(), dxn1.data(), d,
                           dx_in.data(), full ? g.layers[l].attn_norm.data.data() : nullptr);
    dx = std::move(dx_in);
  }

  NamedTensors<T> out;
  if (full) {
    if (L > 0) {
      for (int r : tape.layers[0].kv_rows) {
        const T* src = dx.data() + static_cast<std::size_t>(r) * d;
        T* te = g.tok_emb.row(static_cast<std::size_t>(pk.ids[r]));
        T* pe = g.pos_emb.row(static_cast<std::size_t>(pk.pos[r]));
        for (std::size_t i = 0; i < d; ++i) {
          te[i] += src[i];
          pe[i] += src[i];
        }
      }
    }
    g.for_each([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, std::move(t)); });
    return out;
  }

  // Chain rule through W_eff = W + s·A·B.
  const T s = static_cast<T>(adapters->config.scale());
  for (std::size_t l = 0; l < L; ++l) {
    for (Proj p : kAllProjs) {
      const auto* ad = adapters->get(l, p);
      if (!ad) continue;
      const std::string name = "lora.layers." + std::to_string(l) + "." + proj_name(p);
      const std::size_t in = ad->a.rows(), r = ad->a.cols(), cols = ad->b.cols();
      Tensor<T> dW = std::move(d_eff[l][static_cast<std::size_t>(p)]);
      if (dW.data.empty()) dW = Tensor<T>({in, cols});
      Tensor<T> dA({in, r}), dB({r, cols});
      for (std::size_t i = 0; i < in; ++i) {
        const T* dwr = dW.row(i);
        for (std::size_t k = 0; k < r; ++k) {
          const T* br = ad->b.row(k);
          T acc = 0;
          for (std::size_t j = 0; j < cols; ++j) acc += dwr[j] * br[j];
          dA.at(i, k) = s * acc;
          const T a = ad->a.at(i, k);
          T* dbr = dB.row(k);
          for (std::size_t j = 0; j < cols; ++j) dbr[j] += s * a * dwr[j];
        }
      }
      out.emplace_back(name + ".a", std::move(dA));
      out.emplace_back(name + ".b", std::move(dB));
    }
  }
  return out;
}

template <class T>
Tensor<T> forward(const Params<T>& params, std::span<const int> ids) {
  const std::vector<std::vector<int>> seqs{std::vector<int>(ids.begin(), ids.end())};
  PackResult pr = pack(seqs);
  std::vector<int> rows = pr.rows.empty() ? std::vector<int>{} : pr.rows[0];
  return forward_tape<T>(params, nullptr, std::move(pr.packed), std::move(rows)).logits;
}

template <class T>
Tensor<T> forward(const lora::AdaptedModel<T>& model, std::span<const int> ids) {
  const std::vector<std::vector<int>> seqs{std::vector<int>(ids.begin(), ids.end())};
  PackResult pr = pack(seqs);
  std::vector<int> rows = pr.rows.empty() ? std::vector<int>{} : pr.rows[0];
  return forward_tape<T>(*model.base, &model.adapters, std::move(pr.packed), std::move(rows)).logits;
}

TargetSequence conditional(std::span<const int> prompt, std::span<const int> completion, bool include_eos) {
  TargetSequence ts;
  ts.input.reserve(prompt.size() + completion.size() + 2);
  ts.input.push_back(tok::kBos);
  ts.input.insert(ts.input.end(), prompt.begin(), prompt.end());
  ts.input.push_back(tok::kSep);
  const int sep_pos = static_cast<int>(ts.input.size()) - 1;
  for (std::size_t k = 0; k < completion.size(); ++k) {
    ts.targets.push_back({sep_pos + static_cast<int>(k), completion[k]});
  }
  // The last completion token is only needed as input when it predicts EOS.
  const std::size_t keep = include_eos ? completion.size() : (completion.empty() ? 0 : completion.size() - 1);
  ts.input.insert(ts.input.end(), completion.begin(), completion.begin() + static_cast<std::ptrdiff_t>(keep));
  if (include_eos) ts.targets.push_back({sep_pos + static_cast<int>(completion.size()), tok::kEos});
  return ts;
}

TargetSequence from_framed(const tok::Framed& framed) {
  TargetSequence ts;
  if (framed.ids.empty()) return ts;
  ts.input.assign(framed.ids.begin(), framed.ids.end() - 1);
  for (std::size_t i = 1; i < framed.ids.size(); ++i) {
    if (framed.loss_mask[i]) ts.targets.push_back({static_cast<int>(i) - 1, framed.ids[i]});
  }
  return ts;
}

namespace {

template <class T>
struct Scored {
  Tape<T> tape;
  std::vector<std::vector<int>> target_rows;  // per sequence, per target: logits row
  std::vector<double> row_lse;
  std::vector<double> logprobs;
};

template <class T>
Scored<T> score_sequences(const Params<T>& base, const lora::Adapters<T>* adapters,
                          std::span<const TargetSequence> sequences) {
  std::vector<std::vector<int>> inputs;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) inputs.push_back(s.input);
  PackResult pr = pack(inputs);

  Scored<T> sc;
  std::vector<int> out_index(static_cast<std::size_t>(pr.packed.size()), -1);
  std::vector<int> out_rows;
  sc.target_rows.resize(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    for (const Target& t : sequences[s].targets) {
      if (t.position < 0 || t.position >= static_cast<int>(sequences[s].input.size())) {
        throw std::invalid_argument("target position outside its sequence");
      }
      const int row = pr.rows[s][static_cast<std::size_t>(t.position)];
      if (out_index[row] < 0) {
        out_index[row] = static_cast<int>(out_rows.size());
        out_rows.push_back(row);
      }
      sc.target_rows[s].push_back(out_index[row]);
    }
  }
  sc.tape = forward_tape<T>(base, adapters, std::move(pr.packed), std::move(out_rows));

  const std::size_t V = static_cast<std::size_t>(base.config.vocab);
  const std::size_t R = sc.tape.out_rows.size();
  sc.row_lse.resize(R);
  for (std::size_t o = 0; o < R; ++o) {
    const T* lg = sc.tape.logits.row(o);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(lg[v]));
    double sum = 0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(lg[v]) - mx);
    sc.row_lse[o] = mx + std::log(sum);
  }
  sc.logprobs.assign(sequences.size(), 0.0);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    for (std::size_t t = 0; t < sequences[s].targets.size(); ++t) {
      const int o = sc.target_rows[s][t];
      sc.logprobs[s] += static_cast<double>(sc.tape.logits.at(static_cast<std::size_t>(o),
                                                               static_cast<std::size_t>(sequences[s].targets[t].token))) -
                        sc.row_lse[static_cast<std::size_t>(o)];
    }
  }
  return sc;
}

template <class T>
NamedTensors<T> zero_grads(const Params<T>& base, const lora::Adapters<T>* adapters) {
  NamedTensors<T> out;
  if (adapters) {
    adapters->for_each([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, Tensor<T>(t.shape)); });
  } else {
    base.for_each([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, Tensor<T>(t.shape)); });
  }
  return out;
}

}  // namespace

template <class T>
std::vector<double> sum_logprobs(const Params<T>& base, const lora::Adapters<T>* adapters,
                                 std::span<const TargetSequence> sequences) {
  bool any = false;
  for (const auto& s : sequences) any = any || !s.targets.empty();
  if (!any) return std::vector<double>(sequences.size(), 0.0);
  return score_sequences(base, adapters, sequences).logprobs;
}

template <class T>
LossAndGrad<T> loss_and_grad(const Params<T>& base, const lora::Adapters<T>* adapters,
                             std::span<const TargetSequence> sequences, const SequenceLoss& loss) {
  LossAndGrad<T> result;
  bool any = false;
  for (const auto& s : sequences) any = any || !s.targets.empty();
  std::vector<double> adjoint(sequences.size(), 0.0);
  if (!any) {
    result.logprobs.assign(sequences.size(), 0.0);
    result.loss = loss(result.logprobs, adjoint);
    result.grads = zero_grads(base, adapters);
    return result;
  }

  Scored<T> sc = score_sequences(base, adapters, sequences);
  result.logprobs = sc.logprobs;
  result.loss = loss(sc.logprobs, adjoint);

  // d lp / d logits[row, v] = onehot(token) - softmax(row)
  const std::size_t V = static_cast<std::size_t>(base.config.vocab);
  const std::size_t R = sc.tape.out_rows.size();
  std::vector<double> row_weight(R, 0.0);
  std::vector<double> dl(R * V, 0.0);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    if (adjoint[s] == 0.0) continue;
    for (std::size_t t = 0; t < sequences[s].targets.size(); ++t) {
      const auto o = static_cast<std::size_t>(sc.target_rows[s][t]);
      row_weight[o] += adjoint[s];
      dl[o * V + static_cast<std::size_t>(sequences[s].targets[t].token)] += adjoint[s];
    }
  }
  Tensor<T> dlogits({R, V});
  for (std::size_t o = 0; o < R; ++o) {
    const T* lg = sc.tape.logits.row(o);
    for (std::size_t v = 0; v < V; ++v) {
      const double p = std::exp(static_cast<double>(lg[v]) - sc.row_lse[o]);
      dlogits.at(o, v) = static_cast<T>(dl[o * V + v] - row_weight[o] * p);
    }
  }
  result.grads = backward(sc.tape, dlogits);
  return result;
}

template <class T>
double sequence_logprob(const Params<T>& params, std::span<const int> prompt, std::span<const int> completion) {
  const TargetSequence ts = conditional(prompt, completion, false);
  return sum_logprobs<T>(params, nullptr, std::span(&ts, 1)).front();
}

template <class T>
double sequence_logprob(const lora::AdaptedModel<T>& model, std::span<const int> prompt,
                        std::span<const int> completion) {
  const TargetSequence ts = conditional(prompt, completion, false);
  return sum_logprobs<T>(*model.base, &model.adapters, std::span(&ts, 1)).front();
}

#define OFIT_INSTANTIATE(T)                                                                                       \
  template struct Tape<T>;                                                                                        \
  template Tape<T> forward_tape<T>(const Params<T>&, const lora::Adapters<T>*, Packed, std::vector<int>);        \
  template NamedTensors<T> backward<T>(const Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> forward<T>(const Params<T>&, std::span<const int>);                                          \
  template Tensor<T> forward<T>(const lora::AdaptedModel<T>&, std::span<const int>);                              \
  template std::vector<double> sum_logprobs<T>(const Params<T>&, const lora::Adapters<T>*,                        \
                                               std::span<const TargetSequence>);                                  \
  template LossAndGrad<T> loss_and_grad<T>(const Params<T>&, const lora::Adapters<T>*,                           \
                                           std::span<const TargetSequence>, const SequenceLoss&);                 \
  template double sequence_logprob<T>(const Params<T>&, std::span<const int>, std::span<const int>);              \
  template double sequence_logprob<T>(const lora::AdaptedModel<T>&, std::span<const int>, std::span<const int>);

OFIT_INSTANTIATE(float)
OFIT_INSTANTIATE(double)

#undef OFIT_INSTANTIATE

}  // namespace ofit::model
