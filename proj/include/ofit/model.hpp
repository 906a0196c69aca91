#pragma once

#include <array>
#include <functional>
#include <span>
#include <vector>

#include "ofit/lora.hpp"
#include "ofit/params.hpp"
#include "ofit/tokenizer.hpp"

namespace ofit::model {

// A set of token sequences packed into one prefix tree. Sequences that share
// a prefix share its rows; each tree edge run is a contiguous segment, so a
// row attends to its own segment and its ancestors only.
struct Packed {
  struct Segment {
    int begin = 0;   // first row
    int end = 0;     // one past the last row
    int parent = -1;
  };
  std::vector<int> ids;  // token per row
  std::vector<int> pos;  // logical position per row
  std::vector<int> seg;  // segment per row
  std::vector<Segment> segments;

  int size() const { return static_cast<int>(ids.size()); }
};

struct PackResult {
  Packed packed;
  // rows[s][i]: packed row holding position i of sequence s
  std::vector<std::vector<int>> rows;
};

PackResult pack(std::span<const std::vector<int>> sequences);

// Per-layer activations recorded by the forward pass.
template <class T>
struct LayerTape {
  std::vector<int> q_rows;   // rows whose output this layer computes
  std::vector<int> kv_rows;  // rows whose input this layer reads
  std::vector<T> x, xn1, inv_rms1;
  std::vector<T> q, k, v;
  std::vector<T> probs;  // H weights per key, laid out per query row
  std::vector<T> ctx;
  std::vector<T> xmid, xn2, inv_rms2;
  std::vector<T> gate, up, act;
};

template <class T>
struct Tape {
  const Params<T>* base = nullptr;
  const lora::Adapters<T>* adapters = nullptr;
  Packed packed;
  // Attention key ranges per row (CSR over key_spans).
  std::vector<int> key_offsets;
  std::vector<std::pair<int, int>> key_spans;
  std::vector<int> key_base;  // prefix sum of key counts per row
  // Effective projection weights (only filled where an adapter exists).
  std::vector<std::array<Tensor<T>, 4>> effective;
  std::vector<LayerTape<T>> layers;
  std::vector<T> x_out;  // output of the last layer, [N, d]
  std::vector<int> out_rows;
  std::vector<T> xf, inv_rmsf;  // final-normed rows, [R, d]
  Tensor<T> logits;             // [R, vocab]

  const Tensor<T>& weight(std::size_t layer, Proj p) const;
};

// Runs the network and records intermediates. Logits are produced for
// `out_rows` only, in the given order.
template <class T>
Tape<T> forward_tape(const Params<T>& base, const lora::Adapters<T>* adapters, Packed packed,
                     std::vector<int> out_rows);

// Reverse pass for d(loss)/d(logits) given row-aligned with tape.out_rows.
// With adapters present the result holds only the adapter gradients
// ("lora.*" names); otherwise one gradient per base tensor.
template <class T>
NamedTensors<T> backward(const Tape<T>& tape, const Tensor<T>& dlogits);

// Logits [T, vocab] for a single token sequence.
template <class T>
Tensor<T> forward(const Params<T>& params, std::span<const int> ids);
template <class T>
Tensor<T> forward(const lora::AdaptedModel<T>& model, std::span<const int> ids);

// A token sequence plus the (position, next token) pairs scored on it.
struct Target {
  int position;
  int token;
};
struct TargetSequence {
  std::vector<int> input;
  std::vector<Target> targets;
};

// log p(completion | prompt) under [BOS] prompt [SEP] completion framing.
// The EOS term is included only when `include_eos` is set.
TargetSequence conditional(std::span<const int> prompt, std::span<const int> completion, bool include_eos);
// Targets wherever the framed loss mask is set.
TargetSequence from_framed(const tok::Framed& framed);

// Sum of target log-probabilities per sequence; shared prefixes are
// evaluated once.
template <class T>
std::vector<double> sum_logprobs(const Params<T>& base, const lora::Adapters<T>* adapters,
                                 std::span<const TargetSequence> sequences);

// Given per-sequence log-prob sums, returns the loss and writes d(loss)/d(sum).
using SequenceLoss = std::function<double(std::span<const double> logprobs, std::span<double> adjoint)>;

template <class T>
struct LossAndGrad {
  double loss = 0;
  std::vector<double> logprobs;
  NamedTensors<T> grads;
};

template <class T>
LossAndGrad<T> loss_and_grad(const Params<T>& base, const lora::Adapters<T>* adapters,
                             std::span<const TargetSequence> sequences, const SequenceLoss& loss);

// Natural-log probability of the completion given the prompt (EOS excluded).
template <class T>
double sequence_logprob(const Params<T>& params, std::span<const int> prompt, std::span<const int> completion);
template <class T>
double sequence_logprob(const lora::AdaptedModel<T>& model, std::span<const int> prompt,
                        std::span<const int> completion);

}  // namespace ofit::model
