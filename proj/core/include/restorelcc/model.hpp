#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "restorelcc/dataset.hpp"

namespace rlcc::model {

struct ModelConfig {
  int vocab_size = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_ffn = 256;
  int max_seq_len = 64;
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// All weights of the toy decoder-only transformer. Weight matrices are stored
// row-major as [out][in]; head_bias holds the per-head additive output bias
// slots (zero unless folding has occurred), ffn_bias the per-layer FFN output
// slot.
template <typename S>
struct LayerParamsT {
  std::vector<S> norm1;      // d_model
  std::vector<S> wq, wk, wv; // d_model x d_model
  std::vector<S> wo;         // d_model x d_model
  std::vector<S> head_bias;  // n_heads x d_head
  std::vector<S> norm2;      // d_model
  std::vector<S> w1;         // d_ffn x d_model
  std::vector<S> w2;         // d_model x d_ffn
  std::vector<S> ffn_bias;   // d_model
};

template <typename S>
struct ParamsT {
  ModelConfig config;
  std::vector<S> tok_embed;  // vocab x d_model (also the tied LM head)
  std::vector<S> pos_embed;  // max_seq_len x d_model
  std::vector<LayerParamsT<S>> layers;
  std::vector<S> final_norm;  // d_model
};

using ModelParams = ParamsT<float>;

struct TensorShape {
  std::vector<int> dims;
  size_t numel() const {
    size_t n = 1;
    for (int d : dims) n *= size_t(d);
    return n;
  }
};

// Visits every tensor in checkpoint/manifest order. fn(name, shape, data).
template <typename S, typename F>
void for_each_tensor(ParamsT<S>& p, F&& fn) {
  const auto& c = p.config;
  fn("tok_embed", TensorShape{{c.vocab_size, c.d_model}}, p.tok_embed);
  fn("pos_embed", TensorShape{{c.max_seq_len, c.d_model}}, p.pos_embed);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto& lay = p.layers[size_t(l)];
    fn(pre + "norm1", TensorShape{{c.d_model}}, lay.norm1);
    fn(pre + "wq", TensorShape{{c.d_model, c.d_model}}, lay.wq);
    fn(pre + "wk", TensorShape{{c.d_model, c.d_model}}, lay.wk);
    fn(pre + "wv", TensorShape{{c.d_model, c.d_model}}, lay.wv);
    fn(pre + "wo", TensorShape{{c.d_model, c.d_model}}, lay.wo);
    fn(pre + "head_bias", TensorShape{{c.n_heads, c.d_head}}, lay.head_bias);
    fn(pre + "norm2", TensorShape{{c.d_model}}, lay.norm2);
    fn(pre + "w1", TensorShape{{c.d_ffn, c.d_model}}, lay.w1);
    fn(pre + "w2", TensorShape{{c.d_model, c.d_ffn}}, lay.w2);
    fn(pre + "ffn_bias", TensorShape{{c.d_model}}, lay.ffn_bias);
  }
  fn("final_norm", TensorShape{{c.d_model}}, p.final_norm);
}

template <typename S, typename F>
void for_each_tensor(const ParamsT<S>& p, F&& fn) {
  for_each_tensor(const_cast<ParamsT<S>&>(p),
                  [&](const std::string& name, const TensorShape& shape, std::vector<S>& data) {
                    fn(name, shape, const_cast<const std::vector<S>&>(data));
                  });
}

template <typename S>
ParamsT<S> zeros_like(const ParamsT<S>& p);

template <typename S>
void fill_zero(ParamsT<S>& p);

ModelParams init_params(const ModelConfig& config);
ParamsT<double> widen(const ModelParams& p);

// ---------------------------------------------------------------------------
// Forward pass

enum class PositionPolicy { LastToken, Explicit };

inline const char* position_policy_name(PositionPolicy p) {
  return p == PositionPolicy::LastToken ? "last_token" : "explicit";
}

struct CaptureRequest {
  // (layer, head) pairs; empty means every head.
  std::vector<std::pair<int, int>> heads;
  PositionPolicy policy = PositionPolicy::LastToken;
  // One explicit position per sample when policy == Explicit.
  std::vector<int> positions;
  bool capture_ffn = false;
};

// Captured per-head activations (the post-bias, pre-W^O head outputs) at one
// designated position per sample.
struct ActivationTrace {
  int n_layers = 0;
  int n_heads = 0;
  int d_head = 0;
  int d_model = 0;
  int n_samples = 0;
  std::string policy;
  std::vector<int> sample_ids;
  std::vector<std::pair<int, int>> heads;  // deterministic (l, h) order
  std::vector<float> head_data;            // [heads.size()][n_samples][d_head]
  std::vector<float> ffn_data;             // [n_layers][n_samples][d_model] when captured

  int head_index(int l, int h) const;
  std::span<const float> head_sample(int l, int h, int sample) const;
  std::span<const float> ffn_sample(int l, int sample) const;
};

// Transient additive offsets applied inside the forward pass at the same site
// as the head_bias / ffn_bias slots. Per-position entries are for oracle and
// test paths; replace entries clamp the site output to a target by injecting
// the pointwise difference.
template <typename S>
struct Injections {
  std::vector<std::vector<S>> head_const;     // [L*H], each empty or d_head
  std::vector<std::vector<S>> ffn_const;      // [L], each empty or d_model
  std::vector<std::vector<S>> head_per_pos;   // [L*H], each empty or T*d_head
  std::vector<std::vector<S>> ffn_per_pos;    // [L], each empty or T*d_model
  std::vector<std::vector<S>> head_replace;   // [L*H], each empty or T*d_head
  std::vector<std::vector<S>> ffn_replace;    // [L], each empty or T*d_model

  static Injections sized(const ModelConfig& c) {
    Injections inj;
    inj.head_const.resize(size_t(c.n_layers) * size_t(c.n_heads));
    inj.ffn_const.resize(size_t(c.n_layers));
    inj.head_per_pos.resize(size_t(c.n_layers) * size_t(c.n_heads));
    inj.ffn_per_pos.resize(size_t(c.n_layers));
    inj.head_replace.resize(size_t(c.n_layers) * size_t(c.n_heads));
    inj.ffn_replace.resize(size_t(c.n_layers));
    return inj;
  }
};

// Full per-sequence activation record; backward consumes it, capture reads it.
template <typename S>
struct LayerWork {
  std::vector<S> a;      // T x d, post-norm1
  std::vector<S> q, k, v;
  std::vector<S> probs;  // H x T x T
  std::vector<S> z;      // T x d, effective head outputs (post bias/injection)
  std::vector<S> xmid;   // T x d, after attention residual
  std::vector<S> bn;     // T x d, post-norm2
  std::vector<S> f1;     // T x d_ffn, pre-activation
  std::vector<S> f2;     // T x d_ffn, post-activation
  std::vector<S> ffn_out;  // T x d, effective FFN output (post bias/injection)
};

template <typename S>
struct Workspace {
  int T = 0;
  std::vector<std::vector<S>> xs;  // [L+1] layer inputs, each T x d
  std::vector<LayerWork<S>> lw;
  std::vector<S> fn_out;  // T x d
  std::vector<S> logits;  // T x vocab
};

template <typename S>
void forward_sequence(const ParamsT<S>& p, std::span<const int> tokens, Workspace<S>& ws,
                      const Injections<S>* inj = nullptr);

// Mean next-token cross entropy over targets at positions >= loss_start.
// Fills dlogits (same shape as ws.logits) scaled by `grad_scale` per counted
// token when dlogits != nullptr.
template <typename S>
double sequence_loss(const Workspace<S>& ws, std::span<const int> tokens, int loss_start,
                     std::vector<S>* dlogits, double grad_scale);

// Accumulates gradients into `grads` (same layout as params). When
// weight_grads is false only the bias-slot gradients (head_bias, ffn_bias)
// are accumulated; activations still backpropagate.
template <typename S>
void backward_sequence(const ParamsT<S>& p, std::span<const int> tokens, const Workspace<S>& ws,
                       std::span<const S> dlogits, ParamsT<S>& grads, bool weight_grads);

// Public batched forward per the module contract: returns per-sample logits
// (flattened T_i x vocab) and an optional trace.
struct ForwardResult {
  std::vector<std::vector<float>> logits;
  std::optional<ActivationTrace> trace;
};
ForwardResult forward(const ModelParams& p, std::span<const std::vector<int>> batch,
                      const CaptureRequest* capture = nullptr,
                      const Injections<float>* inj = nullptr);

// ---------------------------------------------------------------------------
// Diagnostics

// LM_Head[phi(z . W^{O,h})] for a single head activation z of length d_head.
std::vector<float> logit_lens(std::span<const float> z, int layer, int head,
                              const ModelParams& p);

double logit_difference(std::span<const float> logits, int correct, int incorrect);

// Adds c into the (layer, head) bias slot and returns the updated copy.
ModelParams inject_head_bias(const ModelParams& p, int layer, int head,
                             std::span<const float> c);
ModelParams inject_ffn_bias(const ModelParams& p, int layer, std::span<const float> c);

// ---------------------------------------------------------------------------
// Training

struct TrainHyper {
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

// Next-token cross-entropy training from scratch on the task's train split.
// Deterministic given config.seed.
TrainResult train_dense(const ModelConfig& config, const harness::TaskDataset& ds,
                        const TrainHyper& hyper);

// Adam over arbitrary flat buffers; shared by dense training, probe training
// and component training so every consumer inherits the same determinism.
class AdamState {
 public:
  AdamState(size_t n, double lr, double beta1, double beta2, double eps);
  void step(std::span<double> params, std::span<const double> grads);
  void step(std::span<float> params, std::span<const float> grads);
  // One optimizer step over a list of tensors laid out back to back in the
  // moment buffers.
  void step_tensors(std::span<std::span<float>> params, std::span<std::span<float>> grads);

 private:
  void update_range(size_t offset, std::span<float> params, std::span<float> grads);

  std::vector<double> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace rlcc::model
