#include "restorelcc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "restorelcc/util.hpp"

namespace rlcc::model {

void ModelConfig::validate() const {
  if (vocab_size < 1 || n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 ||
      d_ffn < 1 || max_seq_len < 1) {
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  }
  if (d_model != n_heads * d_head) {
    throw std::invalid_argument("ModelConfig: d_model must equal n_heads * d_head");
  }
}

namespace {

// y[t,o] = sum_i x[t,i] * w[o,i]; w row-major [out][in].
template <typename S>
void linear_forward(const S* __restrict__ x, const S* __restrict__ w, S* __restrict__ y,
                    int T, int din, int dout) {
  for (int t = 0; t < T; ++t) {
    const S* xt = x + size_t(t) * din;
    S* yt = y + size_t(t) * dout;
    for (int o = 0; o < dout; ++o) {
      const S* wo = w + size_t(o) * din;
      S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int i = 0;
      for (; i + 4 <= din; i += 4) {
        s0 += xt[i] * wo[i];
        s1 += xt[i + 1] * wo[i + 1];
        s2 += xt[i + 2] * wo[i + 2];
        s3 += xt[i + 3] * wo[i + 3];
      }
      S s = (s0 + s1) + (s2 + s3);
      for (; i < din; ++i) s += xt[i] * wo[i];
      yt[o] = s;
    }
  }
}

// dx[t,i] += sum_o dy[t,o] * w[o,i]
template <typename S>
void linear_backward_input(const S* __restrict__ dy, const S* __restrict__ w,
                           S* __restrict__ dx, int T, int din, int dout) {
  for (int t = 0; t < T; ++t) {
    const S* dyt = dy + size_t(t) * dout;
    S* dxt = dx + size_t(t) * din;
    for (int o = 0; o < dout; ++o) {
      const S g = dyt[o];
      if (g == S(0)) continue;
      const S* wo = w + size_t(o) * din;
      for (int i = 0; i < din; ++i) dxt[i] += g * wo[i];
    }
  }
}

// dw[o,i] += sum_t dy[t,o] * x[t,i]
template <typename S>
void linear_backward_weight(const S* __restrict__ dy, const S* __restrict__ x,
                            S* __restrict__ dw, int T, int din, int dout) {
  for (int t = 0; t < T; ++t) {
    const S* dyt = dy + size_t(t) * dout;
    const S* xt = x + size_t(t) * din;
    for (int o = 0; o < dout; ++o) {
      const S g = dyt[o];
      if (g == S(0)) continue;
      S* dwo = dw + size_t(o) * din;
      for (int i = 0; i < din; ++i) dwo[i] += g * xt[i];
    }
  }
}

// RMS norm without an epsilon term so the map is exactly scale invariant;
// an all-zero row maps to zero.
template <typename S>
void rmsnorm_forward(const S* x, const S* g, S* y, int T, int d) {
  for (int t = 0; t < T; ++t) {
    const S* xt = x + size_t(t) * d;
    S* yt = y + size_t(t) * d;
    S ss = 0;
    for (int i = 0; i < d; ++i) ss += xt[i] * xt[i];
    if (ss == S(0)) {
      for (int i = 0; i < d; ++i) yt[i] = 0;
      continue;
    }
    const S r = std::sqrt(ss / S(d));
    for (int i = 0; i < d; ++i) yt[i] = g[i] * (xt[i] / r);
  }
}

template <typename S>
void rmsnorm_backward(const S* x, const S* g, const S* dy, S* dx_accum, S* dg_accum, int T,
                      int d) {
  for (int t = 0; t < T; ++t) {
    const S* xt = x + size_t(t) * d;
    const S* dyt = dy + size_t(t) * d;
    S* dxt = dx_accum + size_t(t) * d;
    S ss = 0;
    for (int i = 0; i < d; ++i) ss += xt[i] * xt[i];
    if (ss == S(0)) continue;
    const S r = std::sqrt(ss / S(d));
    S proj = 0;
    for (int i = 0; i < d; ++i) proj += dyt[i] * g[i] * xt[i];
    const S k = proj / (S(d) * r * r * r);
    for (int i = 0; i < d; ++i) {
      dxt[i] += dyt[i] * g[i] / r - xt[i] * k;
      if (dg_accum) dg_accum[i] += dyt[i] * xt[i] / r;
    }
  }
}

template <typename S>
S gelu(S x) {
  const S a = S(0.7978845608028654);  // sqrt(2/pi)
  const S b = S(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(a * (x + b * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  const S a = S(0.7978845608028654);
  const S b = S(0.044715);
  const S u = a * (x + b * x * x * x);
  const S th = std::tanh(u);
  const S sech2 = S(1) - th * th;
  return S(0.5) * (S(1) + th) + S(0.5) * x * sech2 * a * (S(1) + S(3) * b * x * x);
}

template <typename S>
void apply_site_offsets(S* z, int T, int d_head, int n_heads, int layer,
                        const std::vector<S>* slot_bias, const Injections<S>* inj) {
  const int d = d_head * n_heads;
  for (int h = 0; h < n_heads; ++h) {
    const size_t site = size_t(layer) * n_heads + size_t(h);
    const S* bias = slot_bias ? slot_bias->data() + size_t(h) * d_head : nullptr;
    const std::vector<S>* cst = nullptr;
    const std::vector<S>* per = nullptr;
    const std::vector<S>* rep = nullptr;
    if (inj) {
      if (!inj->head_const[site].empty()) cst = &inj->head_const[site];
      if (!inj->head_per_pos[site].empty()) per = &inj->head_per_pos[site];
      if (!inj->head_replace[site].empty()) rep = &inj->head_replace[site];
    }
    if (!bias && !cst && !per && !rep) continue;
    for (int t = 0; t < T; ++t) {
      S* zt = z + size_t(t) * d + size_t(h) * d_head;
      if (rep) {
        // clamp by injecting the pointwise loss: z + (target - z)
        const S* rt = rep->data() + size_t(t) * d_head;
        for (int j = 0; j < d_head; ++j) zt[j] += rt[j] - zt[j];
        continue;
      }
      for (int j = 0; j < d_head; ++j) {
        S add = 0;
        if (bias) add += bias[j];
        if (cst) add += (*cst)[size_t(j)];
        if (per) add += (*per)[size_t(t) * d_head + j];
        zt[j] += add;
      }
    }
  }
}

template <typename S>
void apply_ffn_offsets(S* y, int T, int d, int layer, const std::vector<S>& slot_bias,
                       const Injections<S>* inj) {
  const std::vector<S>* cst = nullptr;
  const std::vector<S>* per = nullptr;
  const std::vector<S>* rep = nullptr;
  if (inj) {
    if (!inj->ffn_const[size_t(layer)].empty()) cst = &inj->ffn_const[size_t(layer)];
    if (!inj->ffn_per_pos[size_t(layer)].empty()) per = &inj->ffn_per_pos[size_t(layer)];
    if (!inj->ffn_replace[size_t(layer)].empty()) rep = &inj->ffn_replace[size_t(layer)];
  }
  bool slot_nonzero = false;
  for (S v : slot_bias) {
    if (v != S(0)) {
      slot_nonzero = true;
      break;
    }
  }
  if (!slot_nonzero && !cst && !per && !rep) return;
  for (int t = 0; t < T; ++t) {
    S* yt = y + size_t(t) * d;
    if (rep) {
      const S* rt = rep->data() + size_t(t) * d;
      for (int j = 0; j < d; ++j) yt[j] += rt[j] - yt[j];
      continue;
    }
    for (int j = 0; j < d; ++j) {
      S add = slot_bias[size_t(j)];
      if (cst) add += (*cst)[size_t(j)];
      if (per) add += (*per)[size_t(t) * d + j];
      yt[j] += add;
    }
  }
}

}  // namespace

template <typename S>
ParamsT<S> zeros_like(const ParamsT<S>& p) {
  ParamsT<S> z;
  z.config = p.config;
  z.tok_embed.assign(p.tok_embed.size(), S(0));
  z.pos_embed.assign(p.pos_embed.size(), S(0));
  z.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& src = p.layers[l];
    auto& dst = z.layers[l];
    dst.norm1.assign(src.norm1.size(), S(0));
    dst.wq.assign(src.wq.size(), S(0));
    dst.wk.assign(src.wk.size(), S(0));
    dst.wv.assign(src.wv.size(), S(0));
    dst.wo.assign(src.wo.size(), S(0));
    dst.head_bias.assign(src.head_bias.size(), S(0));
    dst.norm2.assign(src.norm2.size(), S(0));
    dst.w1.assign(src.w1.size(), S(0));
    dst.w2.assign(src.w2.size(), S(0));
    dst.ffn_bias.assign(src.ffn_bias.size(), S(0));
  }
  z.final_norm.assign(p.final_norm.size(), S(0));
  return z;
}

template <typename S>
void fill_zero(ParamsT<S>& p) {
  for_each_tensor(p, [](const std::string&, const TensorShape&, std::vector<S>& data) {
    std::fill(data.begin(), data.end(), S(0));
  });
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int d = config.d_model;
  p.tok_embed.resize(size_t(config.vocab_size) * d);
  p.pos_embed.resize(size_t(config.max_seq_len) * d);
  p.layers.resize(size_t(config.n_layers));
  for (auto& lay : p.layers) {
    lay.norm1.assign(size_t(d), 1.0f);
    lay.wq.resize(size_t(d) * d);
    lay.wk.resize(size_t(d) * d);
    lay.wv.resize(size_t(d) * d);
    lay.wo.resize(size_t(d) * d);
    lay.head_bias.assign(size_t(config.n_heads) * config.d_head, 0.0f);
    lay.norm2.assign(size_t(d), 1.0f);
    lay.w1.resize(size_t(config.d_ffn) * d);
    lay.w2.resize(size_t(d) * config.d_ffn);
    lay.ffn_bias.assign(size_t(d), 0.0f);
  }
  p.final_norm.assign(size_t(d), 1.0f);

  Rng rng(config.seed * 0x9e3779b97f4a7c15ull + 0x5175636b);
  const double embed_std = 0.08;
  const double in_std = 1.0 / std::sqrt(double(d));
  const double ffn_in_std = 1.0 / std::sqrt(double(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (auto& v : p.tok_embed) v = float(embed_std * rng.next_normal());
  for (auto& v : p.pos_embed) v = float(embed_std * rng.next_normal());
  for (auto& lay : p.layers) {
    for (auto& v : lay.wq) v = float(in_std * rng.next_normal());
    for (auto& v : lay.wk) v = float(in_std * rng.next_normal());
    for (auto& v : lay.wv) v = float(in_std * rng.next_normal());
    for (auto& v : lay.wo) v = float(in_std * out_scale * rng.next_normal());
    for (auto& v : lay.w1) v = float(ffn_in_std * rng.next_normal());
    for (auto& v : lay.w2) v = float((1.0 / std::sqrt(double(config.d_ffn))) * out_scale *
                                     rng.next_normal());
  }
  return p;
}

ParamsT<double> widen(const ModelParams& p) {
  ParamsT<double> w;
  w.config = p.config;
  auto conv = [](const std::vector<float>& src) {
    return std::vector<double>(src.begin(), src.end());
  };
  w.tok_embed = conv(p.tok_embed);
  w.pos_embed = conv(p.pos_embed);
  w.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& s = p.layers[l];
    auto& d = w.layers[l];
    d.norm1 = conv(s.norm1);
    d.wq = conv(s.wq);
    d.wk = conv(s.wk);
    d.wv = conv(s.wv);
    d.wo = conv(s.wo);
    d.head_bias = conv(s.head_bias);
    d.norm2 = conv(s.norm2);
    d.w1 = conv(s.w1);
    d.w2 = conv(s.w2);
    d.ffn_bias = conv(s.ffn_bias);
  }
  w.final_norm = conv(p.final_norm);
  return w;
}

int ActivationTrace::head_index(int l, int h) const {
  for (size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].first == l && heads[i].second == h) return int(i);
  }
  return -1;
}

std::span<const float> ActivationTrace::head_sample(int l, int h, int sample) const {
  const int idx = head_index(l, h);
  if (idx < 0) throw std::out_of_range("ActivationTrace: head not captured");
  return {head_data.data() + (size_t(idx) * n_samples + sample) * d_head, size_t(d_head)};
}

std::span<const float> ActivationTrace::ffn_sample(int l, int sample) const {
  if (ffn_data.empty()) throw std::out_of_range("ActivationTrace: FFN not captured");
  return {ffn_data.data() + (size_t(l) * n_samples + sample) * d_model, size_t(d_model)};
}

template <typename S>
void forward_sequence(const ParamsT<S>& p, std::span<const int> tokens, Workspace<S>& ws,
                      const Injections<S>* inj) {
  const auto& c = p.config;
  const int T = int(tokens.size());
  if (T < 1) throw std::invalid_argument("forward: empty token sequence");
  if (T > c.max_seq_len) throw std::invalid_argument("forward: sequence exceeds max_seq_len");
  for (int t = 0; t < T; ++t) {
    if (tokens[size_t(t)] < 0 || tokens[size_t(t)] >= c.vocab_size) {
      throw std::invalid_argument("forward: token id out of range at position " +
                                  std::to_string(t));
    }
  }

  const int d = c.d_model;
  const int H = c.n_heads;
  const int dh = c.d_head;
  const S scale = S(1) / std::sqrt(S(dh));

  ws.T = T;
  ws.xs.assign(size_t(c.n_layers) + 1, std::vector<S>(size_t(T) * d));
  ws.lw.assign(size_t(c.n_layers), LayerWork<S>{});
  auto& x0 = ws.xs[0];
  for (int t = 0; t < T; ++t) {
    const S* te = p.tok_embed.data() + size_t(tokens[size_t(t)]) * d;
    const S* pe = p.pos_embed.data() + size_t(t) * d;
    S* xt = x0.data() + size_t(t) * d;
    for (int i = 0; i < d; ++i) xt[i] = te[i] + pe[i];
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lay = p.layers[size_t(l)];
    auto& lw = ws.lw[size_t(l)];
    const auto& x = ws.xs[size_t(l)];
    lw.a.resize(size_t(T) * d);
    rmsnorm_forward(x.data(), lay.norm1.data(), lw.a.data(), T, d);

    lw.q.resize(size_t(T) * d);
    lw.k.resize(size_t(T) * d);
    lw.v.resize(size_t(T) * d);
    linear_forward(lw.a.data(), lay.wq.data(), lw.q.data(), T, d, d);
    linear_forward(lw.a.data(), lay.wk.data(), lw.k.data(), T, d, d);
    linear_forward(lw.a.data(), lay.wv.data(), lw.v.data(), T, d, d);

    lw.probs.assign(size_t(H) * T * T, S(0));
    lw.z.assign(size_t(T) * d, S(0));
    std::vector<S> srow(size_t(T), S(0));
    for (int h = 0; h < H; ++h) {
      S* probs_h = lw.probs.data() + size_t(h) * T * T;
      for (int t = 0; t < T; ++t) {
        const S* qt = lw.q.data() + size_t(t) * d + size_t(h) * dh;
        S mx = std::numeric_limits<S>::lowest();
        for (int u = 0; u <= t; ++u) {
          const S* ku = lw.k.data() + size_t(u) * d + size_t(h) * dh;
          S s = 0;
          for (int j = 0; j < dh; ++j) s += qt[j] * ku[j];
          s *= scale;
          srow[size_t(u)] = s;
          mx = std::max(mx, s);
        }
        S denom = 0;
        for (int u = 0; u <= t; ++u) {
          const S e = std::exp(srow[size_t(u)] - mx);
          srow[size_t(u)] = e;
          denom += e;
        }
        S* pt = probs_h + size_t(t) * T;
        S* zt = lw.z.data() + size_t(t) * d + size_t(h) * dh;
        for (int u = 0; u <= t; ++u) {
          const S pr = srow[size_t(u)] / denom;
          pt[u] = pr;
          const S* vu = lw.v.data() + size_t(u) * d + size_t(h) * dh;
          for (int j = 0; j < dh; ++j) zt[j] += pr * vu[j];
        }
      }
    }
    apply_site_offsets(lw.z.data(), T, dh, H, l, &lay.head_bias, inj);

    std::vector<S> attn(size_t(T) * d);
    linear_forward(lw.z.data(), lay.wo.data(), attn.data(), T, d, d);
    lw.xmid.resize(size_t(T) * d);
    for (size_t i = 0; i < attn.size(); ++i) lw.xmid[i] = x[i] + attn[i];

    lw.bn.resize(size_t(T) * d);
    rmsnorm_forward(lw.xmid.data(), lay.norm2.data(), lw.bn.data(), T, d);
    lw.f1.resize(size_t(T) * c.d_ffn);
    linear_forward(lw.bn.data(), lay.w1.data(), lw.f1.data(), T, d, c.d_ffn);
    lw.f2.resize(lw.f1.size());
    for (size_t i = 0; i < lw.f1.size(); ++i) lw.f2[i] = gelu(lw.f1[i]);
    lw.ffn_out.resize(size_t(T) * d);
    linear_forward(lw.f2.data(), lay.w2.data(), lw.ffn_out.data(), T, c.d_ffn, d);
    apply_ffn_offsets(lw.ffn_out.data(), T, d, l, lay.ffn_bias, inj);

    auto& xn = ws.xs[size_t(l) + 1];
    for (size_t i = 0; i < xn.size(); ++i) xn[i] = lw.xmid[i] + lw.ffn_out[i];
  }

  ws.fn_out.resize(size_t(T) * d);
  rmsnorm_forward(ws.xs[size_t(c.n_layers)].data(), p.final_norm.data(), ws.fn_out.data(), T,
                  d);
  ws.logits.resize(size_t(T) * c.vocab_size);
  linear_forward(ws.fn_out.data(), p.tok_embed.data(), ws.logits.data(), T, d, c.vocab_size);
}

template <typename S>
double sequence_loss(const Workspace<S>& ws, std::span<const int> tokens, int loss_start,
                     std::vector<S>* dlogits, double grad_scale) {
  const int T = ws.T;
  const int V = int(ws.logits.size()) / T;
  if (loss_start < 1) loss_start = 1;
  if (dlogits) dlogits->assign(ws.logits.size(), S(0));
  double total = 0.0;
  int count = 0;
  std::vector<double> prob(size_t(V), 0.0);
  for (int t = loss_start - 1; t < T - 1; ++t) {
    const int target = tokens[size_t(t) + 1];
    const S* row = ws.logits.data() + size_t(t) * V;
    double mx = -1e300;
    for (int v = 0; v < V; ++v) mx = std::max(mx, double(row[v]));
    double denom = 0.0;
    for (int v = 0; v < V; ++v) {
      prob[size_t(v)] = std::exp(double(row[v]) - mx);
      denom += prob[size_t(v)];
    }
    total += std::log(denom) + mx - double(row[target]);
    ++count;
    if (dlogits) {
      S* drow = dlogits->data() + size_t(t) * V;
      for (int v = 0; v < V; ++v) {
        double g = prob[size_t(v)] / denom;
        if (v == target) g -= 1.0;
        drow[v] = S(g * grad_scale);
      }
    }
  }
  return count > 0 ? total / count : 0.0;
}

template <typename S>
void backward_sequence(const ParamsT<S>& p, std::span<const int> tokens, const Workspace<S>& ws,
                       std::span<const S> dlogits, ParamsT<S>& grads, bool weight_grads) {
  const auto& c = p.config;
  const int T = ws.T;
  const int d = c.d_model;
  const int H = c.n_heads;
  const int dh = c.d_head;
  const int V = c.vocab_size;
  const S scale = S(1) / std::sqrt(S(dh));

  // logits = fn_out . tok_embed^T
  std::vector<S> dfn(size_t(T) * d, S(0));
  linear_backward_input(dlogits.data(), p.tok_embed.data(), dfn.data(), T, d, V);
  if (weight_grads) {
    linear_backward_weight(dlogits.data(), ws.fn_out.data(), grads.tok_embed.data(), T, d, V);
  }

  std::vector<S> dx(size_t(T) * d, S(0));
  rmsnorm_backward(ws.xs[size_t(c.n_layers)].data(), p.final_norm.data(), dfn.data(), dx.data(),
                   weight_grads ? grads.final_norm.data() : nullptr, T, d);

  std::vector<S> dxmid(size_t(T) * d), dz(size_t(T) * d), da(size_t(T) * d);
  std::vector<S> df1(size_t(T) * c.d_ffn), df2(size_t(T) * c.d_ffn);
  std::vector<S> dq(size_t(T) * d), dk(size_t(T) * d), dv(size_t(T) * d);
  std::vector<S> dbn(size_t(T) * d);
  std::vector<S> dprob(size_t(T), S(0));

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& lay = p.layers[size_t(l)];
    auto& glay = grads.layers[size_t(l)];
    const auto& lw = ws.lw[size_t(l)];

    // dx currently holds dL/d xs[l+1]; the FFN output and xmid both receive it.
    for (size_t i = 0; i < glay.ffn_bias.size(); ++i) {
      // bias slot gradient: sum over positions
      S s = 0;
      for (int t = 0; t < T; ++t) s += dx[size_t(t) * d + i];
      glay.ffn_bias[i] += s;
    }
    std::fill(df2.begin(), df2.end(), S(0));
    linear_backward_input(dx.data(), lay.w2.data(), df2.data(), T, c.d_ffn, d);
    if (weight_grads) {
      linear_backward_weight(dx.data(), lw.f2.data(), glay.w2.data(), T, c.d_ffn, d);
    }
    for (size_t i = 0; i < df1.size(); ++i) df1[i] = df2[i] * gelu_grad(lw.f1[i]);
    std::fill(dbn.begin(), dbn.end(), S(0));
    linear_backward_input(df1.data(), lay.w1.data(), dbn.data(), T, d, c.d_ffn);
    if (weight_grads) {
      linear_backward_weight(df1.data(), lw.bn.data(), glay.w1.data(), T, d, c.d_ffn);
    }
    dxmid = dx;  // residual branch
    rmsnorm_backward(lw.xmid.data(), lay.norm2.data(), dbn.data(), dxmid.data(),
                     weight_grads ? glay.norm2.data() : nullptr, T, d);

    // dxmid -> attention output and residual into x.
    std::fill(dz.begin(), dz.end(), S(0));
    linear_backward_input(dxmid.data(), lay.wo.data(), dz.data(), T, d, d);
    if (weight_grads) {
      linear_backward_weight(dxmid.data(), lw.z.data(), glay.wo.data(), T, d, d);
    }
    for (int h = 0; h < H; ++h) {
      S* gb = glay.head_bias.data() + size_t(h) * dh;
      for (int t = 0; t < T; ++t) {
        const S* dzt = dz.data() + size_t(t) * d + size_t(h) * dh;
        for (int j = 0; j < dh; ++j) gb[j] += dzt[j];
      }
    }

    std::fill(dq.begin(), dq.end(), S(0));
    std::fill(dk.begin(), dk.end(), S(0));
    std::fill(dv.begin(), dv.end(), S(0));
    for (int h = 0; h < H; ++h) {
      const S* probs_h = lw.probs.data() + size_t(h) * T * T;
      for (int t = 0; t < T; ++t) {
        const S* pt = probs_h + size_t(t) * T;
        const S* dzt = dz.data() + size_t(t) * d + size_t(h) * dh;
        // dp_u = dz . v_u ; dv_u += p_u dz
        S dotsum = 0;
        for (int u = 0; u <= t; ++u) {
          const S* vu = lw.v.data() + size_t(u) * d + size_t(h) * dh;
          S dp = 0;
          for (int j = 0; j < dh; ++j) dp += dzt[j] * vu[j];
          dprob[size_t(u)] = dp;
          dotsum += dp * pt[u];
          S* dvu = dv.data() + size_t(u) * d + size_t(h) * dh;
          const S pu = pt[u];
          if (pu != S(0)) {
            for (int j = 0; j < dh; ++j) dvu[j] += pu * dzt[j];
          }
        }
        const S* qt = lw.q.data() + size_t(t) * d + size_t(h) * dh;
        S* dqt = dq.data() + size_t(t) * d + size_t(h) * dh;
        for (int u = 0; u <= t; ++u) {
          const S dscore = pt[u] * (dprob[size_t(u)] - dotsum) * scale;
          if (dscore == S(0)) continue;
          const S* ku = lw.k.data() + size_t(u) * d + size_t(h) * dh;
          S* dku = dk.data() + size_t(u) * d + size_t(h) * dh;
          for (int j = 0; j < dh; ++j) {
            dqt[j] += dscore * ku[j];
            dku[j] += dscore * qt[j];
          }
        }
      }
    }

    std::fill(da.begin(), da.end(), S(0));
    linear_backward_input(dq.data(), lay.wq.data(), da.data(), T, d, d);
    linear_backward_input(dk.data(), lay.wk.data(), da.data(), T, d, d);
    linear_backward_input(dv.data(), lay.wv.data(), da.data(), T, d, d);
    if (weight_grads) {
      linear_backward_weight(dq.data(), lw.a.data(), glay.wq.data(), T, d, d);
      linear_backward_weight(dk.data(), lw.a.data(), glay.wk.data(), T, d, d);
      linear_backward_weight(dv.data(), lw.a.data(), glay.wv.data(), T, d, d);
    }

    // dL/d xs[l] = dxmid (residual) + norm1 backward of da
    rmsnorm_backward(ws.xs[size_t(l)].data(), lay.norm1.data(), da.data(), dxmid.data(),
                     weight_grads ? glay.norm1.data() : nullptr, T, d);
    dx = dxmid;
  }

  if (weight_grads) {
    for (int t = 0; t < T; ++t) {
      const S* dxt = dx.data() + size_t(t) * d;
      S* ge = grads.tok_embed.data() + size_t(tokens[size_t(t)]) * d;
      S* gp = grads.pos_embed.data() + size_t(t) * d;
      for (int i = 0; i < d; ++i) {
        ge[i] += dxt[i];
        gp[i] += dxt[i];
      }
    }
  }
}

ForwardResult forward(const ModelParams& p, std::span<const std::vector<int>> batch,
                      const CaptureRequest* capture, const Injections<float>* inj) {
  const auto& c = p.config;
  ForwardResult out;
  out.logits.resize(batch.size());

  std::vector<std::pair<int, int>> heads;
  if (capture) {
    heads = capture->heads;
    if (heads.empty()) {
      for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) heads.emplace_back(l, h);
      }
    }
    for (auto [l, h] : heads) {
      if (l < 0 || l >= c.n_layers || h < 0 || h >= c.n_heads) {
        throw std::out_of_range("capture: layer/head out of range");
      }
    }
    if (capture->policy == PositionPolicy::Explicit &&
        capture->positions.size() != batch.size()) {
      throw std::invalid_argument("capture: one explicit position per sample required");
    }
    ActivationTrace tr;
    tr.n_layers = c.n_layers;
    tr.n_heads = c.n_heads;
    tr.d_head = c.d_head;
    tr.d_model = c.d_model;
    tr.n_samples = int(batch.size());
    tr.policy = position_policy_name(capture->policy);
    tr.heads = heads;
    tr.sample_ids.resize(batch.size());
    std::iota(tr.sample_ids.begin(), tr.sample_ids.end(), 0);
    tr.head_data.assign(heads.size() * batch.size() * size_t(c.d_head), 0.0f);
    if (capture->capture_ffn) {
      tr.ffn_data.assign(size_t(c.n_layers) * batch.size() * size_t(c.d_model), 0.0f);
    }
    out.trace = std::move(tr);
  }

  Workspace<float> ws;
  for (size_t s = 0; s < batch.size(); ++s) {
    forward_sequence(p, batch[s], ws, inj);
    out.logits[s] = ws.logits;
    if (capture) {
      int pos = ws.T - 1;
      if (capture->policy == PositionPolicy::Explicit) {
        pos = capture->positions[s];
        if (pos < 0 || pos >= ws.T) {
          throw std::out_of_range("capture: explicit position out of range");
        }
      }
      auto& tr = *out.trace;
      for (size_t i = 0; i < tr.heads.size(); ++i) {
        const auto [l, h] = tr.heads[i];
        const float* z =
            ws.lw[size_t(l)].z.data() + size_t(pos) * c.d_model + size_t(h) * c.d_head;
        float* dst = tr.head_data.data() + (i * batch.size() + s) * size_t(c.d_head);
        std::memcpy(dst, z, sizeof(float) * size_t(c.d_head));
      }
      if (capture->capture_ffn) {
        for (int l = 0; l < c.n_layers; ++l) {
          const float* f = ws.lw[size_t(l)].ffn_out.data() + size_t(pos) * c.d_model;
          float* dst =
              tr.ffn_data.data() + (size_t(l) * batch.size() + s) * size_t(c.d_model);
          std::memcpy(dst, f, sizeof(float) * size_t(c.d_model));
        }
      }
    }
  }
  return out;
}

std::vector<float> logit_lens(std::span<const float> z, int layer, int head,
                              const ModelParams& p) {
  const auto& c = p.config;
  if (layer < 0 || layer >= c.n_layers || head < 0 || head >= c.n_heads) {
    throw std::out_of_range("logit_lens: layer/head out of range");
  }
  if (int(z.size()) != c.d_head) {
    throw std::invalid_argument("logit_lens: activation length must equal d_head");
  }
  const int d = c.d_model;
  // z . W^{O,h}: the head's column slice of wo ([out][in], in = concat index).
  std::vector<float> proj(size_t(d), 0.0f);
  const float* wo = p.layers[size_t(layer)].wo.data();
  const size_t off = size_t(head) * c.d_head;
  for (int o = 0; o < d; ++o) {
    const float* row = wo + size_t(o) * d + off;
    float s = 0.0f;
    for (int j = 0; j < c.d_head; ++j) s += z[size_t(j)] * row[j];
    proj[size_t(o)] = s;
  }
  std::vector<float> normed(size_t(d), 0.0f);
  rmsnorm_forward(proj.data(), p.final_norm.data(), normed.data(), 1, d);
  std::vector<float> logits(size_t(c.vocab_size), 0.0f);
  linear_forward(normed.data(), p.tok_embed.data(), logits.data(), 1, d, c.vocab_size);
  return logits;
}

double logit_difference(std::span<const float> logits, int correct, int incorrect) {
  if (correct == incorrect) {
    throw std::invalid_argument("logit_difference: correct and incorrect ids must differ");
  }
  if (correct < 0 || incorrect < 0 || correct >= int(logits.size()) ||
      incorrect >= int(logits.size())) {
    throw std::out_of_range("logit_difference: token id out of range");
  }
  return double(logits[size_t(correct)]) - double(logits[size_t(incorrect)]);
}

ModelParams inject_head_bias(const ModelParams& p, int layer, int head,
                             std::span<const float> c) {
  const auto& cfg = p.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw std::out_of_range("inject_head_bias: layer/head out of range");
  }
  if (int(c.size()) != cfg.d_head) {
    throw std::invalid_argument("inject_head_bias: vector length must equal d_head");
  }
  require_finite(c, "inject_head_bias");
  ModelParams out = p;
  float* slot = out.layers[size_t(layer)].head_bias.data() + size_t(head) * cfg.d_head;
  for (int j = 0; j < cfg.d_head; ++j) slot[j] += c[size_t(j)];
  return out;
}

ModelParams inject_ffn_bias(const ModelParams& p, int layer, std::span<const float> c) {
  const auto& cfg = p.config;
  if (layer < 0 || layer >= cfg.n_layers) {
    throw std::out_of_range("inject_ffn_bias: layer out of range");
  }
  if (int(c.size()) != cfg.d_model) {
    throw std::invalid_argument("inject_ffn_bias: vector length must equal d_model");
  }
  require_finite(c, "inject_ffn_bias");
  ModelParams out = p;
  float* slot = out.layers[size_t(layer)].ffn_bias.data();
  for (int j = 0; j < cfg.d_model; ++j) slot[j] += c[size_t(j)];
  return out;
}

AdamState::AdamState(size_t n, double lr, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamState::step(std::span<double> params, std::span<const double> grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
  }
}

void AdamState::step(std::span<float> params, std::span<const float> grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = double(grads[i]);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    params[i] = float(double(params[i]) - lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_));
  }
}

void AdamState::update_range(size_t offset, std::span<float> params, std::span<float> grads) {
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = double(grads[i]);
    double& m = m_[offset + i];
    double& v = v_[offset + i];
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g * g;
    params[i] = float(double(params[i]) - lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
  }
}

void AdamState::step_tensors(std::span<std::span<float>> params,
                             std::span<std::span<float>> grads) {
  ++t_;
  size_t off = 0;
  for (size_t k = 0; k < params.size(); ++k) {
    update_range(off, params[k], grads[k]);
    off += params[k].size();
  }
}

TrainResult train_dense(const ModelConfig& config, const harness::TaskDataset& ds,
                        const TrainHyper& hyper) {
  auto train = ds.split(harness::Split::Train);
  if (train.empty()) throw std::invalid_argument("train_dense: empty training split");

  ModelParams params = init_params(config);
  ModelParams grads = zeros_like(params);

  size_t n_params = 0;
  for_each_tensor(params, [&](const std::string&, const TensorShape&, std::vector<float>& t) {
    n_params += t.size();
  });
  AdamState adam(n_params, hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.eps);

  std::vector<std::vector<int>> seqs(train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    seqs[i] = train[i].question;
    seqs[i].insert(seqs[i].end(), train[i].response.begin(), train[i].response.end());
  }

  std::vector<int> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(config.seed * 0x2545f4914f6cdd1dull + 0x7261696e);

  Workspace<float> ws;
  std::vector<float> dlogits;
  TrainResult result;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_tokens = 0;
    for (size_t b = 0; b < order.size(); b += size_t(hyper.batch_size)) {
      const size_t be = std::min(order.size(), b + size_t(hyper.batch_size));
      long batch_tokens = 0;
      for (size_t i = b; i < be; ++i) batch_tokens += long(seqs[size_t(order[i])].size()) - 1;
      if (batch_tokens <= 0) continue;
      fill_zero(grads);
      for (size_t i = b; i < be; ++i) {
        const auto& seq = seqs[size_t(order[i])];
        forward_sequence(params, seq, ws);
        const double loss = sequence_loss(ws, seq, 1, &dlogits, 1.0 / double(batch_tokens));
        if (!std::isfinite(loss)) {
          throw std::runtime_error("train_dense: non-finite loss at epoch " +
                                   std::to_string(epoch));
        }
        epoch_loss += loss * double(seq.size() - 1);
        epoch_tokens += long(seq.size()) - 1;
        backward_sequence(params, seq, ws, std::span<const float>(dlogits), grads, true);
      }
      // The bias slots stay frozen at zero in dense training; they exist only
      // as fold targets.
      for (auto& glay : grads.layers) {
        std::fill(glay.head_bias.begin(), glay.head_bias.end(), 0.0f);
        std::fill(glay.ffn_bias.begin(), glay.ffn_bias.end(), 0.0f);
      }
      std::vector<std::span<float>> pspans, gspans;
      for_each_tensor(params, [&](const std::string&, const TensorShape&, std::vector<float>& t) {
        pspans.emplace_back(t);
      });
      for_each_tensor(grads, [&](const std::string&, const TensorShape&, std::vector<float>& t) {
        gspans.emplace_back(t);
      });
      adam.step_tensors(pspans, gspans);
    }
    result.loss_curve.push_back(epoch_tokens > 0 ? epoch_loss / double(epoch_tokens) : 0.0);
  }
  result.params = std::move(params);
  return result;
}

// explicit instantiations
template ParamsT<float> zeros_like(const ParamsT<float>&);
template ParamsT<double> zeros_like(const ParamsT<double>&);
template void fill_zero(ParamsT<float>&);
template void fill_zero(ParamsT<double>&);
template void forward_sequence(const ParamsT<float>&, std::span<const int>, Workspace<float>&,
                               const Injections<float>*);
template void forward_sequence(const ParamsT<double>&, std::span<const int>, Workspace<double>&,
                               const Injections<double>*);
template double sequence_loss(const Workspace<float>&, std::span<const int>, int,
                              std::vector<float>*, double);
template double sequence_loss(const Workspace<double>&, std::span<const int>, int,
                              std::vector<double>*, double);
template void backward_sequence(const ParamsT<float>&, std::span<const int>,
                                const Workspace<float>&, std::span<const float>, ParamsT<float>&,
                                bool);
template void backward_sequence(const ParamsT<double>&, std::span<const int>,
                                const Workspace<double>&, std::span<const double>,
                                ParamsT<double>&, bool);

}  // namespace rlcc::model
