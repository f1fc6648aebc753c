#include "restorelcc/lossdiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rlcc::lossdiff {

namespace {

bool same_geometry(const model::ModelConfig& a, const model::ModelConfig& b) {
  return a.vocab_size == b.vocab_size && a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
         a.d_model == b.d_model && a.d_head == b.d_head && a.d_ffn == b.d_ffn &&
         a.max_seq_len == b.max_seq_len;
}

}  // namespace

std::pair<model::ActivationTrace, model::ActivationTrace> capture_pair(
    const model::ModelParams& dense, const model::ModelParams& pruned,
    std::span<const harness::TaskRecord> records,
    const std::vector<std::pair<int, int>>& heads, model::PositionPolicy policy,
    const std::vector<int>& positions) {
  if (!same_geometry(dense.config, pruned.config)) {
    throw std::invalid_argument("capture_pair: model configurations differ");
  }
  std::vector<std::vector<int>> questions(records.size());
  for (size_t i = 0; i < records.size(); ++i) questions[i] = records[i].question;

  model::CaptureRequest req;
  req.heads = heads;
  req.policy = policy;
  req.positions = positions;
  auto d = model::forward(dense, questions, &req);
  auto p = model::forward(pruned, questions, &req);
  return {std::move(*d.trace), std::move(*p.trace)};
}

LossMatrix assemble_loss_matrix(const model::ActivationTrace& dense_trace,
                                const model::ActivationTrace& pruned_trace, int layer,
                                int head) {
  if (dense_trace.n_samples != pruned_trace.n_samples ||
      dense_trace.d_head != pruned_trace.d_head) {
    throw std::invalid_argument("assemble_loss_matrix: traces are not aligned");
  }
  if (dense_trace.head_index(layer, head) < 0 || pruned_trace.head_index(layer, head) < 0) {
    throw std::invalid_argument("assemble_loss_matrix: head missing from trace");
  }
  LossMatrix lm;
  lm.layer = layer;
  lm.head = head;
  lm.n_samples = dense_trace.n_samples;
  lm.policy = dense_trace.policy;
  lm.dz = linalg::Matrix(lm.n_samples, dense_trace.d_head);
  for (int n = 0; n < lm.n_samples; ++n) {
    const auto zd = dense_trace.head_sample(layer, head, n);
    const auto zp = pruned_trace.head_sample(layer, head, n);
    for (int j = 0; j < dense_trace.d_head; ++j) {
      lm.dz.at(n, j) = double(zd[size_t(j)]) - double(zp[size_t(j)]);
    }
  }
  return lm;
}

SvdComponents decompose(const LossMatrix& lm) {
  SvdComponents comp;
  comp.factors = linalg::svd_thin(lm.dz);
  const int r = int(comp.factors.sigma.size());
  comp.alpha_bar.assign(size_t(r), 0.0);
  for (int i = 0; i < r; ++i) {
    double mean_u = 0.0;
    for (int n = 0; n < lm.n_samples; ++n) mean_u += comp.factors.u.at(n, i);
    mean_u /= double(lm.n_samples);
    comp.alpha_bar[size_t(i)] = comp.factors.sigma[size_t(i)] * mean_u;
  }
  return comp;
}

PrincipalComponent estimate_lost_component(const SvdComponents& comp, int d_head, int k) {
  if (k < 1 || k > d_head) {
    throw std::invalid_argument("estimate_lost_component: k must be in [1, d_head]");
  }
  PrincipalComponent pc;
  pc.k = k;
  pc.c.assign(size_t(d_head), 0.0);
  const int r = int(comp.factors.sigma.size());
  for (int i = 0; i < std::min(k, r); ++i) {
    const double a = comp.alpha_bar[size_t(i)];
    if (a == 0.0) continue;
    for (int j = 0; j < d_head; ++j) pc.c[size_t(j)] += a * comp.factors.v.at(j, i);
  }
  return pc;
}

PrincipalComponent estimate_lost_component(const LossMatrix& lm, int k) {
  return estimate_lost_component(decompose(lm), lm.dz.cols, k);
}

std::vector<double> compensate_activation(std::span<const double> z_p,
                                          std::span<const double> c) {
  if (z_p.size() != c.size()) {
    throw std::invalid_argument("compensate_activation: length mismatch");
  }
  std::vector<double> z(z_p.size(), 0.0);
  for (size_t i = 0; i < z.size(); ++i) z[i] = z_p[i] + c[i];
  return z;
}

double logit_gain(double lambda_recovered, double lambda_pruned) {
  return lambda_recovered - lambda_pruned;
}

std::vector<HeadGainRow> head_recovery_scan(const model::ModelParams& dense,
                                            const model::ModelParams& pruned,
                                            std::span<const harness::TaskRecord> records,
                                            int k, double scale,
                                            std::optional<int> minor_component) {
  if (!(scale > 0.0)) throw std::invalid_argument("head_recovery_scan: scale must be > 0");
  const auto& c = pruned.config;
  auto [dtr, ptr] = capture_pair(dense, pruned, records);

  std::vector<HeadGainRow> table;
  std::vector<float> zc(size_t(c.d_head), 0.0f);
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      const auto lm = assemble_loss_matrix(dtr, ptr, l, h);
      std::vector<double> comp_vec(size_t(c.d_head), 0.0);
      if (minor_component.has_value()) {
        const auto comps = decompose(lm);
        const int idx = *minor_component;
        if (idx < 0 || idx >= int(comps.factors.sigma.size())) {
          throw std::out_of_range("head_recovery_scan: minor component index out of range");
        }
        for (int j = 0; j < c.d_head; ++j) {
          comp_vec[size_t(j)] =
              scale * comps.alpha_bar[size_t(idx)] * comps.factors.v.at(j, idx);
        }
      } else if (k > 0) {
        auto pc = estimate_lost_component(lm, std::min(k, c.d_head));
        for (int j = 0; j < c.d_head; ++j) comp_vec[size_t(j)] = scale * pc.c[size_t(j)];
      }

      HeadGainRow row;
      row.layer = l;
      row.head = h;
      int counted = 0;
      for (int n = 0; n < lm.n_samples; ++n) {
        const auto& rec = records[size_t(n)];
        if (rec.answer < 0 || rec.incorrect < 0) continue;
        const auto zp = ptr.head_sample(l, h, n);
        for (int j = 0; j < c.d_head; ++j) {
          zc[size_t(j)] = float(double(zp[size_t(j)]) + comp_vec[size_t(j)]);
        }
        const auto lens_p = model::logit_lens(zp, l, h, pruned);
        const auto lens_c = model::logit_lens(zc, l, h, pruned);
        row.lambda_pruned += model::logit_difference(lens_p, rec.answer, rec.incorrect);
        row.lambda_recovered += model::logit_difference(lens_c, rec.answer, rec.incorrect);
        ++counted;
      }
      if (counted > 0) {
        row.lambda_pruned /= counted;
        row.lambda_recovered /= counted;
      }
      row.delta_lambda = logit_gain(row.lambda_recovered, row.lambda_pruned);
      table.push_back(row);
    }
  }
  return table;
}

ClampedForward forward_clamped_to_dense(const model::ParamsT<double>& dense,
                                        const model::ParamsT<double>& pruned,
                                        std::span<const int> tokens, bool clamp_ffn) {
  if (!same_geometry(dense.config, pruned.config)) {
    throw std::invalid_argument("forward_clamped_to_dense: model configurations differ");
  }
  const auto& c = dense.config;
  model::Workspace<double> wsd;
  model::forward_sequence(dense, tokens, wsd);

  auto inj = model::Injections<double>::sized(c);
  const int T = wsd.T;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      auto& target = inj.head_replace[size_t(l) * c.n_heads + size_t(h)];
      target.resize(size_t(T) * c.d_head);
      for (int t = 0; t < T; ++t) {
        const double* z = wsd.lw[size_t(l)].z.data() + size_t(t) * c.d_model +
                          size_t(h) * c.d_head;
        std::copy(z, z + c.d_head, target.begin() + long(size_t(t) * c.d_head));
      }
    }
    if (clamp_ffn) {
      inj.ffn_replace[size_t(l)] = wsd.lw[size_t(l)].ffn_out;
    }
  }

  model::Workspace<double> wsp;
  model::forward_sequence(pruned, tokens, wsp, &inj);
  return {wsd.logits, wsp.logits};
}

}  // namespace rlcc::lossdiff
