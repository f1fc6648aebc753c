#include "restorelcc/probing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "restorelcc/linalg.hpp"
#include "restorelcc/util.hpp"

namespace rlcc::probing {

std::vector<double> encode_response(std::span<const int> r, const model::ModelParams& p) {
  if (r.empty()) throw std::invalid_argument("encode_response: empty sequence");
  const int d = p.config.d_model;
  std::vector<double> enc(size_t(d), 0.0);
  for (int tok : r) {
    if (tok < 0 || tok >= p.config.vocab_size) {
      throw std::invalid_argument("encode_response: token id out of range");
    }
    const float* row = p.tok_embed.data() + size_t(tok) * d;
    for (int i = 0; i < d; ++i) enc[size_t(i)] += double(row[i]);
  }
  for (auto& v : enc) v /= double(r.size());
  return enc;
}

std::vector<ContrastiveTuple> build_contrastive_dataset(
    std::span<const harness::TaskRecord> samples, const model::ModelParams& p) {
  if (samples.size() < 2) {
    throw std::invalid_argument("build_contrastive_dataset: need at least two samples");
  }
  std::vector<std::vector<double>> encodings(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    encodings[i] = encode_response(samples[i].response, p);
  }
  bool any_distinct = false;
  for (size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].response != samples[0].response) {
      any_distinct = true;
      break;
    }
  }
  if (!any_distinct) {
    throw std::invalid_argument(
        "build_contrastive_dataset: all responses identical, no negative exists");
  }

  std::vector<ContrastiveTuple> tuples(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    double best = -2.0;
    int best_idx = -1;
    for (size_t j = 0; j < samples.size(); ++j) {
      if (samples[j].response == samples[i].response) continue;  // textual exclusion
      const double sim = linalg::cosine_similarity(encodings[i], encodings[j]);
      if (sim > best) {
        best = sim;
        best_idx = int(j);
      }
    }
    ContrastiveTuple t;
    t.q = samples[i].question;
    t.r_plus = samples[i].response;
    t.r_minus = samples[size_t(best_idx)].response;
    t.provenance = best_idx;
    tuples[i] = std::move(t);
  }
  return tuples;
}

std::vector<double> edit_question_activation(std::span<const double> z_p_q,
                                             const lossdiff::PrincipalComponent& c) {
  if (z_p_q.size() != c.c.size()) {
    throw std::invalid_argument("edit_question_activation: length mismatch");
  }
  std::vector<double> out(z_p_q.size(), 0.0);
  for (size_t i = 0; i < out.size(); ++i) out[i] = z_p_q[i] + c.c[size_t(i)];
  return out;
}

ProbeInputs capture_probe_inputs(std::span<const ContrastiveTuple> tuples,
                                 const model::ModelParams& dense,
                                 const model::ModelParams& pruned) {
  const int max_len = dense.config.max_seq_len;
  std::vector<std::vector<int>> questions, pos_seqs, neg_seqs;
  int skipped = 0;
  for (const auto& t : tuples) {
    std::vector<int> pos = t.q;
    pos.insert(pos.end(), t.r_plus.begin(), t.r_plus.end());
    std::vector<int> neg = t.q;
    neg.insert(neg.end(), t.r_minus.begin(), t.r_minus.end());
    if (int(pos.size()) > max_len || int(neg.size()) > max_len) {
      ++skipped;
      continue;
    }
    questions.push_back(t.q);
    pos_seqs.push_back(std::move(pos));
    neg_seqs.push_back(std::move(neg));
  }
  model::CaptureRequest req;  // every head, last token
  ProbeInputs in;
  in.skipped = skipped;
  in.pruned_q = std::move(*model::forward(pruned, questions, &req).trace);
  in.dense_q = std::move(*model::forward(dense, questions, &req).trace);
  in.dense_pos = std::move(*model::forward(dense, pos_seqs, &req).trace);
  in.dense_neg = std::move(*model::forward(dense, neg_seqs, &req).trace);
  return in;
}

PairBuildResult build_probe_pairs(const ProbeInputs& inputs, int layer, int head,
                                  const lossdiff::PrincipalComponent& c) {
  const int dh = inputs.pruned_q.d_head;
  if (int(c.c.size()) != dh) {
    throw std::invalid_argument("build_probe_pairs: component length mismatch");
  }
  PairBuildResult out;
  out.skipped = inputs.skipped;
  out.pairs.reserve(size_t(inputs.pruned_q.n_samples) * 2);
  for (int n = 0; n < inputs.pruned_q.n_samples; ++n) {
    const auto zq = inputs.pruned_q.head_sample(layer, head, n);
    std::vector<double> zc(size_t(dh), 0.0);
    for (int j = 0; j < dh; ++j) zc[size_t(j)] = double(zq[size_t(j)]) + c.c[size_t(j)];

    for (int which = 0; which < 2; ++which) {
      const auto& tr = which == 0 ? inputs.dense_pos : inputs.dense_neg;
      const auto zr = tr.head_sample(layer, head, n);
      ProbePair pair;
      pair.label = which == 0 ? 1 : 0;
      pair.m.resize(size_t(dh) * 2);
      for (int j = 0; j < dh; ++j) {
        pair.m[size_t(j)] = zc[size_t(j)];
        pair.m[size_t(dh + j)] = double(zr[size_t(j)]);
      }
      out.pairs.push_back(std::move(pair));
    }
  }
  return out;
}

PairBuildResult build_probe_pairs(std::span<const ContrastiveTuple> tuples,
                                  const model::ModelParams& dense,
                                  const model::ModelParams& pruned, int layer, int head,
                                  const lossdiff::PrincipalComponent& c) {
  return build_probe_pairs(capture_probe_inputs(tuples, dense, pruned), layer, head, c);
}

ProbeRecord train_probe(std::span<const ProbePair> pairs, const ProbeHyper& hyper, int layer,
                        int head) {
  if (pairs.size() < 4) throw std::invalid_argument("train_probe: need at least 4 pairs");
  bool has0 = false, has1 = false;
  for (const auto& p : pairs) (p.label ? has1 : has0) = true;
  if (!has0 || !has1) throw std::invalid_argument("train_probe: both labels required");

  const int dim = int(pairs[0].m.size());
  std::vector<int> order(pairs.size(), 0);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(hyper.seed * 0x9e3779b97f4a7c15ull + 0x70726f62ull);
  rng.shuffle(order);
  const size_t n_train = size_t(std::llround(hyper.train_fraction * double(pairs.size())));

  std::vector<double> wb(size_t(dim) + 1, 0.0);  // [w, b]
  std::vector<double> grad(wb.size(), 0.0);
  model::AdamState adam(wb.size(), hyper.learning_rate, 0.9, 0.999, 1e-8);

  const size_t batch = 32;
  std::vector<int> train_idx(order.begin(), order.begin() + long(n_train));
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(train_idx);
    for (size_t b = 0; b < train_idx.size(); b += batch) {
      const size_t be = std::min(train_idx.size(), b + batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (size_t idx = b; idx < be; ++idx) {
        const auto& pair = pairs[size_t(train_idx[idx])];
        double logit = wb[size_t(dim)];
        for (int j = 0; j < dim; ++j) logit += wb[size_t(j)] * pair.m[size_t(j)];
        const double p = 1.0 / (1.0 + std::exp(-logit));
        const double dlogit = (p - double(pair.label)) / double(be - b);
        for (int j = 0; j < dim; ++j) grad[size_t(j)] += dlogit * pair.m[size_t(j)];
        grad[size_t(dim)] += dlogit;
      }
      adam.step(wb, grad);
    }
  }

  int correct = 0, total = 0;
  for (size_t idx = n_train; idx < pairs.size(); ++idx) {
    const auto& pair = pairs[size_t(order[idx])];
    double logit = wb[size_t(dim)];
    for (int j = 0; j < dim; ++j) logit += wb[size_t(j)] * pair.m[size_t(j)];
    const int pred = logit > 0.0 ? 1 : 0;
    correct += (pred == pair.label);
    ++total;
  }

  ProbeRecord rec;
  rec.layer = layer;
  rec.head = head;
  rec.val_accuracy = total > 0 ? double(correct) / double(total) : 0.0;
  rec.w.assign(wb.begin(), wb.begin() + dim);
  rec.bias = wb[size_t(dim)];
  return rec;
}

std::vector<std::pair<int, int>> rank_heads(std::span<const ProbeRecord> records,
                                            double fraction) {
  if (records.empty()) throw std::invalid_argument("rank_heads: empty records");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("rank_heads: fraction must be in (0, 1]");
  }
  std::vector<const ProbeRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const ProbeRecord* a, const ProbeRecord* b) {
    if (a->val_accuracy != b->val_accuracy) return a->val_accuracy > b->val_accuracy;
    if (a->layer != b->layer) return a->layer < b->layer;
    return a->head < b->head;
  });
  const size_t take = size_t(std::ceil(fraction * double(records.size())));
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < std::min(take, sorted.size()); ++i) {
    out.emplace_back(sorted[i]->layer, sorted[i]->head);
  }
  return out;
}

std::vector<std::pair<int, int>> select_heads_by_metric(
    const model::ModelParams& dense, const model::ModelParams& pruned,
    const model::ActivationTrace& dense_trace, const model::ActivationTrace& pruned_trace,
    Metric metric, double fraction) {
  if (dense_trace.n_samples != pruned_trace.n_samples) {
    throw std::invalid_argument("select_heads_by_metric: traces are not aligned");
  }
  struct Row {
    int layer, head;
    double value;
  };
  std::vector<Row> rows;
  for (const auto& [l, h] : dense_trace.heads) {
    double total = 0.0;
    for (int n = 0; n < dense_trace.n_samples; ++n) {
      const auto zd = dense_trace.head_sample(l, h, n);
      const auto zp = pruned_trace.head_sample(l, h, n);
      if (metric == Metric::Mse) {
        double s = 0.0;
        for (size_t j = 0; j < zd.size(); ++j) {
          const double diff = double(zd[j]) - double(zp[j]);
          s += diff * diff;
        }
        total += s;
      } else {
        const auto lens_d = model::logit_lens(zd, l, h, dense);
        const auto lens_p = model::logit_lens(zp, l, h, pruned);
        // KL(softmax(dense) || softmax(pruned))
        const int V = int(lens_d.size());
        double mxd = -1e300, mxp = -1e300;
        for (int v = 0; v < V; ++v) {
          mxd = std::max(mxd, double(lens_d[size_t(v)]));
          mxp = std::max(mxp, double(lens_p[size_t(v)]));
        }
        double zd_sum = 0.0, zp_sum = 0.0;
        for (int v = 0; v < V; ++v) {
          zd_sum += std::exp(double(lens_d[size_t(v)]) - mxd);
          zp_sum += std::exp(double(lens_p[size_t(v)]) - mxp);
        }
        double kl = 0.0;
        for (int v = 0; v < V; ++v) {
          const double log_pd = double(lens_d[size_t(v)]) - mxd - std::log(zd_sum);
          const double log_pp = double(lens_p[size_t(v)]) - mxp - std::log(zp_sum);
          kl += std::exp(log_pd) * (log_pd - log_pp);
        }
        total += kl;
      }
    }
    rows.push_back({l, h, total / double(dense_trace.n_samples)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.value != b.value) return a.value < b.value;  // smallest first
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.head < b.head;
  });
  const size_t take = size_t(std::ceil(fraction * double(rows.size())));
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < std::min(take, rows.size()); ++i) {
    out.emplace_back(rows[i].layer, rows[i].head);
  }
  return out;
}

std::vector<std::pair<int, int>> select_heads_random(int n_layers, int n_heads, double fraction,
                                                     uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("select_heads_random: fraction must be in (0, 1]");
  }
  std::vector<std::pair<int, int>> all;
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) all.emplace_back(l, h);
  }
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x72616e64ull);
  rng.shuffle(all);
  const size_t take = size_t(std::ceil(fraction * double(all.size())));
  all.resize(std::min(take, all.size()));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace rlcc::probing
