#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "restorelcc/dataset.hpp"
#include "restorelcc/lossdiff.hpp"
#include "restorelcc/model.hpp"

namespace rlcc::probing {

struct ContrastiveTuple {
  std::vector<int> q;
  std::vector<int> r_plus;
  std::vector<int> r_minus;
  int provenance = -1;  // pool index supplying r_minus
};

struct ProbePair {
  std::vector<double> m;  // [z_c^q || z_d^{q+r}] of length 2 * d_head
  int label = 0;          // 1 entailment, 0 contradiction
};

struct ProbeRecord {
  int layer = 0;
  int head = 0;
  double val_accuracy = 0.0;
  std::vector<double> w;
  double bias = 0.0;
};

// Probe trainer recipe: linear layer + sigmoid, binary cross entropy, Adam at
// learning rate 1e-2, 100 epochs, 7:3 train/validation split.
struct ProbeHyper {
  double learning_rate = 1e-2;
  int epochs = 100;
  double train_fraction = 0.7;
  uint64_t seed = 0;
};

// Mean of the dense model's token-embedding rows (bag-of-tokens encoder
// stand-in; pluggable by swapping this call).
std::vector<double> encode_response(std::span<const int> r, const model::ModelParams& p);

// For each sample, the negative response is the most similar pool response
// (cosine over encodings) that is not textually equal to the positive one.
std::vector<ContrastiveTuple> build_contrastive_dataset(
    std::span<const harness::TaskRecord> samples, const model::ModelParams& p);

std::vector<double> edit_question_activation(std::span<const double> z_p_q,
                                             const lossdiff::PrincipalComponent& c);

// Shared captures for all heads: pruned and dense question activations at the
// last question token plus dense full-sequence activations for q+r+ and q+r-.
struct ProbeInputs {
  model::ActivationTrace pruned_q;
  model::ActivationTrace dense_q;
  model::ActivationTrace dense_pos;
  model::ActivationTrace dense_neg;
  int skipped = 0;  // tuples dropped for exceeding max_seq_len
};

ProbeInputs capture_probe_inputs(std::span<const ContrastiveTuple> tuples,
                                 const model::ModelParams& dense,
                                 const model::ModelParams& pruned);

struct PairBuildResult {
  std::vector<ProbePair> pairs;
  int skipped = 0;
};

PairBuildResult build_probe_pairs(const ProbeInputs& inputs, int layer, int head,
                                  const lossdiff::PrincipalComponent& c);

// Spec-level convenience: capture and pair construction for one head.
PairBuildResult build_probe_pairs(std::span<const ContrastiveTuple> tuples,
                                  const model::ModelParams& dense,
                                  const model::ModelParams& pruned, int layer, int head,
                                  const lossdiff::PrincipalComponent& c);

ProbeRecord train_probe(std::span<const ProbePair> pairs, const ProbeHyper& hyper,
                        int layer = 0, int head = 0);

// Heads sorted by validation accuracy (ties: lower layer, then lower head);
// returns the top ceil(fraction * count).
std::vector<std::pair<int, int>> rank_heads(std::span<const ProbeRecord> records,
                                            double fraction);

enum class Metric { Mse, Kl };

// Table-4 style alternatives: heads with the smallest mean MSE / KL between
// dense and pruned head predictions, ascending.
std::vector<std::pair<int, int>> select_heads_by_metric(
    const model::ModelParams& dense, const model::ModelParams& pruned,
    const model::ActivationTrace& dense_trace, const model::ActivationTrace& pruned_trace,
    Metric metric, double fraction);

std::vector<std::pair<int, int>> select_heads_random(int n_layers, int n_heads,
                                                     double fraction, uint64_t seed);

}  // namespace rlcc::probing
