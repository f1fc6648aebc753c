#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "restorelcc/dataset.hpp"
#include "restorelcc/linalg.hpp"
#include "restorelcc/model.hpp"

namespace rlcc::lossdiff {

// Per-head activation-loss matrix: row n = dense minus pruned activation for
// sample n at the designated position.
struct LossMatrix {
  int layer = 0;
  int head = 0;
  int n_samples = 0;
  linalg::Matrix dz;  // n_samples x d_head
  std::string policy;
};

// SVD of the loss matrix plus the mean projection coefficient per component:
// alpha_bar[i] = mean over samples of sigma_i * u_i[n].
struct SvdComponents {
  linalg::SvdFactors factors;
  std::vector<double> alpha_bar;
};

struct PrincipalComponent {
  std::vector<double> c;
  int k = 0;
};

// Aligned traces of both models over the dataset questions at the designated
// position. Models must share the architecture.
std::pair<model::ActivationTrace, model::ActivationTrace> capture_pair(
    const model::ModelParams& dense, const model::ModelParams& pruned,
    std::span<const harness::TaskRecord> records,
    const std::vector<std::pair<int, int>>& heads = {},
    model::PositionPolicy policy = model::PositionPolicy::LastToken,
    const std::vector<int>& positions = {});

LossMatrix assemble_loss_matrix(const model::ActivationTrace& dense_trace,
                                const model::ActivationTrace& pruned_trace, int layer,
                                int head);

SvdComponents decompose(const LossMatrix& lm);

// c = sum_{i<=k} alpha_bar_i v_i. Terms beyond the rank contribute zero.
PrincipalComponent estimate_lost_component(const LossMatrix& lm, int k);
PrincipalComponent estimate_lost_component(const SvdComponents& comp, int d_head, int k);

std::vector<double> compensate_activation(std::span<const double> z_p,
                                          std::span<const double> c);

double logit_gain(double lambda_recovered, double lambda_pruned);

struct HeadGainRow {
  int layer = 0;
  int head = 0;
  double lambda_pruned = 0.0;
  double lambda_recovered = 0.0;
  double delta_lambda = 0.0;
};

// For every head: estimate the lost component from the records, compensate the
// captured pruned activation and report the mean per-head logit gain through
// the lens. `scale` multiplies the component coefficients; `minor_component`
// selects a single component index instead of the leading k.
std::vector<HeadGainRow> head_recovery_scan(const model::ModelParams& dense,
                                            const model::ModelParams& pruned,
                                            std::span<const harness::TaskRecord> records,
                                            int k, double scale = 1.0,
                                            std::optional<int> minor_component = {});

// Oracle path: runs the dense model first, then the pruned model with every
// head activation compensated per position by its own sample loss
// (z := z + (z_dense - z)), in float64. Returns both logit sets flattened
// (T x vocab).
struct ClampedForward {
  std::vector<double> dense_logits;
  std::vector<double> clamped_logits;
};
ClampedForward forward_clamped_to_dense(const model::ParamsT<double>& dense,
                                        const model::ParamsT<double>& pruned,
                                        std::span<const int> tokens, bool clamp_ffn = false);

}  // namespace rlcc::lossdiff
