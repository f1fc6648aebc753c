#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "restorelcc/dataset.hpp"
#include "restorelcc/linalg.hpp"
#include "restorelcc/lossdiff.hpp"
#include "restorelcc/model.hpp"

namespace rlcc::lcc {

// Compensation site: an attention head, or a layer's FFN output when
// head < 0.
struct Site {
  int layer = 0;
  int head = 0;
  bool is_ffn() const { return head < 0; }
  bool operator==(const Site&) const = default;
};

struct ComponentFlags {
  bool use_directions = true;  // sum beta_i v_i term
  bool use_bias = true;        // hedge vector b
};

enum class BetaInit { Alpha, Zero };

// Fixed orthonormal directions with trainable magnitudes plus a trainable
// bias. Directions are immutable after construction.
struct LearnedComponent {
  Site site;
  linalg::Matrix directions;  // d x r, columns are right singular vectors
  std::vector<double> beta;   // r
  std::vector<double> bias;   // d
  ComponentFlags flags;
};

enum class LossTokens { All, ResponseOnly };

struct LccHyper {
  double learning_rate = 1e-4;
  int epochs = 300;
  int batch_size = 8;
  LossTokens loss_tokens = LossTokens::All;
  uint64_t seed = 0;
};

struct RecoveryPlan {
  std::vector<LearnedComponent> components;
  LccHyper hyper;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

// beta warm-starts at the mean projection coefficients (the analytic lost
// component) unless BetaInit::Zero; bias starts at zero.
LearnedComponent init_learned_component(Site site, const lossdiff::SvdComponents& comp, int dim,
                                        ComponentFlags flags,
                                        BetaInit beta_init = BetaInit::Alpha);

// c = (use_directions ? V beta : 0) + (use_bias ? b : 0)
std::vector<double> compose_component(const LearnedComponent& lc);

model::Injections<float> plan_injections(const RecoveryPlan& plan,
                                         const model::ModelConfig& config);

// Forward pass with every site's composed component added before the site's
// output projection; identical to forward with transient slot injection.
std::vector<std::vector<float>> recovery_forward(const model::ModelParams& pruned,
                                                 const RecoveryPlan& plan,
                                                 std::span<const std::vector<int>> batch);

// Next-token cross entropy over the recovery set with only beta and bias
// trainable; model weights and directions stay frozen. Deterministic given
// hyper.seed. A non-finite loss aborts and returns the last epoch snapshot.
RecoveryPlan train_components(const model::ModelParams& pruned, const RecoveryPlan& plan,
                              std::span<const harness::TaskRecord> recovery,
                              const LccHyper& hyper);

// Writes each composed component into its site's bias slot. Weight matrices
// and masks are untouched.
model::ModelParams fold_components(const model::ModelParams& pruned, const RecoveryPlan& plan);

// Analytic site gradients vs central finite differences (step 1e-4, float64);
// returns the max relative error over every trainable scalar.
double gradient_check(const RecoveryPlan& plan, const model::ModelParams& pruned,
                      std::span<const std::vector<int>> micro_batch);

void save_plan(const RecoveryPlan& plan, const std::filesystem::path& path);
RecoveryPlan load_plan(const std::filesystem::path& path);

}  // namespace rlcc::lcc
