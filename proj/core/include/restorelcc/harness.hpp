#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "restorelcc/dataset.hpp"
#include "restorelcc/lcc.hpp"
#include "restorelcc/lossdiff.hpp"
#include "restorelcc/model.hpp"
#include "restorelcc/probing.hpp"
#include "restorelcc/pruning.hpp"

namespace rlcc::harness {

struct TaskConfig {
  std::string source = "synthetic";  // synthetic | jsonl
  int n_samples = 2000;
  uint64_t seed = 0;
  int min_symbols = 8;
  int max_symbols = 24;
  std::string jsonl_path;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 12;
  int batch_size = 16;
};

struct PruneConfig {
  std::string scheme = "unstructured";  // unstructured | semi_structured | structured_heads
  double ratio = 0.5;
  int n = 2;
  int m = 4;
  std::string targets = "all";  // all | attention | attention_qkv | ffn
  int calibration_samples = 128;
};

struct ProbeConfig {
  int k = 1;
  double head_fraction = 0.25;
  std::string selector = "probe";  // probe | random | mse | kl
  double learning_rate = 1e-2;
  int epochs = 100;
  uint64_t seed = 0;
};

struct LccConfig {
  bool use_directions = true;
  bool use_bias = true;
  double learning_rate = 1e-4;
  int epochs = 300;
  int batch_size = 8;
  std::string target = "attention_head";  // attention_head | ffn_output
  int recovery_samples = 100;
  std::string loss_tokens = "all";  // all | response_only
  std::string beta_init = "alpha";  // alpha | zero
  uint64_t seed = 0;
};

struct ExperimentConfig {
  model::ModelConfig model;
  TaskConfig task;
  TrainConfig train;
  PruneConfig prune;
  ProbeConfig probe;
  LccConfig lcc;
  uint64_t seed = 0;  // drives the probe/recovery/selector seeds
  std::string out_dir = "out";

  void validate() const;
  // Canonical JSON of every semantic field; out_dir is excluded so reports
  // are byte-identical across output locations.
  std::string canonical_json() const;
};

// Strict parse: unknown keys are rejected, missing keys take defaults.
ExperimentConfig parse_config_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct EvalMetrics {
  double accuracy = 0.0;
  double perplexity = 0.0;
  int n_samples = 0;
};

// accuracy: fraction of samples whose answer-token logit strictly exceeds the
// alternative at the answer position; perplexity: exp of the mean next-token
// cross entropy over response tokens.
EvalMetrics evaluate(const model::ModelParams& params, std::span<const TaskRecord> split);

struct EvalReport {
  EvalMetrics dense, pruned, recovered;
  double accuracy = 0.0;    // recovered model (headline)
  double perplexity = 0.0;  // recovered model
  std::string delta_lambda_table;  // path relative to the output directory
  pruning::SparsityReport sparsity;
  std::string config_echo;  // canonical JSON

  std::string to_json() const;
  std::string to_text() const;
};

struct StageError : std::runtime_error {
  std::string stage;
  StageError(std::string stage_name, const std::string& msg)
      : std::runtime_error(msg), stage(std::move(stage_name)) {}
};

struct StageResult {
  std::filesystem::path path;
  bool cached = false;
};

// Stage orchestration over a content-addressed artifact store. Each ensure_*
// runs its prerequisites; completed stages are loaded instead of recomputed.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg);

  const TaskDataset& dataset();
  StageResult ensure_dense();
  StageResult ensure_pruned();
  StageResult ensure_captures();
  StageResult ensure_decompose();
  StageResult ensure_probe();
  StageResult ensure_compensate();
  StageResult ensure_fold();
  EvalReport ensure_eval();

  // Extra diagnostic table for the minor-component experiment.
  std::filesystem::path write_scan_table(int k, double scale, std::optional<int> minor);

  const ExperimentConfig& config() const { return cfg_; }
  const model::ModelParams& dense_params();
  const model::ModelParams& pruned_params();
  const model::ModelParams& folded_params();
  const pruning::PruneMask& prune_mask();
  const std::vector<std::pair<int, int>>& selected_heads();
  const lcc::RecoveryPlan& plan();

 private:
  std::string key(const std::string& stage) const;
  std::filesystem::path artifact(const std::string& name) const;
  std::span<const TaskRecord> recovery_records();

  ExperimentConfig cfg_;
  std::optional<TaskDataset> ds_;
  std::optional<model::ModelParams> dense_, pruned_, folded_;
  std::optional<pruning::PruneMask> mask_;
  std::optional<model::ActivationTrace> probe_dense_, probe_pruned_;
  std::optional<model::ActivationTrace> rec_dense_, rec_pruned_;
  std::optional<std::vector<std::pair<int, int>>> selected_;
  std::optional<lcc::RecoveryPlan> plan_;
};

EvalReport run_pipeline(const ExperimentConfig& cfg);

struct SweepRow {
  double value = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
  double overhead_max = 0.0;
};

// axis: "k" or "head_fraction"; runs the pipeline per value into the same
// artifact store and writes sweep.csv in the output directory.
std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& axis,
                            std::span<const double> values);

uint64_t derive_seed(uint64_t experiment_seed, const std::string& role, uint64_t stage_seed);

}  // namespace rlcc::harness
