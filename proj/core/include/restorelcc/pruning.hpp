#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "restorelcc/linalg.hpp"
#include "restorelcc/model.hpp"

namespace rlcc::pruning {

enum class Scheme { Unstructured, SemiStructured, StructuredHeads };
enum class Targets { All, Attention, AttentionQkv, Ffn };

const char* scheme_name(Scheme s);
const char* targets_name(Targets t);
Scheme scheme_from_name(const std::string& name);
Targets targets_from_name(const std::string& name);

// Binary keep masks (1 = kept) per prunable weight matrix, [out][in] layout.
struct MaskEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> keep;
};

struct PruneMask {
  Scheme scheme = Scheme::Unstructured;
  int n = 0;  // semi-structured pattern
  int m = 0;
  Targets targets = Targets::All;
  std::vector<MaskEntry> entries;

  const MaskEntry* find(const std::string& name) const;
};

// Input-feature RMS norms per prunable matrix, collected from dense-model
// activations on a calibration batch.
struct CalibNorms {
  std::map<std::string, std::vector<double>> norms;
};

CalibNorms collect_calibration_norms(const model::ModelParams& p,
                                     std::span<const std::vector<int>> sequences);

// score[o,i] = |w[o,i]| * norm[i]; norms indexed by the input dimension.
linalg::Matrix score_weights_wanda(const linalg::Matrix& w, std::span<const double> norms);

struct Scores {
  std::map<std::string, linalg::Matrix> by_matrix;
};

Scores compute_wanda_scores(const model::ModelParams& p, const CalibNorms& calib,
                            Targets targets);

struct PruneResult {
  model::ModelParams params;
  PruneMask mask;
};

PruneResult prune_unstructured(const model::ModelParams& p, double ratio, const Scores& scores,
                               Targets targets = Targets::All);
PruneResult prune_semi_structured(const model::ModelParams& p, int n, int m,
                                  const Scores& scores, Targets targets = Targets::All);

// Per-(layer, head) scores; default scoring sums the head's Wanda scores.
std::map<std::pair<int, int>, double> default_head_scores(const model::ModelParams& p,
                                                          const Scores& scores);
PruneResult prune_structured_heads(const model::ModelParams& p, double ratio,
                                   const std::map<std::pair<int, int>, double>& head_scores);

struct SparsityReport {
  double global_sparsity = 0.0;
  std::map<std::string, double> per_matrix;
  std::vector<double> overhead_per_layer;  // added / attention params, per layer
  double overhead_max = 0.0;
  long added_parameters = 0;  // absolute count over all compensated sites
};

SparsityReport sparsity_report(const model::ModelParams& p, const PruneMask& mask,
                               const std::set<std::pair<int, int>>& compensated_heads,
                               const std::set<int>& compensated_ffn_layers = {});

// True when params are exactly zero wherever the mask says pruned.
bool check_mask_faithfulness(const model::ModelParams& p, const PruneMask& mask);

void save_mask(const PruneMask& mask, const std::filesystem::path& path);
PruneMask load_mask(const std::filesystem::path& path);

}  // namespace rlcc::pruning
