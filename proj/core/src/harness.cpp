#include "restorelcc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "restorelcc/checkpoint.hpp"
#include "restorelcc/util.hpp"

namespace rlcc::harness {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
    }
  }
}

template <typename T>
void read_field(const json& obj, const char* name, T& out) {
  if (obj.contains(name)) out = obj.at(name).get<T>();
}

json model_to_json(const model::ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_head", c.d_head},     {"d_ffn", c.d_ffn},
          {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

json task_to_json(const TaskConfig& c) {
  return {{"source", c.source},           {"n_samples", c.n_samples},
          {"seed", c.seed},               {"min_symbols", c.min_symbols},
          {"max_symbols", c.max_symbols}, {"jsonl_path", c.jsonl_path}};
}

json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}};
}

json prune_to_json(const PruneConfig& c) {
  return {{"scheme", c.scheme}, {"ratio", c.ratio},     {"n", c.n},
          {"m", c.m},           {"targets", c.targets}, {"calibration_samples",
                                                         c.calibration_samples}};
}

json probe_to_json(const ProbeConfig& c) {
  return {{"k", c.k},
          {"head_fraction", c.head_fraction},
          {"selector", c.selector},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"seed", c.seed}};
}

json lcc_to_json(const LccConfig& c) {
  return {{"use_directions", c.use_directions},
          {"use_bias", c.use_bias},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"target", c.target},
          {"recovery_samples", c.recovery_samples},
          {"loss_tokens", c.loss_tokens},
          {"beta_init", c.beta_init},
          {"seed", c.seed}};
}

}  // namespace

uint64_t derive_seed(uint64_t experiment_seed, const std::string& role, uint64_t stage_seed) {
  return fnv1a64(std::to_string(experiment_seed) + ":" + role + ":" +
                 std::to_string(stage_seed));
}

void ExperimentConfig::validate() const {
  model.validate();
  if (task.source != "synthetic" && task.source != "jsonl") {
    throw std::invalid_argument("config: task.source must be synthetic or jsonl");
  }
  if (task.source == "jsonl") {
    if (task.jsonl_path.empty() || !std::filesystem::exists(task.jsonl_path)) {
      throw std::invalid_argument("config: task.jsonl_path does not exist");
    }
  } else {
    if (task.n_samples < 200) {
      throw std::invalid_argument("config: task.n_samples must be >= 200");
    }
    if (task.max_symbols + 2 > model.max_seq_len) {
      throw std::invalid_argument("config: question length exceeds max_seq_len");
    }
  }
  pruning::scheme_from_name(prune.scheme);
  pruning::targets_from_name(prune.targets);
  if (!(prune.ratio >= 0.0 && prune.ratio < 1.0)) {
    throw std::invalid_argument("config: prune.ratio must be in [0, 1)");
  }
  if (prune.calibration_samples < 1) {
    throw std::invalid_argument("config: prune.calibration_samples must be >= 1");
  }
  if (!(probe.head_fraction > 0.0 && probe.head_fraction <= 1.0)) {
    throw std::invalid_argument("config: probe.head_fraction must be in (0, 1]");
  }
  if (probe.k < 0 || probe.k > model.d_head) {
    throw std::invalid_argument("config: probe.k must be in [0, d_head]");
  }
  if (probe.selector != "probe" && probe.selector != "random" && probe.selector != "mse" &&
      probe.selector != "kl") {
    throw std::invalid_argument("config: probe.selector must be probe|random|mse|kl");
  }
  if (lcc.target != "attention_head" && lcc.target != "ffn_output") {
    throw std::invalid_argument("config: lcc.target must be attention_head or ffn_output");
  }
  if (lcc.loss_tokens != "all" && lcc.loss_tokens != "response_only") {
    throw std::invalid_argument("config: lcc.loss_tokens must be all or response_only");
  }
  if (lcc.beta_init != "alpha" && lcc.beta_init != "zero") {
    throw std::invalid_argument("config: lcc.beta_init must be alpha or zero");
  }
  if (lcc.recovery_samples < 1) {
    throw std::invalid_argument("config: lcc.recovery_samples must be >= 1");
  }
}

std::string ExperimentConfig::canonical_json() const {
  json j;
  j["model"] = model_to_json(model);
  j["task"] = task_to_json(task);
  j["train"] = train_to_json(train);
  j["prune"] = prune_to_json(prune);
  j["probe"] = probe_to_json(probe);
  j["lcc"] = lcc_to_json(lcc);
  j["seed"] = seed;
  return j.dump();
}

ExperimentConfig parse_config_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  reject_unknown_keys(j, {"model", "task", "train", "prune", "probe", "lcc", "seed", "out_dir"},
                      "top level");

  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown_keys(m,
                        {"vocab_size", "n_layers", "n_heads", "d_model", "d_head", "d_ffn",
                         "max_seq_len", "seed"},
                        "model");
    read_field(m, "vocab_size", cfg.model.vocab_size);
    read_field(m, "n_layers", cfg.model.n_layers);
    read_field(m, "n_heads", cfg.model.n_heads);
    read_field(m, "d_model", cfg.model.d_model);
    if (m.contains("d_head")) {
      cfg.model.d_head = m.at("d_head").get<int>();
    } else {
      cfg.model.d_head = cfg.model.n_heads > 0 ? cfg.model.d_model / cfg.model.n_heads : 0;
    }
    read_field(m, "d_ffn", cfg.model.d_ffn);
    read_field(m, "max_seq_len", cfg.model.max_seq_len);
    read_field(m, "seed", cfg.model.seed);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    reject_unknown_keys(
        t, {"source", "n_samples", "seed", "min_symbols", "max_symbols", "jsonl_path"}, "task");
    read_field(t, "source", cfg.task.source);
    read_field(t, "n_samples", cfg.task.n_samples);
    read_field(t, "seed", cfg.task.seed);
    read_field(t, "min_symbols", cfg.task.min_symbols);
    read_field(t, "max_symbols", cfg.task.max_symbols);
    read_field(t, "jsonl_path", cfg.task.jsonl_path);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown_keys(t, {"learning_rate", "epochs", "batch_size"}, "train");
    read_field(t, "learning_rate", cfg.train.learning_rate);
    read_field(t, "epochs", cfg.train.epochs);
    read_field(t, "batch_size", cfg.train.batch_size);
  }
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    reject_unknown_keys(p, {"scheme", "ratio", "n", "m", "targets", "calibration_samples"},
                        "prune");
    read_field(p, "scheme", cfg.prune.scheme);
    read_field(p, "ratio", cfg.prune.ratio);
    read_field(p, "n", cfg.prune.n);
    read_field(p, "m", cfg.prune.m);
    read_field(p, "targets", cfg.prune.targets);
    read_field(p, "calibration_samples", cfg.prune.calibration_samples);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    reject_unknown_keys(
        p, {"k", "head_fraction", "selector", "learning_rate", "epochs", "seed"}, "probe");
    read_field(p, "k", cfg.probe.k);
    read_field(p, "head_fraction", cfg.probe.head_fraction);
    read_field(p, "selector", cfg.probe.selector);
    read_field(p, "learning_rate", cfg.probe.learning_rate);
    read_field(p, "epochs", cfg.probe.epochs);
    read_field(p, "seed", cfg.probe.seed);
  }
  if (j.contains("lcc")) {
    const auto& l = j.at("lcc");
    reject_unknown_keys(l,
                        {"use_directions", "use_bias", "learning_rate", "epochs", "batch_size",
                         "target", "recovery_samples", "loss_tokens", "beta_init", "seed"},
                        "lcc");
    read_field(l, "use_directions", cfg.lcc.use_directions);
    read_field(l, "use_bias", cfg.lcc.use_bias);
    read_field(l, "learning_rate", cfg.lcc.learning_rate);
    read_field(l, "epochs", cfg.lcc.epochs);
    read_field(l, "batch_size", cfg.lcc.batch_size);
    read_field(l, "target", cfg.lcc.target);
    read_field(l, "recovery_samples", cfg.lcc.recovery_samples);
    read_field(l, "loss_tokens", cfg.lcc.loss_tokens);
    read_field(l, "beta_init", cfg.lcc.beta_init);
    read_field(l, "seed", cfg.lcc.seed);
  }
  read_field(j, "seed", cfg.seed);
  read_field(j, "out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_json(ss.str());
}

EvalMetrics evaluate(const model::ModelParams& params, std::span<const TaskRecord> split) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalMetrics m;
  m.n_samples = int(split.size());
  model::Workspace<float> ws;
  int correct = 0, scored = 0;
  double ce_sum = 0.0;
  long ce_count = 0;
  for (const auto& rec : split) {
    std::vector<int> seq = rec.question;
    seq.insert(seq.end(), rec.response.begin(), rec.response.end());
    model::forward_sequence(params, seq, ws);
    const int V = params.config.vocab_size;
    if (rec.answer >= 0 && rec.incorrect >= 0) {
      const float* row = ws.logits.data() + (rec.question.size() - 1) * size_t(V);
      if (row[rec.answer] > row[rec.incorrect]) ++correct;
      ++scored;
    }
    // next-token cross entropy over the response tokens
    const int q = int(rec.question.size());
    for (size_t t = 0; t < rec.response.size(); ++t) {
      const float* row = ws.logits.data() + (size_t(q) + t - 1) * size_t(V);
      double mx = -1e300;
      for (int v = 0; v < V; ++v) mx = std::max(mx, double(row[v]));
      double denom = 0.0;
      for (int v = 0; v < V; ++v) denom += std::exp(double(row[v]) - mx);
      ce_sum += std::log(denom) + mx - double(row[rec.response[t]]);
      ++ce_count;
    }
  }
  m.accuracy = scored > 0 ? double(correct) / double(scored) : 0.0;
  m.perplexity = ce_count > 0 ? std::exp(ce_sum / double(ce_count)) : 1.0;
  return m;
}

namespace {

json metrics_to_json(const EvalMetrics& m) {
  return {{"accuracy", m.accuracy}, {"perplexity", m.perplexity}, {"n_samples", m.n_samples}};
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["accuracy"] = accuracy;
  j["perplexity"] = perplexity;
  j["dense"] = metrics_to_json(dense);
  j["pruned"] = metrics_to_json(pruned);
  j["recovered"] = metrics_to_json(recovered);
  j["delta_lambda_table"] = delta_lambda_table;
  json sp;
  sp["global_sparsity"] = sparsity.global_sparsity;
  sp["overhead_max"] = sparsity.overhead_max;
  sp["overhead_per_layer"] = sparsity.overhead_per_layer;
  sp["added_parameters"] = sparsity.added_parameters;
  sp["per_matrix"] = sparsity.per_matrix;
  j["sparsity"] = sp;
  j["config"] = json::parse(config_echo);
  return j.dump(2) + "\n";
}

std::string EvalReport::to_text() const {
  std::string out;
  out += "model            accuracy     perplexity   samples\n";
  auto row = [&](const char* name, const EvalMetrics& m) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-16s %-12s %-12s %d\n", name,
                  format_double(m.accuracy).c_str(), format_double(m.perplexity).c_str(),
                  m.n_samples);
    out += buf;
  };
  row("dense", dense);
  row("pruned", pruned);
  row("recovered", recovered);
  out += "\n";
  out += "global_sparsity  " + format_double(sparsity.global_sparsity) + "\n";
  out += "overhead_max     " + format_double(sparsity.overhead_max) + "\n";
  out += "added_parameters " + std::to_string(sparsity.added_parameters) + "\n";
  out += "delta_lambda     " + delta_lambda_table + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::filesystem::create_directories(cfg_.out_dir);
}

const TaskDataset& Pipeline::dataset() {
  if (!ds_) {
    if (cfg_.task.source == "synthetic") {
      ds_ = gen_synthetic_task(cfg_.task.seed, cfg_.task.n_samples, cfg_.task.min_symbols,
                               cfg_.task.max_symbols);
    } else {
      auto result = ingest_jsonl(cfg_.task.jsonl_path);
      ds_ = std::move(result.dataset);
    }
  }
  return *ds_;
}

std::span<const TaskRecord> Pipeline::recovery_records() {
  auto rec = dataset().split(Split::Recovery);
  const size_t take = std::min(rec.size(), size_t(cfg_.lcc.recovery_samples));
  return rec.subspan(0, take);
}

std::string Pipeline::key(const std::string& stage) const {
  json j;
  j["stage"] = stage;
  j["model"] = model_to_json(cfg_.model);
  j["task"] = task_to_json(cfg_.task);
  if (stage != "task") j["train"] = train_to_json(cfg_.train);
  if (stage == "pruned" || stage == "captures" || stage == "decompose" || stage == "probe" ||
      stage == "plan" || stage == "folded" || stage == "eval") {
    j["prune"] = prune_to_json(cfg_.prune);
  }
  if (stage == "captures" || stage == "decompose" || stage == "probe" || stage == "plan" ||
      stage == "folded" || stage == "eval") {
    j["recovery_samples"] = cfg_.lcc.recovery_samples;
    j["capture_ffn"] = cfg_.lcc.target == "ffn_output";
  }
  if (stage == "decompose") j["k"] = cfg_.probe.k;
  if (stage == "probe" || stage == "plan" || stage == "folded" || stage == "eval") {
    j["probe"] = probe_to_json(cfg_.probe);
    j["seed"] = cfg_.seed;
  }
  if (stage == "plan" || stage == "folded" || stage == "eval") {
    j["lcc"] = lcc_to_json(cfg_.lcc);
  }
  return hex16(fnv1a64(j.dump()));
}

std::filesystem::path Pipeline::artifact(const std::string& name) const {
  return std::filesystem::path(cfg_.out_dir) / name;
}

StageResult Pipeline::ensure_dense() {
  const auto path = artifact("dense-" + key("dense") + ".ckpt");
  try {
    if (std::filesystem::exists(path)) {
      if (!dense_) dense_ = model::load_checkpoint(path);
      return {path, true};
    }
    auto result = model::train_dense(
        cfg_.model, dataset(),
        model::TrainHyper{cfg_.train.learning_rate, cfg_.train.epochs, cfg_.train.batch_size});
    dense_ = std::move(result.params);
    model::save_checkpoint(*dense_, path);
    return {path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("train", e.what());
  }
}

StageResult Pipeline::ensure_pruned() {
  ensure_dense();
  const auto path = artifact("pruned-" + key("pruned") + ".ckpt");
  const auto mask_path = artifact("pruned-" + key("pruned") + ".mask");
  try {
    if (std::filesystem::exists(path) && std::filesystem::exists(mask_path)) {
      if (!pruned_) pruned_ = model::load_checkpoint(path);
      if (!mask_) mask_ = pruning::load_mask(mask_path);
      return {path, true};
    }
    auto train_split = dataset().split(Split::Train);
    const size_t n_calib = std::min(train_split.size(), size_t(cfg_.prune.calibration_samples));
    std::vector<std::vector<int>> calib_seqs(n_calib);
    for (size_t i = 0; i < n_calib; ++i) {
      calib_seqs[i] = train_split[i].question;
      calib_seqs[i].insert(calib_seqs[i].end(), train_split[i].response.begin(),
                           train_split[i].response.end());
    }
    const auto norms = pruning::collect_calibration_norms(*dense_, calib_seqs);
    const auto targets = pruning::targets_from_name(cfg_.prune.targets);
    const auto scheme = pruning::scheme_from_name(cfg_.prune.scheme);

    pruning::PruneResult result;
    if (scheme == pruning::Scheme::Unstructured) {
      const auto scores = pruning::compute_wanda_scores(*dense_, norms, targets);
      result = pruning::prune_unstructured(*dense_, cfg_.prune.ratio, scores, targets);
    } else if (scheme == pruning::Scheme::SemiStructured) {
      const auto scores = pruning::compute_wanda_scores(*dense_, norms, targets);
      result = pruning::prune_semi_structured(*dense_, cfg_.prune.n, cfg_.prune.m, scores,
                                              targets);
    } else {
      const auto scores =
          pruning::compute_wanda_scores(*dense_, norms, pruning::Targets::Attention);
      const auto head_scores = pruning::default_head_scores(*dense_, scores);
      result = pruning::prune_structured_heads(*dense_, cfg_.prune.ratio, head_scores);
    }
    pruned_ = std::move(result.params);
    mask_ = std::move(result.mask);
    model::save_checkpoint(*pruned_, path);
    pruning::save_mask(*mask_, mask_path);
    return {path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("prune", e.what());
  }
}

StageResult Pipeline::ensure_captures() {
  ensure_pruned();
  const std::string k = key("captures");
  const auto probe_dense_path = artifact("trace-" + k + "-probe-dense.bin");
  const auto probe_pruned_path = artifact("trace-" + k + "-probe-pruned.bin");
  const auto rec_dense_path = artifact("trace-" + k + "-recovery-dense.bin");
  const auto rec_pruned_path = artifact("trace-" + k + "-recovery-pruned.bin");
  try {
    if (std::filesystem::exists(probe_dense_path) &&
        std::filesystem::exists(probe_pruned_path) &&
        std::filesystem::exists(rec_dense_path) && std::filesystem::exists(rec_pruned_path)) {
      if (!probe_dense_) probe_dense_ = model::load_trace(probe_dense_path);
      if (!probe_pruned_) probe_pruned_ = model::load_trace(probe_pruned_path);
      if (!rec_dense_) rec_dense_ = model::load_trace(rec_dense_path);
      if (!rec_pruned_) rec_pruned_ = model::load_trace(rec_pruned_path);
      return {probe_dense_path, true};
    }
    const bool want_ffn = cfg_.lcc.target == "ffn_output";
    auto capture_split = [&](std::span<const TaskRecord> records,
                             std::optional<model::ActivationTrace>& dtr,
                             std::optional<model::ActivationTrace>& ptr) {
      std::vector<std::vector<int>> questions(records.size());
      for (size_t i = 0; i < records.size(); ++i) questions[i] = records[i].question;
      model::CaptureRequest req;
      req.capture_ffn = want_ffn;
      dtr = std::move(*model::forward(*dense_, questions, &req).trace);
      ptr = std::move(*model::forward(*pruned_, questions, &req).trace);
    };
    capture_split(dataset().split(Split::Probe), probe_dense_, probe_pruned_);
    capture_split(recovery_records(), rec_dense_, rec_pruned_);
    model::save_trace(*probe_dense_, probe_dense_path);
    model::save_trace(*probe_pruned_, probe_pruned_path);
    model::save_trace(*rec_dense_, rec_dense_path);
    model::save_trace(*rec_pruned_, rec_pruned_path);
    return {probe_dense_path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("capture", e.what());
  }
}

StageResult Pipeline::ensure_decompose() {
  ensure_captures();
  const std::string k = key("decompose");
  const auto lambda_path = artifact("deltalambda-" + k + ".csv");
  const auto comp_path = artifact("components-" + k + ".csv");
  try {
    if (std::filesystem::exists(lambda_path) && std::filesystem::exists(comp_path)) {
      return {lambda_path, true};
    }
    const auto probe_split = dataset().split(Split::Probe);
    const auto table = lossdiff::head_recovery_scan(*dense_, *pruned_, probe_split,
                                                    std::max(1, cfg_.probe.k));
    {
      std::ofstream out(lambda_path.string() + ".tmp", std::ios::trunc);
      out << "layer,head,lambda_pruned,lambda_recovered,delta_lambda\n";
      for (const auto& row : table) {
        out << row.layer << "," << row.head << "," << format_double(row.lambda_pruned) << ","
            << format_double(row.lambda_recovered) << "," << format_double(row.delta_lambda)
            << "\n";
      }
    }
    std::filesystem::rename(lambda_path.string() + ".tmp", lambda_path);

    {
      std::ofstream out(comp_path.string() + ".tmp", std::ios::trunc);
      out << "layer,head,component,sigma,alpha_bar";
      for (int j = 0; j < cfg_.model.d_head; ++j) out << ",v" << j;
      out << "\n";
      for (int l = 0; l < cfg_.model.n_layers; ++l) {
        for (int h = 0; h < cfg_.model.n_heads; ++h) {
          const auto lm = lossdiff::assemble_loss_matrix(*probe_dense_, *probe_pruned_, l, h);
          const auto comp = lossdiff::decompose(lm);
          for (size_t i = 0; i < comp.factors.sigma.size(); ++i) {
            out << l << "," << h << "," << i << "," << format_double(comp.factors.sigma[i])
                << "," << format_double(comp.alpha_bar[i]);
            for (int j = 0; j < cfg_.model.d_head; ++j) {
              out << "," << format_double(comp.factors.v.at(j, int(i)));
            }
            out << "\n";
          }
        }
      }
    }
    std::filesystem::rename(comp_path.string() + ".tmp", comp_path);
    return {lambda_path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("decompose", e.what());
  }
}

std::filesystem::path Pipeline::write_scan_table(int k, double scale, std::optional<int> minor) {
  ensure_captures();
  std::string name = "scan-k" + std::to_string(k) + "-scale" + format_double(scale);
  if (minor) name += "-minor" + std::to_string(*minor);
  const auto path = artifact(name + ".csv");
  const auto table =
      lossdiff::head_recovery_scan(*dense_, *pruned_, dataset().split(Split::Probe), k, scale,
                                   minor);
  std::ofstream out(path.string() + ".tmp", std::ios::trunc);
  out << "layer,head,lambda_pruned,lambda_recovered,delta_lambda\n";
  for (const auto& row : table) {
    out << row.layer << "," << row.head << "," << format_double(row.lambda_pruned) << ","
        << format_double(row.lambda_recovered) << "," << format_double(row.delta_lambda)
        << "\n";
  }
  out.close();
  std::filesystem::rename(path.string() + ".tmp", path);
  return path;
}

StageResult Pipeline::ensure_probe() {
  ensure_captures();
  const std::string k = key("probe");
  const auto sel_path = artifact("selection-" + k + ".json");
  const auto csv_path = artifact("probes-" + k + ".csv");
  try {
    if (std::filesystem::exists(sel_path)) {
      if (!selected_) {
        std::ifstream in(sel_path);
        json j = json::parse(in);
        selected_ = std::vector<std::pair<int, int>>{};
        for (const auto& e : j.at("selected")) {
          selected_->emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
        }
      }
      return {sel_path, true};
    }

    std::vector<probing::ProbeRecord> records;
    if (cfg_.probe.selector == "probe") {
      const auto probe_split = dataset().split(Split::Probe);
      const auto tuples = probing::build_contrastive_dataset(probe_split, *dense_);
      const auto inputs = probing::capture_probe_inputs(tuples, *dense_, *pruned_);
      probing::ProbeHyper hyper;
      hyper.learning_rate = cfg_.probe.learning_rate;
      hyper.epochs = cfg_.probe.epochs;
      hyper.seed = derive_seed(cfg_.seed, "probe", cfg_.probe.seed);
      for (int l = 0; l < cfg_.model.n_layers; ++l) {
        for (int h = 0; h < cfg_.model.n_heads; ++h) {
          const auto lm = lossdiff::assemble_loss_matrix(inputs.dense_q, inputs.pruned_q, l, h);
          lossdiff::PrincipalComponent pc;
          if (cfg_.probe.k >= 1) {
            pc = lossdiff::estimate_lost_component(lm, cfg_.probe.k);
          } else {
            pc.c.assign(size_t(cfg_.model.d_head), 0.0);
            pc.k = 0;
          }
          const auto pairs = probing::build_probe_pairs(inputs, l, h, pc);
          records.push_back(probing::train_probe(pairs.pairs, hyper, l, h));
        }
      }
      selected_ = probing::rank_heads(records, cfg_.probe.head_fraction);
    } else if (cfg_.probe.selector == "random") {
      selected_ = probing::select_heads_random(
          cfg_.model.n_layers, cfg_.model.n_heads, cfg_.probe.head_fraction,
          derive_seed(cfg_.seed, "random_selector", cfg_.probe.seed));
    } else {
      const auto metric =
          cfg_.probe.selector == "mse" ? probing::Metric::Mse : probing::Metric::Kl;
      selected_ = probing::select_heads_by_metric(*dense_, *pruned_, *probe_dense_,
                                                  *probe_pruned_, metric,
                                                  cfg_.probe.head_fraction);
    }

    if (!records.empty()) {
      std::ofstream out(csv_path.string() + ".tmp", std::ios::trunc);
      out << "layer,head,accuracy,selected\n";
      for (const auto& r : records) {
        const bool sel =
            std::find(selected_->begin(), selected_->end(),
                      std::make_pair(r.layer, r.head)) != selected_->end();
        out << r.layer << "," << r.head << "," << format_double(r.val_accuracy) << ","
            << (sel ? 1 : 0) << "\n";
      }
      out.close();
      std::filesystem::rename(csv_path.string() + ".tmp", csv_path);
    }
    {
      json j;
      json sel = json::array();
      for (auto [l, h] : *selected_) sel.push_back({l, h});
      j["selected"] = sel;
      j["selector"] = cfg_.probe.selector;
      std::ofstream out(sel_path.string() + ".tmp", std::ios::trunc);
      out << j.dump(2) << "\n";
      out.close();
      std::filesystem::rename(sel_path.string() + ".tmp", sel_path);
    }
    return {sel_path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("probe", e.what());
  }
}

StageResult Pipeline::ensure_compensate() {
  ensure_probe();
  const auto path = artifact("plan-" + key("plan") + ".bin");
  try {
    if (std::filesystem::exists(path)) {
      if (!plan_) plan_ = lcc::load_plan(path);
      return {path, true};
    }
    lcc::ComponentFlags flags{cfg_.lcc.use_directions, cfg_.lcc.use_bias};
    const auto beta_init =
        cfg_.lcc.beta_init == "alpha" ? lcc::BetaInit::Alpha : lcc::BetaInit::Zero;

    lcc::RecoveryPlan plan;
    if (cfg_.lcc.target == "attention_head") {
      for (auto [l, h] : *selected_) {
        const auto lm = lossdiff::assemble_loss_matrix(*rec_dense_, *rec_pruned_, l, h);
        const auto comp = lossdiff::decompose(lm);
        plan.components.push_back(lcc::init_learned_component(
            lcc::Site{l, h}, comp, cfg_.model.d_head, flags, beta_init));
      }
    } else {
      for (int l = 0; l < cfg_.model.n_layers; ++l) {
        lossdiff::LossMatrix lm;
        lm.layer = l;
        lm.head = -1;
        lm.n_samples = rec_dense_->n_samples;
        lm.policy = rec_dense_->policy;
        lm.dz = linalg::Matrix(lm.n_samples, cfg_.model.d_model);
        for (int n = 0; n < lm.n_samples; ++n) {
          const auto fd = rec_dense_->ffn_sample(l, n);
          const auto fp = rec_pruned_->ffn_sample(l, n);
          for (int j = 0; j < cfg_.model.d_model; ++j) {
            lm.dz.at(n, j) = double(fd[size_t(j)]) - double(fp[size_t(j)]);
          }
        }
        const auto comp = lossdiff::decompose(lm);
        plan.components.push_back(lcc::init_learned_component(
            lcc::Site{l, -1}, comp, cfg_.model.d_model, flags, beta_init));
      }
    }

    lcc::LccHyper hyper;
    hyper.learning_rate = cfg_.lcc.learning_rate;
    hyper.epochs = cfg_.lcc.epochs;
    hyper.batch_size = cfg_.lcc.batch_size;
    hyper.loss_tokens =
        cfg_.lcc.loss_tokens == "all" ? lcc::LossTokens::All : lcc::LossTokens::ResponseOnly;
    hyper.seed = derive_seed(cfg_.seed, "lcc", cfg_.lcc.seed);
    plan_ = lcc::train_components(*pruned_, plan, recovery_records(), hyper);
    lcc::save_plan(*plan_, path);
    plan_ = lcc::load_plan(path);  // fold always sees the serialized precision
    return {path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("compensate", e.what());
  }
}

StageResult Pipeline::ensure_fold() {
  ensure_compensate();
  const auto path = artifact("folded-" + key("folded") + ".ckpt");
  try {
    if (std::filesystem::exists(path)) {
      if (!folded_) folded_ = model::load_checkpoint(path);
      return {path, true};
    }
    folded_ = lcc::fold_components(*pruned_, *plan_);
    model::save_checkpoint(*folded_, path);
    return {path, false};
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("fold", e.what());
  }
}

EvalReport Pipeline::ensure_eval() {
  ensure_fold();
  ensure_decompose();
  try {
    EvalReport rep;
    const auto held_out = dataset().split(Split::HeldOut);
    rep.dense = evaluate(*dense_, held_out);
    rep.pruned = evaluate(*pruned_, held_out);
    rep.recovered = evaluate(*folded_, held_out);
    rep.accuracy = rep.recovered.accuracy;
    rep.perplexity = rep.recovered.perplexity;
    rep.delta_lambda_table = "deltalambda-" + key("decompose") + ".csv";

    std::set<std::pair<int, int>> compensated;
    std::set<int> ffn_layers;
    for (const auto& lc : plan_->components) {
      if (lc.site.is_ffn()) {
        ffn_layers.insert(lc.site.layer);
      } else {
        compensated.insert({lc.site.layer, lc.site.head});
      }
    }
    rep.sparsity = pruning::sparsity_report(*folded_, *mask_, compensated, ffn_layers);
    rep.config_echo = cfg_.canonical_json();

    {
      std::ofstream out(artifact("report.json").string() + ".tmp", std::ios::trunc);
      out << rep.to_json();
    }
    std::filesystem::rename(artifact("report.json").string() + ".tmp", artifact("report.json"));
    {
      std::ofstream out(artifact("report.txt").string() + ".tmp", std::ios::trunc);
      out << rep.to_text();
    }
    std::filesystem::rename(artifact("report.txt").string() + ".tmp", artifact("report.txt"));
    return rep;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("eval", e.what());
  }
}

const model::ModelParams& Pipeline::dense_params() {
  ensure_dense();
  return *dense_;
}
const model::ModelParams& Pipeline::pruned_params() {
  ensure_pruned();
  return *pruned_;
}
const model::ModelParams& Pipeline::folded_params() {
  ensure_fold();
  return *folded_;
}
const pruning::PruneMask& Pipeline::prune_mask() {
  ensure_pruned();
  return *mask_;
}
const std::vector<std::pair<int, int>>& Pipeline::selected_heads() {
  ensure_probe();
  return *selected_;
}
const lcc::RecoveryPlan& Pipeline::plan() {
  ensure_compensate();
  return *plan_;
}

EvalReport run_pipeline(const ExperimentConfig& cfg) {
  Pipeline p(cfg);
  return p.ensure_eval();
}

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& axis,
                            std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("sweep: values must be non-empty");
  if (axis != "k" && axis != "head_fraction") {
    throw std::invalid_argument("sweep: axis must be k or head_fraction");
  }
  std::vector<SweepRow> rows;
  for (double v : values) {
    ExperimentConfig c = cfg;
    if (axis == "k") {
      c.probe.k = int(std::llround(v));
    } else {
      c.probe.head_fraction = v;
    }
    const auto rep = run_pipeline(c);
    rows.push_back({v, rep.accuracy, rep.perplexity, rep.sparsity.overhead_max});
  }
  const auto path = std::filesystem::path(cfg.out_dir) / ("sweep-" + axis + ".csv");
  std::ofstream out(path.string() + ".tmp", std::ios::trunc);
  out << "value,accuracy,perplexity,overhead_max\n";
  for (const auto& r : rows) {
    out << format_double(r.value) << "," << format_double(r.accuracy) << ","
        << format_double(r.perplexity) << "," << format_double(r.overhead_max) << "\n";
  }
  out.close();
  std::filesystem::rename(path.string() + ".tmp", path);
  return rows;
}

}  // namespace rlcc::harness
