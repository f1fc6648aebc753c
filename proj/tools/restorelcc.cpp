// Command-line surface for the pruned-transformer recovery lab. Every
// subcommand drives the pipeline up to its stage against a content-addressed
// artifact store, so completed stages are reused rather than recomputed.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "restorelcc/harness.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
};

harness::ExperimentConfig resolve_config(const GlobalArgs& g) {
  auto cfg = harness::load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.out_dir) cfg.out_dir = *g.out_dir;
  return cfg;
}

void add_globals(CLI::App* cmd, GlobalArgs& g) {
  cmd->add_option("--config", g.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", g.seed, "override the experiment seed");
  cmd->add_option("--out", g.out_dir, "override the output directory");
}

void print_stage(const char* stage, const harness::StageResult& r) {
  std::printf("%s: %s%s\n", stage, r.path.string().c_str(), r.cached ? " (cached)" : "");
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(std::stod(item));
  }
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"restorelcc: recovery of pruned toy transformers via lost-component "
               "compensation"};
  app.require_subcommand(1);

  GlobalArgs g_train, g_prune, g_capture, g_decompose, g_probe, g_compensate, g_fold, g_eval,
      g_sweep, g_report;

  auto* cmd_train = app.add_subcommand("train", "train the dense model");
  add_globals(cmd_train, g_train);
  auto* cmd_prune = app.add_subcommand("prune", "prune the dense model");
  add_globals(cmd_prune, g_prune);
  auto* cmd_capture = app.add_subcommand("capture", "capture paired activation traces");
  add_globals(cmd_capture, g_capture);

  auto* cmd_decompose =
      app.add_subcommand("decompose", "decompose activation losses and emit gain tables");
  add_globals(cmd_decompose, g_decompose);
  std::optional<int> scan_k;
  std::optional<double> scan_scale;
  std::optional<int> minor_component;
  cmd_decompose->add_option("--scan-k", scan_k, "component count for an extra scan table");
  cmd_decompose->add_option("--scale", scan_scale, "coefficient scale for the extra scan");
  cmd_decompose->add_option("--minor-component", minor_component,
                            "single component index for the minor-component scan "
                            "(scale defaults to 1000)");

  auto* cmd_probe = app.add_subcommand("probe", "train probes and select heads");
  add_globals(cmd_probe, g_probe);
  auto* cmd_compensate =
      app.add_subcommand("compensate", "initialize and train lost components");
  add_globals(cmd_compensate, g_compensate);
  auto* cmd_fold = app.add_subcommand("fold", "fold trained components into bias slots");
  add_globals(cmd_fold, g_fold);
  auto* cmd_eval = app.add_subcommand("eval", "evaluate dense, pruned and recovered models");
  add_globals(cmd_eval, g_eval);

  auto* cmd_sweep = app.add_subcommand("sweep", "run the pipeline over an axis of values");
  add_globals(cmd_sweep, g_sweep);
  std::string axis = "k";
  std::string values_csv;
  cmd_sweep->add_option("--axis", axis, "sweep axis: k or head_fraction")->required();
  cmd_sweep->add_option("--values", values_csv, "comma-separated values")->required();

  auto* cmd_report = app.add_subcommand("report", "run the full pipeline and print the report");
  add_globals(cmd_report, g_report);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_train->parsed()) {
      harness::Pipeline p(resolve_config(g_train));
      print_stage("dense", p.ensure_dense());
    } else if (cmd_prune->parsed()) {
      harness::Pipeline p(resolve_config(g_prune));
      print_stage("pruned", p.ensure_pruned());
    } else if (cmd_capture->parsed()) {
      harness::Pipeline p(resolve_config(g_capture));
      print_stage("captures", p.ensure_captures());
    } else if (cmd_decompose->parsed()) {
      harness::Pipeline p(resolve_config(g_decompose));
      print_stage("decompose", p.ensure_decompose());
      if (scan_k || minor_component) {
        const double scale = scan_scale.value_or(minor_component ? 1000.0 : 1.0);
        const auto path = p.write_scan_table(scan_k.value_or(p.config().probe.k), scale,
                                             minor_component);
        std::printf("scan: %s\n", path.string().c_str());
      }
    } else if (cmd_probe->parsed()) {
      harness::Pipeline p(resolve_config(g_probe));
      print_stage("probe", p.ensure_probe());
      for (auto [l, h] : p.selected_heads()) std::printf("selected layer %d head %d\n", l, h);
    } else if (cmd_compensate->parsed()) {
      harness::Pipeline p(resolve_config(g_compensate));
      print_stage("plan", p.ensure_compensate());
    } else if (cmd_fold->parsed()) {
      harness::Pipeline p(resolve_config(g_fold));
      print_stage("folded", p.ensure_fold());
    } else if (cmd_eval->parsed() || cmd_report->parsed()) {
      harness::Pipeline p(resolve_config(cmd_eval->parsed() ? g_eval : g_report));
      const auto rep = p.ensure_eval();
      std::fputs(rep.to_text().c_str(), stdout);
    } else if (cmd_sweep->parsed()) {
      const auto cfg = resolve_config(g_sweep);
      const auto values = parse_values(values_csv);
      const auto rows = harness::sweep(cfg, axis, values);
      std::printf("value,accuracy,perplexity,overhead_max\n");
      for (const auto& r : rows) {
        std::printf("%s,%s,%s,%s\n", format_double(r.value).c_str(),
                    format_double(r.accuracy).c_str(), format_double(r.perplexity).c_str(),
                    format_double(r.overhead_max).c_str());
      }
    }
  } catch (const harness::StageError& e) {
    std::cerr << "stage " << e.stage << " failed: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
