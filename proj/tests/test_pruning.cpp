#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "restorelcc/dataset.hpp"
#include "restorelcc/pruning.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;
using pruning::Scores;
using pruning::Targets;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.vocab_size = 64;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_head = 8;
  c.d_ffn = 32;
  c.max_seq_len = 32;
  c.seed = 11;
  return c;
}

pruning::CalibNorms calib_for(const model::ModelParams& p, int n_seqs = 16) {
  const auto ds = harness::gen_synthetic_task(2, 200, 6, 10);
  std::vector<std::vector<int>> seqs;
  for (int i = 0; i < n_seqs; ++i) seqs.push_back(ds.records[size_t(i)].question);
  return pruning::collect_calibration_norms(p, seqs);
}

}  // namespace

TEST_SUITE("pruning") {

TEST_CASE("wanda scores: unit norms reduce to weight magnitude") {
  linalg::Matrix w(2, 3);
  w.at(0, 0) = -2.0;
  w.at(0, 1) = 0.5;
  w.at(1, 2) = 0.0;
  std::vector<double> norms{1.0, 1.0, 1.0};
  const auto s = pruning::score_weights_wanda(w, norms);
  CHECK(s.at(0, 0) == 2.0);
  CHECK(s.at(0, 1) == 0.5);
  CHECK(s.at(1, 2) == 0.0);  // zero weights score zero regardless of norm
}

TEST_CASE("wanda scores: ranking matches a brute-force sort oracle") {
  Rng rng(4);
  linalg::Matrix w(4, 4);
  for (auto& v : w.data) v = rng.next_normal();
  std::vector<double> norms(4, 0.0);
  for (auto& n : norms) n = std::abs(rng.next_normal());
  const auto s = pruning::score_weights_wanda(w, norms);

  std::vector<size_t> got(16), want(16);
  std::iota(got.begin(), got.end(), size_t(0));
  std::iota(want.begin(), want.end(), size_t(0));
  std::sort(got.begin(), got.end(), [&](size_t a, size_t b) { return s.data[a] < s.data[b]; });
  std::sort(want.begin(), want.end(), [&](size_t a, size_t b) {
    const double sa = std::abs(w.data[a]) * norms[a % 4];
    const double sb = std::abs(w.data[b]) * norms[b % 4];
    return sa < sb;
  });
  CHECK(got == want);
  CHECK_THROWS_AS((void)pruning::score_weights_wanda(w, std::vector<double>(3, 1.0)),
                  std::invalid_argument);
}

TEST_CASE("unstructured: ratio zero leaves the model untouched") {
  const auto p = model::init_params(small_config());
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto result = pruning::prune_unstructured(p, 0.0, scores);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(result.params.layers[l].wq == p.layers[l].wq);
    CHECK(result.params.layers[l].w2 == p.layers[l].w2);
  }
  for (const auto& e : result.mask.entries) {
    for (uint8_t k : e.keep) CHECK(k == 1);
  }
}

TEST_CASE("unstructured: exactly the lowest-scoring half is zeroed") {
  auto p = model::init_params(small_config());
  // deterministic distinct weights in one matrix, then prune only via scores
  auto& w = p.layers[0].wq;
  const auto calib = calib_for(p);
  auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto& s = scores.by_matrix.at("layer0.wq");

  const auto result = pruning::prune_unstructured(p, 0.5, scores);
  std::vector<size_t> order(s.data.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return s.data[a] != s.data[b] ? s.data[a] < s.data[b] : a < b; });
  const size_t drop = s.data.size() / 2;
  const auto* entry = result.mask.find("layer0.wq");
  REQUIRE(entry != nullptr);
  for (size_t k = 0; k < s.data.size(); ++k) {
    const bool should_drop = std::find(order.begin(), order.begin() + long(drop), k) !=
                             order.begin() + long(drop);
    CHECK(entry->keep[k] == (should_drop ? 0 : 1));
  }
  (void)w;
}

TEST_CASE("unstructured: mask faithfulness and idempotence") {
  const auto p = model::init_params(small_config());
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto once = pruning::prune_unstructured(p, 0.5, scores);
  CHECK(pruning::check_mask_faithfulness(once.params, once.mask));
  const auto twice = pruning::prune_unstructured(once.params, 0.5, scores);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(twice.params.layers[l].wq == once.params.layers[l].wq);
    CHECK(twice.params.layers[l].w1 == once.params.layers[l].w1);
  }
}

TEST_CASE("semi-structured: keeps the top n per group with tie rule") {
  auto p = model::init_params(small_config());
  Scores scores;
  for (const char* mat : {"wq", "wk", "wv", "wo"}) {
    for (int l = 0; l < 2; ++l) {
      linalg::Matrix s(16, 16);
      scores.by_matrix["layer" + std::to_string(l) + "." + std::string(mat)] = s;
    }
  }
  for (int l = 0; l < 2; ++l) {
    scores.by_matrix["layer" + std::to_string(l) + ".w1"] = linalg::Matrix(32, 16);
    scores.by_matrix["layer" + std::to_string(l) + ".w2"] = linalg::Matrix(16, 32);
  }
  // one group with known scores
  auto& s = scores.by_matrix.at("layer0.wq");
  s.at(0, 0) = 0.1;
  s.at(0, 1) = 0.5;
  s.at(0, 2) = 0.3;
  s.at(0, 3) = 0.05;
  const auto result = pruning::prune_semi_structured(p, 2, 4, scores);
  const auto* entry = result.mask.find("layer0.wq");
  REQUIRE(entry != nullptr);
  CHECK(entry->keep[0] == 0);
  CHECK(entry->keep[1] == 1);  // 0.5 kept
  CHECK(entry->keep[2] == 1);  // 0.3 kept
  CHECK(entry->keep[3] == 0);
  // all-equal scores keep the lowest indices
  CHECK(entry->keep[4] == 1);
  CHECK(entry->keep[5] == 1);
  CHECK(entry->keep[6] == 0);
  CHECK(entry->keep[7] == 0);
}

TEST_CASE("semi-structured: every matrix lands at exactly n/m sparsity") {
  const auto p = model::init_params(small_config());
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto result = pruning::prune_semi_structured(p, 2, 4, scores);
  for (const auto& e : result.mask.entries) {
    long kept = 0;
    for (uint8_t k : e.keep) kept += k;
    CHECK(double(kept) / double(e.keep.size()) == 0.5);
    // exhaustive group check
    for (int r = 0; r < e.rows; ++r) {
      for (int g = 0; g < e.cols; g += 4) {
        int in_group = 0;
        for (int j = 0; j < 4; ++j) in_group += e.keep[size_t(r) * e.cols + size_t(g + j)];
        CHECK(in_group == 2);
      }
    }
  }
}

TEST_CASE("semi-structured: non-divisible input dimension is rejected") {
  auto cfg = small_config();
  const auto p = model::init_params(cfg);
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  try {
    (void)pruning::prune_semi_structured(p, 2, 5, scores);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("pad") != std::string::npos);
  }
}

TEST_CASE("structured heads: a removed head emits zero activations") {
  const auto cfg = small_config();
  const auto p = model::init_params(cfg);
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::Attention);
  auto head_scores = pruning::default_head_scores(p, scores);
  head_scores[{0, 1}] = -1.0;  // force (0,1) to be the pruned head
  const auto result = pruning::prune_structured_heads(p, 0.25, head_scores);

  const auto ds = harness::gen_synthetic_task(9, 200, 6, 10);
  std::vector<std::vector<int>> batch{ds.records[0].question, ds.records[1].question};
  model::CaptureRequest req;
  const auto out = model::forward(result.params, batch, &req);
  for (int n = 0; n < 2; ++n) {
    const auto z = out.trace->head_sample(0, 1, n);
    for (float v : z) CHECK(v == 0.0f);
  }
  CHECK(pruning::check_mask_faithfulness(result.params, result.mask));
}

TEST_CASE("structured heads: zeroed fraction matches the parameter-count oracle") {
  model::ModelConfig cfg;  // toy default
  const auto p = model::init_params(cfg);
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::Attention);
  const auto head_scores = pruning::default_head_scores(p, scores);
  const auto result = pruning::prune_structured_heads(p, 0.2, head_scores);
  const auto rep = pruning::sparsity_report(result.params, result.mask, {});

  // floor(0.2 * 16) = 3 heads; each head owns 3 qkv row-slices + 1 wo column
  // slice = 4 * d_head * d_model weights
  const long removed = 3L * 4L * cfg.d_head * cfg.d_model;
  long total = 0;
  for (const auto& e : result.mask.entries) total += long(e.keep.size());
  const double expected = double(removed) / double(total);
  CHECK(std::abs(rep.global_sparsity - expected) < 1e-12);
  // and the attention-fraction approximation from the op contract
  const double attn_fraction = 4.0 * 64 * 64 / (4.0 * 64 * 64 + 2.0 * 64 * 256);
  CHECK(std::abs(rep.global_sparsity - 0.2 * attn_fraction) < 0.01);
}

TEST_CASE("structured heads: refusing to empty a whole layer") {
  const auto cfg = small_config();  // 2 layers x 2 heads
  const auto p = model::init_params(cfg);
  std::map<std::pair<int, int>, double> head_scores{
      {{0, 0}, 0.0}, {{0, 1}, 0.1}, {{1, 0}, 5.0}, {{1, 1}, 6.0}};
  CHECK_THROWS_AS((void)pruning::prune_structured_heads(p, 0.5, head_scores),
                  std::invalid_argument);
}

TEST_CASE("sparsity report: compensation overhead follows the closed form") {
  const auto cfg = small_config();
  const auto p = model::init_params(cfg);
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto pr = pruning::prune_unstructured(p, 0.5, scores);

  SUBCASE("no compensated heads") {
    const auto rep = pruning::sparsity_report(pr.params, pr.mask, {});
    CHECK(rep.overhead_max == 0.0);
  }
  SUBCASE("full compensation hits 1/(2 d_model)") {
    std::set<std::pair<int, int>> all;
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h) all.insert({l, h});
    }
    const auto rep = pruning::sparsity_report(pr.params, pr.mask, all);
    CHECK(rep.overhead_max == 1.0 / (2.0 * cfg.d_model));
  }
}

TEST_CASE("sparsity report: the published bound at hidden size 1000") {
  model::ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 10;
  cfg.d_model = 1000;
  cfg.d_head = 100;
  cfg.d_ffn = 8;
  cfg.max_seq_len = 4;
  const auto p = model::init_params(cfg);
  pruning::PruneMask empty_mask;
  std::set<std::pair<int, int>> all;
  for (int h = 0; h < 10; ++h) all.insert({0, h});
  const auto rep = pruning::sparsity_report(p, empty_mask, all);
  CHECK(rep.overhead_max == 0.0005);
}

TEST_CASE("sparsity report: toy default full compensation") {
  model::ModelConfig cfg;  // d_model 64
  const auto p = model::init_params(cfg);
  pruning::PruneMask empty_mask;
  std::set<std::pair<int, int>> all;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) all.insert({l, h});
  }
  const auto rep = pruning::sparsity_report(p, empty_mask, all);
  CHECK(rep.overhead_max == 1.0 / 128.0);
}

TEST_CASE("mask files round-trip") {
  const auto p = model::init_params(small_config());
  const auto calib = calib_for(p);
  const auto scores = pruning::compute_wanda_scores(p, calib, Targets::All);
  const auto result = pruning::prune_semi_structured(p, 2, 4, scores);
  const auto path = std::filesystem::temp_directory_path() / "rlcc_test_mask.bin";
  pruning::save_mask(result.mask, path);
  const auto loaded = pruning::load_mask(path);
  REQUIRE(loaded.entries.size() == result.mask.entries.size());
  CHECK(loaded.scheme == result.mask.scheme);
  CHECK(loaded.n == result.mask.n);
  CHECK(loaded.m == result.mask.m);
  for (size_t i = 0; i < loaded.entries.size(); ++i) {
    CHECK(loaded.entries[i].name == result.mask.entries[i].name);
    CHECK(loaded.entries[i].keep == result.mask.entries[i].keep);
  }
  CHECK(pruning::check_mask_faithfulness(result.params, loaded));
  std::filesystem::remove(path);
}

}  // TEST_SUITE
