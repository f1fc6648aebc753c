#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "restorelcc/dataset.hpp"
#include "restorelcc/lcc.hpp"
#include "restorelcc/pruning.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;

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
  c.seed = 41;
  return c;
}

struct Fixture {
  model::ModelParams dense;
  model::ModelParams pruned;
  harness::TaskDataset ds;
  model::ActivationTrace rec_dense, rec_pruned;
};

Fixture make_fixture() {
  Fixture f{model::init_params(small_config()), {}, harness::gen_synthetic_task(8, 300, 6, 10),
            {}, {}};
  std::vector<std::vector<int>> calib;
  for (int i = 0; i < 16; ++i) calib.push_back(f.ds.records[size_t(i)].question);
  const auto norms = pruning::collect_calibration_norms(f.dense, calib);
  const auto scores = pruning::compute_wanda_scores(f.dense, norms, pruning::Targets::All);
  f.pruned = pruning::prune_unstructured(f.dense, 0.5, scores).params;
  const auto recs = f.ds.split(harness::Split::Recovery);
  auto [d, p] = lossdiff::capture_pair(f.dense, f.pruned, recs);
  f.rec_dense = std::move(d);
  f.rec_pruned = std::move(p);
  return f;
}

lossdiff::SvdComponents components_for(const Fixture& f, int l, int h) {
  return lossdiff::decompose(lossdiff::assemble_loss_matrix(f.rec_dense, f.rec_pruned, l, h));
}

template <typename S>
std::string params_bytes(const model::ParamsT<S>& p) {
  std::string bytes;
  model::for_each_tensor(p, [&](const std::string&, const model::TensorShape&,
                                const std::vector<S>& data) {
    bytes.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(S));
  });
  return bytes;
}

}  // namespace

TEST_SUITE("lcc") {

TEST_CASE("init: zero loss matrices give zero components") {
  lossdiff::LossMatrix lm;
  lm.n_samples = 6;
  lm.dz = linalg::Matrix(6, 8);
  const auto comp = lossdiff::decompose(lm);
  const auto lc = lcc::init_learned_component({0, 0}, comp, 8, {});
  for (double b : lc.beta) CHECK(b == 0.0);
  for (double b : lc.bias) CHECK(b == 0.0);
  const auto c = lcc::compose_component(lc);
  for (double v : c) CHECK(v == 0.0);
}

TEST_CASE("init: constant rows warm-start at the shared row") {
  lossdiff::LossMatrix lm;
  lm.n_samples = 5;
  lm.dz = linalg::Matrix(5, 6);
  Rng rng(9);
  std::vector<double> w(6, 0.0);
  for (auto& v : w) v = rng.next_normal();
  for (int n = 0; n < 5; ++n) {
    for (int j = 0; j < 6; ++j) lm.dz.at(n, j) = w[size_t(j)];
  }
  const auto lc = lcc::init_learned_component({1, 0}, lossdiff::decompose(lm), 6, {});
  const auto c = lcc::compose_component(lc);
  for (int j = 0; j < 6; ++j) CHECK(std::abs(c[size_t(j)] - w[size_t(j)]) < 1e-10);
}

TEST_CASE("flags gate the two terms of the composition") {
  lossdiff::LossMatrix lm;
  lm.n_samples = 8;
  Rng rng(10);
  lm.dz = linalg::Matrix(8, 4);
  for (auto& v : lm.dz.data) v = rng.next_normal();
  const auto comp = lossdiff::decompose(lm);

  auto full = lcc::init_learned_component({0, 1}, comp, 4, {true, true});
  for (auto& b : full.bias) b = rng.next_normal();

  auto no_dir = full;
  no_dir.flags.use_directions = false;
  const auto c_bias_only = lcc::compose_component(no_dir);
  CHECK(c_bias_only == full.bias);

  auto no_bias = full;
  no_bias.flags.use_bias = false;
  const auto c_dir_only = lcc::compose_component(no_bias);
  const auto c_full = lcc::compose_component(full);
  for (int j = 0; j < 4; ++j) {
    CHECK(c_full[size_t(j)] ==
          doctest::Approx(c_dir_only[size_t(j)] + c_bias_only[size_t(j)]).epsilon(1e-12));
  }
}

TEST_CASE("compose matches a direct matvec oracle") {
  lcc::LearnedComponent lc;
  lc.site = {0, 0};
  Rng rng(11);
  lc.directions = linalg::Matrix(5, 3);
  for (auto& v : lc.directions.data) v = rng.next_normal();
  lc.beta = {rng.next_normal(), rng.next_normal(), rng.next_normal()};
  lc.bias.assign(5, 0.0);
  for (auto& v : lc.bias) v = rng.next_normal();
  const auto c = lcc::compose_component(lc);
  for (int j = 0; j < 5; ++j) {
    double want = lc.bias[size_t(j)];
    for (int i = 0; i < 3; ++i) want += lc.directions.at(j, i) * lc.beta[size_t(i)];
    CHECK(c[size_t(j)] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("recovery_forward with zero components equals the plain forward") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  lossdiff::LossMatrix lm;
  lm.n_samples = 4;
  lm.dz = linalg::Matrix(4, 8);
  plan.components.push_back(
      lcc::init_learned_component({0, 0}, lossdiff::decompose(lm), 8, {}));
  const std::vector<std::vector<int>> batch{f.ds.records[0].question};
  const auto rec = lcc::recovery_forward(f.pruned, plan, batch);
  const auto plain = model::forward(f.pruned, batch);
  CHECK(rec[0] == plain.logits[0]);
}

TEST_CASE("mean-loss component restores the mean site activation") {
  const auto f = make_fixture();
  const auto lm = lossdiff::assemble_loss_matrix(f.rec_dense, f.rec_pruned, 1, 1);
  lcc::RecoveryPlan plan;
  plan.components.push_back(
      lcc::init_learned_component({1, 1}, lossdiff::decompose(lm), 8, {true, false}));
  // full-rank warm start composes to the columnwise mean loss
  const auto folded = lcc::fold_components(f.pruned, plan);
  const auto recs = f.ds.split(harness::Split::Recovery);
  std::vector<std::vector<int>> questions;
  for (const auto& r : recs) questions.push_back(r.question);
  model::CaptureRequest req;
  const auto tr = model::forward(folded, questions, &req).trace;
  for (int j = 0; j < 8; ++j) {
    double mean_comp = 0.0, mean_dense = 0.0;
    for (int n = 0; n < int(recs.size()); ++n) {
      mean_comp += double(tr->head_sample(1, 1, n)[size_t(j)]);
      mean_dense += double(f.rec_dense.head_sample(1, 1, n)[size_t(j)]);
    }
    CHECK(std::abs(mean_comp - mean_dense) / double(recs.size()) < 1e-5);
  }
}

TEST_CASE("FFN-site compensation only adds the expected bias") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  lcc::LearnedComponent lc;
  lc.site = {1, -1};
  lc.directions = linalg::Matrix(16, 1);
  lc.beta = {0.0};
  lc.bias.assign(16, 0.0);
  Rng rng(13);
  for (auto& v : lc.bias) v = 0.1 * rng.next_normal();
  plan.components.push_back(lc);

  const std::vector<std::vector<int>> batch{f.ds.records[0].question};
  const auto rec = lcc::recovery_forward(f.pruned, plan, batch);
  std::vector<float> cf(16, 0.0f);
  for (int j = 0; j < 16; ++j) cf[size_t(j)] = float(lc.bias[size_t(j)]);
  const auto manual = model::forward(model::inject_ffn_bias(f.pruned, 1, cf), batch);
  CHECK(rec[0] == manual.logits[0]);
}

TEST_CASE("zero-epoch training returns the plan unchanged") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({0, 1}, components_for(f, 0, 1), 8, {}));
  lcc::LccHyper hyper;
  hyper.epochs = 0;
  const auto trained =
      lcc::train_components(f.pruned, plan, f.ds.split(harness::Split::Recovery), hyper);
  CHECK(trained.components[0].beta == plan.components[0].beta);
  CHECK(trained.components[0].bias == plan.components[0].bias);
}

TEST_CASE("training touches only beta and bias") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({0, 0}, components_for(f, 0, 0), 8, {}));
  plan.components.push_back(lcc::init_learned_component({1, 1}, components_for(f, 1, 1), 8, {}));

  const std::string before_model = params_bytes(f.pruned);
  const auto dir_before = plan.components[0].directions.data;

  lcc::LccHyper hyper;
  hyper.epochs = 3;
  hyper.learning_rate = 1e-2;
  const auto trained = lcc::train_components(
      f.pruned, plan, f.ds.split(harness::Split::Recovery).subspan(0, 16), hyper);

  CHECK(params_bytes(f.pruned) == before_model);  // frozen weights, bitwise
  CHECK(trained.components[0].directions.data == dir_before);  // frozen V, bitwise
  bool moved = false;
  for (size_t i = 0; i < trained.components[0].beta.size(); ++i) {
    if (trained.components[0].beta[i] != plan.components[0].beta[i]) moved = true;
  }
  for (size_t i = 0; i < trained.components[0].bias.size(); ++i) {
    if (trained.components[0].bias[i] != plan.components[0].bias[i]) moved = true;
  }
  CHECK(moved);
  CHECK(trained.loss_curve.size() == 3);
}

TEST_CASE("training is deterministic given the seed") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({1, 0}, components_for(f, 1, 0), 8, {}));
  lcc::LccHyper hyper;
  hyper.epochs = 2;
  hyper.seed = 5;
  const auto recs = f.ds.split(harness::Split::Recovery).subspan(0, 16);
  const auto a = lcc::train_components(f.pruned, plan, recs, hyper);
  const auto b = lcc::train_components(f.pruned, plan, recs, hyper);
  CHECK(a.components[0].beta == b.components[0].beta);
  CHECK(a.components[0].bias == b.components[0].bias);
  CHECK(a.loss_curve == b.loss_curve);
}

TEST_CASE("single-sample training approaches the direct-minimization oracle") {
  const auto f = make_fixture();
  const auto recs = f.ds.split(harness::Split::Recovery).subspan(0, 1);

  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({1, 1}, components_for(f, 1, 1), 8, {}));

  lcc::LccHyper hyper;
  hyper.epochs = 2000;
  hyper.learning_rate = 1e-2;  // test-scale schedule to reach the optimum
  hyper.batch_size = 1;
  const auto trained = lcc::train_components(f.pruned, plan, recs, hyper);
  const double trained_loss = trained.loss_curve.back();

  // independent oracle: finite-difference gradient descent over the composed
  // site vector, never touching the analytic backward path
  const auto wide = model::widen(f.pruned);
  std::vector<int> seq = recs[0].question;
  seq.insert(seq.end(), recs[0].response.begin(), recs[0].response.end());
  auto loss_of = [&](const std::vector<double>& c) {
    auto inj = model::Injections<double>::sized(wide.config);
    inj.head_const[size_t(1) * 2 + 1] = c;
    model::Workspace<double> ws;
    model::forward_sequence(wide, seq, ws, &inj);
    return model::sequence_loss<double>(ws, seq, 1, nullptr, 0.0);
  };
  std::vector<double> c(8, 0.0);
  double best = loss_of(c);
  const double fd = 1e-5;
  for (int iter = 0; iter < 3000; ++iter) {
    std::vector<double> grad(8, 0.0);
    for (int j = 0; j < 8; ++j) {
      auto cp = c, cm = c;
      cp[size_t(j)] += fd;
      cm[size_t(j)] -= fd;
      grad[size_t(j)] = (loss_of(cp) - loss_of(cm)) / (2.0 * fd);
    }
    double step = 0.5;
    bool improved = false;
    while (step > 1e-6) {
      auto cand = c;
      for (int j = 0; j < 8; ++j) cand[size_t(j)] -= step * grad[size_t(j)];
      const double l = loss_of(cand);
      if (l < best) {
        best = l;
        c = cand;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  CHECK(trained_loss <= best + 1e-3);
}

TEST_CASE("fold equals recovery_forward and preserves masks") {
  const auto cfg = small_config();
  const auto dense = model::init_params(cfg);
  const auto ds = harness::gen_synthetic_task(8, 300, 6, 10);
  std::vector<std::vector<int>> calib;
  for (int i = 0; i < 16; ++i) calib.push_back(ds.records[size_t(i)].question);
  const auto norms = pruning::collect_calibration_norms(dense, calib);
  const auto scores = pruning::compute_wanda_scores(dense, norms, pruning::Targets::All);
  const auto pr = pruning::prune_unstructured(dense, 0.5, scores);

  const auto recs = ds.split(harness::Split::Recovery);
  auto [dtr, ptr] = lossdiff::capture_pair(dense, pr.params, recs);
  lcc::RecoveryPlan plan;
  for (auto [l, h] : {std::pair{0, 0}, std::pair{1, 1}}) {
    const auto comp = lossdiff::decompose(lossdiff::assemble_loss_matrix(dtr, ptr, l, h));
    plan.components.push_back(lcc::init_learned_component({l, h}, comp, 8, {}));
  }
  const auto folded = lcc::fold_components(pr.params, plan);

  Rng rng(15);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> tokens(8, 0);
    for (auto& t : tokens) t = rng.next_below(cfg.vocab_size);
    const std::vector<std::vector<int>> batch{tokens};
    const auto a = lcc::recovery_forward(pr.params, plan, batch);
    const auto b = model::forward(folded, batch);
    for (size_t i = 0; i < a[0].size(); ++i) {
      worst = std::max(worst, std::abs(double(a[0][i]) - double(b.logits[0][i])));
    }
  }
  CHECK(worst <= 1e-12);
  CHECK(pruning::check_mask_faithfulness(folded, pr.mask));

  // empty plan folds to a bitwise-identical model
  const auto unchanged = lcc::fold_components(pr.params, lcc::RecoveryPlan{});
  CHECK(params_bytes(unchanged) == params_bytes(pr.params));
}

TEST_CASE("gradient_check on the small model stays under 1e-4") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({0, 0}, components_for(f, 0, 0), 8, {}));
  plan.components.push_back(lcc::init_learned_component({1, 1}, components_for(f, 1, 1), 8, {}));
  std::vector<std::vector<int>> batch;
  for (int i = 0; i < 3; ++i) {
    auto seq = f.ds.records[size_t(i)].question;
    seq.insert(seq.end(), f.ds.records[size_t(i)].response.begin(),
               f.ds.records[size_t(i)].response.end());
    batch.push_back(seq);
  }
  CHECK(lcc::gradient_check(plan, f.pruned, batch) < 1e-4);
}

TEST_CASE("gradient_check on a linear path stays under 1e-8") {
  // one layer, FFN disabled: the site feeds the logits through linear maps,
  // the final norm and the softmax only
  model::ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_head = 4;
  cfg.d_ffn = 8;
  cfg.max_seq_len = 8;
  cfg.seed = 2;
  auto params = model::init_params(cfg);
  for (auto& lay : params.layers) {
    std::fill(lay.w1.begin(), lay.w1.end(), 0.0f);
    std::fill(lay.w2.begin(), lay.w2.end(), 0.0f);
  }
  lcc::RecoveryPlan plan;
  lcc::LearnedComponent lc;
  lc.site = {0, 1};
  lc.directions = linalg::Matrix(4, 2);
  lc.directions.at(0, 0) = 1.0;
  lc.directions.at(1, 1) = 1.0;
  lc.beta = {0.05, -0.02};
  lc.bias = {0.01, 0.0, -0.03, 0.02};
  plan.components.push_back(lc);

  Rng rng(3);
  std::vector<std::vector<int>> batch(2);
  for (auto& seq : batch) {
    seq.assign(6, 0);
    for (auto& t : seq) t = rng.next_below(cfg.vocab_size);
  }
  CHECK(lcc::gradient_check(plan, params, batch) < 1e-8);
}

TEST_CASE("plans round-trip through the checkpoint container") {
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(
      lcc::init_learned_component({0, 1}, components_for(f, 0, 1), 8, {true, true}));
  plan.components.push_back(
      lcc::init_learned_component({1, 0}, components_for(f, 1, 0), 8, {false, true}));
  plan.loss_curve = {0.5, 0.4};
  const auto path = std::filesystem::temp_directory_path() / "rlcc_test_plan.bin";
  lcc::save_plan(plan, path);
  const auto loaded = lcc::load_plan(path);
  REQUIRE(loaded.components.size() == 2);
  CHECK(loaded.components[0].site.layer == 0);
  CHECK(loaded.components[0].site.head == 1);
  CHECK(loaded.components[1].flags.use_directions == false);
  CHECK(loaded.loss_curve == plan.loss_curve);
  // float storage: values agree to f32 precision
  for (size_t i = 0; i < plan.components[0].beta.size(); ++i) {
    CHECK(loaded.components[0].beta[i] ==
          doctest::Approx(plan.components[0].beta[i]).epsilon(1e-6));
  }
  std::filesystem::remove(path);
}

}  // TEST_SUITE

TEST_SUITE("lcc") {

TEST_CASE("non-finite loss aborts with the last-good snapshot") {
  // The scale-invariant norm squashes magnitude blow-ups into zeros, so the
  // loss stays finite under any learning rate; poison the plan directly to
  // drive the first forward non-finite.
  const auto f = make_fixture();
  lcc::RecoveryPlan plan;
  plan.components.push_back(lcc::init_learned_component({0, 0}, components_for(f, 0, 0), 8, {}));
  plan.components[0].bias[0] = std::numeric_limits<double>::quiet_NaN();
  lcc::LccHyper hyper;
  hyper.epochs = 50;
  const auto trained = lcc::train_components(
      f.pruned, plan, f.ds.split(harness::Split::Recovery).subspan(0, 8), hyper);
  CHECK(trained.loss_curve.empty());  // aborted before completing an epoch
  CHECK(trained.components[0].beta == plan.components[0].beta);  // no partial step
  CHECK(std::isnan(trained.components[0].bias[0]));
  for (size_t i = 1; i < trained.components[0].bias.size(); ++i) {
    CHECK(trained.components[0].bias[i] == plan.components[0].bias[i]);
  }
}

}  // TEST_SUITE
