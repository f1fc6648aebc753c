#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "restorelcc/checkpoint.hpp"
#include "restorelcc/dataset.hpp"
#include "restorelcc/model.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;
using model::ModelConfig;
using model::ModelParams;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ffn = 16;
  c.max_seq_len = 8;
  c.seed = 3;
  return c;
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

std::vector<int> seeded_tokens(uint64_t seed, int len, int vocab) {
  Rng rng(seed);
  std::vector<int> t(size_t(len), 0);
  for (auto& x : t) x = rng.next_below(vocab);
  return t;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("zero bias slots do not change the forward pass") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const auto tokens = seeded_tokens(11, 7, cfg.vocab_size);
  const std::vector<std::vector<int>> batch{tokens};

  const auto base = model::forward(p, batch);
  ModelParams rezeroed = p;
  for (auto& lay : rezeroed.layers) {
    std::fill(lay.head_bias.begin(), lay.head_bias.end(), 0.0f);
    std::fill(lay.ffn_bias.begin(), lay.ffn_bias.end(), 0.0f);
  }
  const auto again = model::forward(rezeroed, batch);
  CHECK(base.logits[0] == again.logits[0]);

  const std::vector<float> zero(size_t(cfg.d_head), 0.0f);
  const auto injected = model::forward(model::inject_head_bias(p, 1, 0, zero), batch);
  CHECK(base.logits[0] == injected.logits[0]);
}

TEST_CASE("single token input yields one logit row") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const std::vector<std::vector<int>> batch{{3}};
  const auto out = model::forward(p, batch);
  CHECK(out.logits[0].size() == size_t(cfg.vocab_size));
}

TEST_CASE("last-token capture equals explicit final position") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const auto tokens = seeded_tokens(21, 7, cfg.vocab_size);
  const std::vector<std::vector<int>> batch{tokens};

  model::CaptureRequest last;
  const auto a = model::forward(p, batch, &last);
  model::CaptureRequest expl;
  expl.policy = model::PositionPolicy::Explicit;
  expl.positions = {6};
  const auto b = model::forward(p, batch, &expl);
  REQUIRE(a.trace.has_value());
  REQUIRE(b.trace.has_value());
  CHECK(a.trace->head_data == b.trace->head_data);
}

TEST_CASE("out of range tokens are rejected") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const std::vector<std::vector<int>> batch{{0, cfg.vocab_size}};
  CHECK_THROWS_AS((void)model::forward(p, batch), std::invalid_argument);
}

TEST_CASE("logit lens of the zero activation") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const std::vector<float> z(size_t(cfg.d_head), 0.0f);
  const auto lens = model::logit_lens(z, 0, 1, p);
  REQUIRE(lens.size() == size_t(cfg.vocab_size));
  // phi(0) = 0 under the zero-guarded RMS norm, and the tied head has no bias.
  for (float v : lens) CHECK(v == 0.0f);
  CHECK_THROWS_AS((void)model::logit_lens(z, cfg.n_layers, 0, p), std::out_of_range);
}

TEST_CASE("logit lens is exactly scale invariant under doubling") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  Rng rng(5);
  std::vector<float> z(size_t(cfg.d_head));
  for (auto& v : z) v = float(rng.next_normal());
  std::vector<float> z2 = z;
  for (auto& v : z2) v *= 2.0f;
  CHECK(model::logit_lens(z, 1, 1, p) == model::logit_lens(z2, 1, 1, p));
}

TEST_CASE("logit difference") {
  std::vector<float> uniform(8, 0.25f);
  CHECK(model::logit_difference(uniform, 2, 5) == 0.0);
  std::vector<float> logits(8, 0.0f);
  logits[1] = 2.0f;  // yes
  logits[2] = 0.5f;  // no
  CHECK(model::logit_difference(logits, 1, 2) == doctest::Approx(1.5));
  CHECK(model::logit_difference(logits, 1, 2) == -model::logit_difference(logits, 2, 1));
  CHECK_THROWS_AS((void)model::logit_difference(logits, 3, 3), std::invalid_argument);
}

TEST_CASE("injecting a bias then its negation restores the forward pass") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const auto tokens = seeded_tokens(31, 6, cfg.vocab_size);
  const std::vector<std::vector<int>> batch{tokens};
  const auto base = model::forward(p, batch);

  Rng rng(32);
  std::vector<float> c(size_t(cfg.d_head));
  for (auto& v : c) v = float(0.5 * rng.next_normal());
  std::vector<float> neg = c;
  for (auto& v : neg) v = -v;

  ModelParams p2 = model::inject_head_bias(p, 1, 1, c);
  p2 = model::inject_head_bias(p2, 1, 1, neg);
  const auto restored = model::forward(p2, batch);
  for (size_t i = 0; i < base.logits[0].size(); ++i) {
    CHECK(std::abs(double(base.logits[0][i]) - double(restored.logits[0][i])) <= 1e-12);
  }

  std::vector<float> wrong(size_t(cfg.d_head + 1), 0.0f);
  CHECK_THROWS_AS((void)model::inject_head_bias(p, 0, 0, wrong), std::invalid_argument);
}

TEST_CASE("slot injection and transient injection are bitwise identical") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const auto tokens = seeded_tokens(41, 8, cfg.vocab_size);
  const std::vector<std::vector<int>> batch{tokens};

  Rng rng(42);
  auto inj = model::Injections<float>::sized(cfg);
  ModelParams folded = p;
  for (auto [l, h] : {std::pair{0, 0}, std::pair{1, 1}}) {
    std::vector<float> c(size_t(cfg.d_head));
    for (auto& v : c) v = float(rng.next_normal());
    inj.head_const[size_t(l) * cfg.n_heads + h] = c;
    folded = model::inject_head_bias(folded, l, h, c);
  }
  const auto via_slots = model::forward(folded, batch);
  const auto via_injection = model::forward(p, batch, nullptr, &inj);
  CHECK(via_slots.logits[0] == via_injection.logits[0]);
}

TEST_CASE("causality: future tokens do not affect past logits") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  auto tokens = seeded_tokens(51, 8, cfg.vocab_size);
  const std::vector<std::vector<int>> batch{tokens};
  const auto base = model::forward(p, batch);
  auto mutated = tokens;
  mutated[6] = (mutated[6] + 1) % cfg.vocab_size;
  mutated[7] = (mutated[7] + 3) % cfg.vocab_size;
  const std::vector<std::vector<int>> batch2{mutated};
  const auto changed = model::forward(p, batch2);
  for (int t = 0; t < 6; ++t) {
    for (int v = 0; v < cfg.vocab_size; ++v) {
      CHECK(base.logits[0][size_t(t) * cfg.vocab_size + v] ==
            changed.logits[0][size_t(t) * cfg.vocab_size + v]);
    }
  }
}

TEST_CASE("analytic gradients match central finite differences on a micro model") {
  auto cfg = micro_config();
  cfg.seed = 1;
  auto params = model::widen(model::init_params(cfg));
  // exercise the bias-slot gradients away from zero too
  Rng brng(8);
  for (auto& lay : params.layers) {
    for (auto& v : lay.head_bias) v = 0.1 * brng.next_normal();
    for (auto& v : lay.ffn_bias) v = 0.1 * brng.next_normal();
  }
  const auto tokens = seeded_tokens(62, 8, cfg.vocab_size);
  const int count = int(tokens.size()) - 1;

  model::Workspace<double> ws;
  model::forward_sequence(params, tokens, ws);
  std::vector<double> dlogits;
  model::sequence_loss(ws, tokens, 1, &dlogits, 1.0 / count);
  auto grads = model::zeros_like(params);
  model::backward_sequence(params, tokens, ws, std::span<const double>(dlogits), grads, true);

  const double h = 1e-4;
  double worst = 0.0;
  model::for_each_tensor(params, [&](const std::string& name, const model::TensorShape&,
                                     std::vector<double>& data) {
    const std::vector<double>* gdata = nullptr;
    model::for_each_tensor(grads, [&](const std::string& gname, const model::TensorShape&,
                                      const std::vector<double>& g) {
      if (gname == name) gdata = &g;
    });
    REQUIRE(gdata != nullptr);
    for (size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      model::forward_sequence(params, tokens, ws);
      const double lp = model::sequence_loss<double>(ws, tokens, 1, nullptr, 0.0);
      data[i] = saved - h;
      model::forward_sequence(params, tokens, ws);
      const double lm = model::sequence_loss<double>(ws, tokens, 1, nullptr, 0.0);
      data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = (*gdata)[i];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  });
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip is byte identical") {
  const auto cfg = micro_config();
  ModelParams p = model::init_params(cfg);
  const auto dir = std::filesystem::temp_directory_path();
  const auto f1 = dir / "rlcc_test_ckpt_a.bin";
  const auto f2 = dir / "rlcc_test_ckpt_b.bin";
  model::save_checkpoint(p, f1);
  const ModelParams loaded = model::load_checkpoint(f1);
  CHECK(params_bytes(loaded) == params_bytes(p));
  model::save_checkpoint(loaded, f2);
  CHECK(file_bytes(f1) == file_bytes(f2));
  std::filesystem::remove(f1);
  std::filesystem::remove(f2);
}

TEST_CASE("training memorizes a single sample") {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 32;
  cfg.d_head = 16;
  cfg.d_ffn = 64;
  cfg.max_seq_len = 64;
  cfg.seed = 0;
  auto ds = harness::gen_synthetic_task(0, 200, 6, 10);
  ds.records.resize(1);
  ds.ranges = {{{0, 1}, {1, 1}, {1, 1}, {1, 1}}};

  model::TrainHyper hyper;
  hyper.learning_rate = 1e-2;
  hyper.epochs = 300;
  hyper.batch_size = 1;
  const auto result = model::train_dense(cfg, ds, hyper);
  CHECK(result.loss_curve.back() < 0.01);
}

TEST_CASE("training is deterministic given the seed") {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 32;
  cfg.d_head = 16;
  cfg.d_ffn = 64;
  cfg.max_seq_len = 64;
  cfg.seed = 9;
  auto ds = harness::gen_synthetic_task(1, 200, 6, 10);
  ds.ranges = {{{0, 40}, {40, 40}, {40, 40}, {40, 40}}};

  model::TrainHyper hyper;
  hyper.epochs = 2;
  const auto a = model::train_dense(cfg, ds, hyper);
  const auto b = model::train_dense(cfg, ds, hyper);
  CHECK(params_bytes(a.params) == params_bytes(b.params));
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("divergent training aborts with a diagnostic") {
  model::ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_model = 16;
  cfg.d_head = 16;
  cfg.d_ffn = 32;
  cfg.max_seq_len = 64;
  auto ds = harness::gen_synthetic_task(0, 200, 6, 10);
  ds.ranges = {{{0, 20}, {20, 20}, {20, 20}, {20, 20}}};
  model::TrainHyper hyper;
  hyper.learning_rate = 1e18;  // guaranteed blow-up
  hyper.epochs = 50;
  CHECK_THROWS_AS((void)model::train_dense(cfg, ds, hyper), std::runtime_error);
}

}  // TEST_SUITE
