#include "restorelcc/lcc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "restorelcc/checkpoint.hpp"
#include "restorelcc/util.hpp"

namespace rlcc::lcc {

LearnedComponent init_learned_component(Site site, const lossdiff::SvdComponents& comp, int dim,
                                        ComponentFlags flags, BetaInit beta_init) {
  LearnedComponent lc;
  lc.site = site;
  lc.flags = flags;
  const int r = int(comp.factors.sigma.size());
  lc.directions = linalg::Matrix(dim, r);
  if (comp.factors.v.rows != dim) {
    throw std::invalid_argument("init_learned_component: direction length mismatch");
  }
  lc.directions = comp.factors.v;
  lc.beta.assign(size_t(r), 0.0);
  if (beta_init == BetaInit::Alpha) lc.beta = comp.alpha_bar;
  lc.bias.assign(size_t(dim), 0.0);
  return lc;
}

std::vector<double> compose_component(const LearnedComponent& lc) {
  const int d = lc.directions.rows;
  const int r = lc.directions.cols;
  std::vector<double> c(size_t(d), 0.0);
  if (lc.flags.use_directions) {
    for (int i = 0; i < r; ++i) {
      const double b = lc.beta[size_t(i)];
      if (b == 0.0) continue;
      for (int j = 0; j < d; ++j) c[size_t(j)] += b * lc.directions.at(j, i);
    }
  }
  if (lc.flags.use_bias) {
    for (int j = 0; j < d; ++j) c[size_t(j)] += lc.bias[size_t(j)];
  }
  return c;
}

namespace {

void validate_site(const Site& s, const model::ModelConfig& c) {
  if (s.layer < 0 || s.layer >= c.n_layers) {
    throw std::out_of_range("recovery plan: site layer out of range");
  }
  if (!s.is_ffn() && s.head >= c.n_heads) {
    throw std::out_of_range("recovery plan: site head out of range");
  }
}

template <typename S>
model::Injections<S> plan_injections_t(const RecoveryPlan& plan,
                                       const model::ModelConfig& config) {
  auto inj = model::Injections<S>::sized(config);
  for (const auto& lc : plan.components) {
    validate_site(lc.site, config);
    const auto c = compose_component(lc);
    std::vector<S> cv(c.size());
    for (size_t i = 0; i < c.size(); ++i) cv[i] = S(c[i]);
    if (lc.site.is_ffn()) {
      if (int(c.size()) != config.d_model) {
        throw std::invalid_argument("recovery plan: FFN component length mismatch");
      }
      inj.ffn_const[size_t(lc.site.layer)] = std::move(cv);
    } else {
      if (int(c.size()) != config.d_head) {
        throw std::invalid_argument("recovery plan: head component length mismatch");
      }
      inj.head_const[size_t(lc.site.layer) * config.n_heads + size_t(lc.site.head)] =
          std::move(cv);
    }
  }
  return inj;
}

// Flat trainable view: per component, beta (when directions are on) then bias
// (when the hedge is on). Directions are never part of this set.
size_t trainable_count(const RecoveryPlan& plan) {
  size_t n = 0;
  for (const auto& lc : plan.components) {
    if (lc.flags.use_directions) n += lc.beta.size();
    if (lc.flags.use_bias) n += lc.bias.size();
  }
  return n;
}

void gather_trainables(const RecoveryPlan& plan, std::vector<double>& flat) {
  flat.clear();
  for (const auto& lc : plan.components) {
    if (lc.flags.use_directions) flat.insert(flat.end(), lc.beta.begin(), lc.beta.end());
    if (lc.flags.use_bias) flat.insert(flat.end(), lc.bias.begin(), lc.bias.end());
  }
}

void scatter_trainables(RecoveryPlan& plan, std::span<const double> flat) {
  size_t off = 0;
  for (auto& lc : plan.components) {
    if (lc.flags.use_directions) {
      std::copy(flat.begin() + long(off), flat.begin() + long(off + lc.beta.size()),
                lc.beta.begin());
      off += lc.beta.size();
    }
    if (lc.flags.use_bias) {
      std::copy(flat.begin() + long(off), flat.begin() + long(off + lc.bias.size()),
                lc.bias.begin());
      off += lc.bias.size();
    }
  }
}

// Projects the per-site activation gradients dc into the trainable layout:
// d beta = V^T dc, d bias = dc.
template <typename S>
void site_grads_to_trainables(const RecoveryPlan& plan, const model::ParamsT<S>& grads,
                              const model::ModelConfig& config, std::vector<double>& flat) {
  flat.assign(trainable_count(plan), 0.0);
  size_t off = 0;
  for (const auto& lc : plan.components) {
    const int d = lc.directions.rows;
    std::vector<double> dc(size_t(d), 0.0);
    if (lc.site.is_ffn()) {
      const auto& g = grads.layers[size_t(lc.site.layer)].ffn_bias;
      for (int j = 0; j < d; ++j) dc[size_t(j)] = double(g[size_t(j)]);
    } else {
      const auto& g = grads.layers[size_t(lc.site.layer)].head_bias;
      const size_t base = size_t(lc.site.head) * size_t(config.d_head);
      for (int j = 0; j < d; ++j) dc[size_t(j)] = double(g[base + size_t(j)]);
    }
    if (lc.flags.use_directions) {
      for (int i = 0; i < lc.directions.cols; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += lc.directions.at(j, i) * dc[size_t(j)];
        flat[off + size_t(i)] = s;
      }
      off += lc.beta.size();
    }
    if (lc.flags.use_bias) {
      for (int j = 0; j < d; ++j) flat[off + size_t(j)] = dc[size_t(j)];
      off += lc.bias.size();
    }
  }
}

struct RecoverySequences {
  std::vector<std::vector<int>> seqs;
  std::vector<int> loss_starts;
};

RecoverySequences recovery_sequences(std::span<const harness::TaskRecord> recovery,
                                     LossTokens loss_tokens) {
  RecoverySequences out;
  for (const auto& rec : recovery) {
    std::vector<int> seq = rec.question;
    seq.insert(seq.end(), rec.response.begin(), rec.response.end());
    out.loss_starts.push_back(loss_tokens == LossTokens::All ? 1 : int(rec.question.size()));
    out.seqs.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

model::Injections<float> plan_injections(const RecoveryPlan& plan,
                                         const model::ModelConfig& config) {
  return plan_injections_t<float>(plan, config);
}

std::vector<std::vector<float>> recovery_forward(const model::ModelParams& pruned,
                                                 const RecoveryPlan& plan,
                                                 std::span<const std::vector<int>> batch) {
  const auto inj = plan_injections(plan, pruned.config);
  return model::forward(pruned, batch, nullptr, &inj).logits;
}

RecoveryPlan train_components(const model::ModelParams& pruned, const RecoveryPlan& plan,
                              std::span<const harness::TaskRecord> recovery,
                              const LccHyper& hyper) {
  if (recovery.empty()) throw std::invalid_argument("train_components: empty recovery set");
  RecoveryPlan trained = plan;
  trained.hyper = hyper;
  trained.loss_curve.clear();
  const size_t n_train = trainable_count(trained);
  if (n_train == 0 || hyper.epochs == 0) return trained;

  const auto data = recovery_sequences(recovery, hyper.loss_tokens);
  std::vector<int> order(data.seqs.size(), 0);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(hyper.seed * 0x9e3779b97f4a7c15ull + 0x6c6363ull);

  std::vector<double> flat;
  gather_trainables(trained, flat);
  model::AdamState adam(n_train, hyper.learning_rate, 0.9, 0.999, 1e-8);

  model::Workspace<float> ws;
  std::vector<float> dlogits;
  auto grads = model::zeros_like(pruned);
  RecoveryPlan snapshot = trained;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_tokens = 0;
    for (size_t b = 0; b < order.size(); b += size_t(hyper.batch_size)) {
      const size_t be = std::min(order.size(), b + size_t(hyper.batch_size));
      long batch_tokens = 0;
      for (size_t i = b; i < be; ++i) {
        const auto& seq = data.seqs[size_t(order[i])];
        batch_tokens += long(seq.size()) - data.loss_starts[size_t(order[i])];
      }
      if (batch_tokens <= 0) continue;

      const auto inj = plan_injections(trained, pruned.config);
      model::fill_zero(grads);
      for (size_t i = b; i < be; ++i) {
        const auto& seq = data.seqs[size_t(order[i])];
        const int loss_start = data.loss_starts[size_t(order[i])];
        model::forward_sequence(pruned, seq, ws, &inj);
        const double loss =
            model::sequence_loss(ws, seq, loss_start, &dlogits, 1.0 / double(batch_tokens));
        if (!std::isfinite(loss)) {
          // abort with the last epoch snapshot
          return snapshot;
        }
        epoch_loss += loss * double(long(seq.size()) - loss_start);
        epoch_tokens += long(seq.size()) - loss_start;
        model::backward_sequence(pruned, seq, ws, std::span<const float>(dlogits), grads,
                                 /*weight_grads=*/false);
      }
      std::vector<double> grad_flat;
      site_grads_to_trainables(trained, grads, pruned.config, grad_flat);
      adam.step(flat, grad_flat);
      scatter_trainables(trained, flat);
    }
    trained.loss_curve.push_back(epoch_tokens > 0 ? epoch_loss / double(epoch_tokens) : 0.0);
    snapshot = trained;
  }
  return trained;
}

model::ModelParams fold_components(const model::ModelParams& pruned, const RecoveryPlan& plan) {
  model::ModelParams out = pruned;
  for (const auto& lc : plan.components) {
    validate_site(lc.site, out.config);
    const auto c = compose_component(lc);
    std::vector<float> cf(c.size());
    for (size_t i = 0; i < c.size(); ++i) cf[i] = float(c[i]);
    if (lc.site.is_ffn()) {
      out = model::inject_ffn_bias(out, lc.site.layer, cf);
    } else {
      out = model::inject_head_bias(out, lc.site.layer, lc.site.head, cf);
    }
  }
  return out;
}

double gradient_check(const RecoveryPlan& plan, const model::ModelParams& pruned,
                      std::span<const std::vector<int>> micro_batch) {
  if (micro_batch.empty()) throw std::invalid_argument("gradient_check: empty batch");
  const auto wide = model::widen(pruned);
  RecoveryPlan work = plan;

  long total_tokens = 0;
  for (const auto& seq : micro_batch) total_tokens += long(seq.size()) - 1;

  auto loss_of = [&](const RecoveryPlan& pl) {
    const auto inj = plan_injections_t<double>(pl, wide.config);
    model::Workspace<double> ws;
    double total = 0.0;
    for (const auto& seq : micro_batch) {
      model::forward_sequence(wide, seq, ws, &inj);
      const double l = model::sequence_loss<double>(ws, seq, 1, nullptr, 0.0);
      total += l * double(long(seq.size()) - 1);
    }
    return total / double(total_tokens);
  };

  // analytic gradients
  std::vector<double> analytic;
  {
    const auto inj = plan_injections_t<double>(work, wide.config);
    auto grads = model::zeros_like(wide);
    model::Workspace<double> ws;
    std::vector<double> dlogits;
    for (const auto& seq : micro_batch) {
      model::forward_sequence(wide, seq, ws, &inj);
      model::sequence_loss(ws, seq, 1, &dlogits, 1.0 / double(total_tokens));
      model::backward_sequence(wide, seq, ws, std::span<const double>(dlogits), grads, false);
    }
    site_grads_to_trainables(work, grads, wide.config, analytic);
  }

  std::vector<double> flat;
  gather_trainables(work, flat);
  const double h = 1e-4;
  double worst = 0.0;
  for (size_t i = 0; i < flat.size(); ++i) {
    const double saved = flat[i];
    flat[i] = saved + h;
    scatter_trainables(work, flat);
    const double lp = loss_of(work);
    flat[i] = saved - h;
    scatter_trainables(work, flat);
    const double lm = loss_of(work);
    flat[i] = saved;
    scatter_trainables(work, flat);
    const double numeric = (lp - lm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - numeric) /
                       std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

void save_plan(const RecoveryPlan& plan, const std::filesystem::path& path) {
  io::TensorFile tf;
  nlohmann::json meta;
  meta["kind"] = "recovery_plan";
  meta["learning_rate"] = plan.hyper.learning_rate;
  meta["epochs"] = plan.hyper.epochs;
  meta["batch_size"] = plan.hyper.batch_size;
  meta["loss_tokens"] = plan.hyper.loss_tokens == LossTokens::All ? "all" : "response_only";
  meta["seed"] = plan.hyper.seed;
  meta["loss_curve"] = plan.loss_curve;
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& lc : plan.components) {
    sites.push_back({{"layer", lc.site.layer},
                     {"head", lc.site.head},
                     {"use_directions", lc.flags.use_directions},
                     {"use_bias", lc.flags.use_bias}});
  }
  meta["sites"] = sites;
  tf.meta_json = meta.dump();

  for (size_t i = 0; i < plan.components.size(); ++i) {
    const auto& lc = plan.components[i];
    const std::string pre = "site" + std::to_string(i) + ".";
    io::NamedTensor dir;
    dir.name = pre + "directions";
    dir.shape = {lc.directions.rows, lc.directions.cols};
    dir.data.assign(lc.directions.data.begin(), lc.directions.data.end());
    tf.tensors.push_back(std::move(dir));
    io::NamedTensor beta;
    beta.name = pre + "beta";
    beta.shape = {int(lc.beta.size())};
    beta.data.assign(lc.beta.begin(), lc.beta.end());
    tf.tensors.push_back(std::move(beta));
    io::NamedTensor bias;
    bias.name = pre + "bias";
    bias.shape = {int(lc.bias.size())};
    bias.data.assign(lc.bias.begin(), lc.bias.end());
    tf.tensors.push_back(std::move(bias));
  }
  io::save_tensor_file(tf, path);
}

RecoveryPlan load_plan(const std::filesystem::path& path) {
  const auto tf = io::load_tensor_file(path);
  const auto meta = nlohmann::json::parse(tf.meta_json);
  RecoveryPlan plan;
  plan.hyper.learning_rate = meta.at("learning_rate").get<double>();
  plan.hyper.epochs = meta.at("epochs").get<int>();
  plan.hyper.batch_size = meta.at("batch_size").get<int>();
  plan.hyper.loss_tokens = meta.at("loss_tokens").get<std::string>() == "all"
                               ? LossTokens::All
                               : LossTokens::ResponseOnly;
  plan.hyper.seed = meta.at("seed").get<uint64_t>();
  plan.loss_curve = meta.at("loss_curve").get<std::vector<double>>();

  size_t i = 0;
  for (const auto& s : meta.at("sites")) {
    LearnedComponent lc;
    lc.site.layer = s.at("layer").get<int>();
    lc.site.head = s.at("head").get<int>();
    lc.flags.use_directions = s.at("use_directions").get<bool>();
    lc.flags.use_bias = s.at("use_bias").get<bool>();
    const std::string pre = "site" + std::to_string(i) + ".";
    const auto* dir = tf.find(pre + "directions");
    const auto* beta = tf.find(pre + "beta");
    const auto* bias = tf.find(pre + "bias");
    if (!dir || !beta || !bias) throw std::runtime_error("load_plan: missing site tensors");
    lc.directions = linalg::Matrix(dir->shape.at(0), dir->shape.at(1));
    for (size_t k = 0; k < dir->data.size(); ++k) lc.directions.data[k] = double(dir->data[k]);
    lc.beta.assign(beta->data.begin(), beta->data.end());
    lc.bias.assign(bias->data.begin(), bias->data.end());
    plan.components.push_back(std::move(lc));
    ++i;
  }
  return plan;
}

}  // namespace rlcc::lcc
