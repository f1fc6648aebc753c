#include "restorelcc/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "restorelcc/util.hpp"

namespace rlcc::pruning {

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::Unstructured: return "unstructured";
    case Scheme::SemiStructured: return "semi_structured";
    default: return "structured_heads";
  }
}

const char* targets_name(Targets t) {
  switch (t) {
    case Targets::All: return "all";
    case Targets::Attention: return "attention";
    case Targets::AttentionQkv: return "attention_qkv";
    default: return "ffn";
  }
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "unstructured") return Scheme::Unstructured;
  if (name == "semi_structured") return Scheme::SemiStructured;
  if (name == "structured_heads") return Scheme::StructuredHeads;
  throw std::invalid_argument("unknown pruning scheme: " + name);
}

Targets targets_from_name(const std::string& name) {
  if (name == "all") return Targets::All;
  if (name == "attention") return Targets::Attention;
  if (name == "attention_qkv") return Targets::AttentionQkv;
  if (name == "ffn") return Targets::Ffn;
  throw std::invalid_argument("unknown pruning targets: " + name);
}

const MaskEntry* PruneMask::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

namespace {

struct WeightRef {
  std::string name;
  int layer;
  int rows, cols;
  float* data;
  bool is_attention;
  bool is_qkv;
};

std::vector<WeightRef> prunable_matrices(model::ModelParams& p) {
  std::vector<WeightRef> out;
  const int d = p.config.d_model;
  const int f = p.config.d_ffn;
  for (int l = 0; l < p.config.n_layers; ++l) {
    auto& lay = p.layers[size_t(l)];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.push_back({pre + "wq", l, d, d, lay.wq.data(), true, true});
    out.push_back({pre + "wk", l, d, d, lay.wk.data(), true, true});
    out.push_back({pre + "wv", l, d, d, lay.wv.data(), true, true});
    out.push_back({pre + "wo", l, d, d, lay.wo.data(), true, false});
    out.push_back({pre + "w1", l, f, d, lay.w1.data(), false, false});
    out.push_back({pre + "w2", l, d, f, lay.w2.data(), false, false});
  }
  return out;
}

bool targeted(const WeightRef& w, Targets t) {
  switch (t) {
    case Targets::All: return true;
    case Targets::Attention: return w.is_attention;
    case Targets::AttentionQkv: return w.is_qkv;
    default: return !w.is_attention;
  }
}

MaskEntry all_ones_entry(const WeightRef& w) {
  MaskEntry e;
  e.name = w.name;
  e.rows = w.rows;
  e.cols = w.cols;
  e.keep.assign(size_t(w.rows) * size_t(w.cols), 1);
  return e;
}

}  // namespace

CalibNorms collect_calibration_norms(const model::ModelParams& p,
                                     std::span<const std::vector<int>> sequences) {
  const auto& c = p.config;
  CalibNorms calib;
  std::map<std::string, std::vector<double>> sumsq;
  long positions = 0;

  model::Workspace<float> ws;
  for (const auto& seq : sequences) {
    model::forward_sequence(p, seq, ws);
    const int T = ws.T;
    positions += T;
    for (int l = 0; l < c.n_layers; ++l) {
      const auto& lw = ws.lw[size_t(l)];
      const std::string pre = "layer" + std::to_string(l) + ".";
      auto accumulate = [&](const std::string& name, const std::vector<float>& acts, int dim) {
        auto& acc = sumsq[name];
        acc.resize(size_t(dim), 0.0);
        for (int t = 0; t < T; ++t) {
          const float* row = acts.data() + size_t(t) * dim;
          for (int i = 0; i < dim; ++i) acc[size_t(i)] += double(row[i]) * double(row[i]);
        }
      };
      accumulate(pre + "wq", lw.a, c.d_model);
      accumulate(pre + "wk", lw.a, c.d_model);
      accumulate(pre + "wv", lw.a, c.d_model);
      accumulate(pre + "wo", lw.z, c.d_model);
      accumulate(pre + "w1", lw.bn, c.d_model);
      accumulate(pre + "w2", lw.f2, c.d_ffn);
    }
  }
  if (positions == 0) throw std::invalid_argument("calibration: empty sequence set");
  for (auto& [name, acc] : sumsq) {
    std::vector<double> norms(acc.size(), 0.0);
    for (size_t i = 0; i < acc.size(); ++i) norms[i] = std::sqrt(acc[i] / double(positions));
    calib.norms[name] = std::move(norms);
  }
  return calib;
}

linalg::Matrix score_weights_wanda(const linalg::Matrix& w, std::span<const double> norms) {
  if (int(norms.size()) != w.cols) {
    throw std::invalid_argument("score_weights_wanda: norms length must equal input dim");
  }
  for (double n : norms) {
    if (!(n >= 0.0)) throw std::invalid_argument("score_weights_wanda: norms must be >= 0");
  }
  linalg::Matrix s(w.rows, w.cols);
  for (int r = 0; r < w.rows; ++r) {
    for (int c = 0; c < w.cols; ++c) {
      s.at(r, c) = std::abs(w.at(r, c)) * norms[size_t(c)];
    }
  }
  return s;
}

Scores compute_wanda_scores(const model::ModelParams& p, const CalibNorms& calib,
                            Targets targets) {
  Scores scores;
  auto& mp = const_cast<model::ModelParams&>(p);
  for (const auto& w : prunable_matrices(mp)) {
    if (!targeted(w, targets)) continue;
    const auto it = calib.norms.find(w.name);
    if (it == calib.norms.end()) {
      throw std::invalid_argument("compute_wanda_scores: missing calibration for " + w.name);
    }
    linalg::Matrix wm(w.rows, w.cols);
    for (size_t i = 0; i < wm.data.size(); ++i) wm.data[i] = double(w.data[i]);
    scores.by_matrix[w.name] = score_weights_wanda(wm, it->second);
  }
  return scores;
}

PruneResult prune_unstructured(const model::ModelParams& p, double ratio, const Scores& scores,
                               Targets targets) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("prune_unstructured: ratio must be in [0, 1)");
  }
  PruneResult out{p, {}};
  out.mask.scheme = Scheme::Unstructured;
  out.mask.targets = targets;
  for (const auto& w : prunable_matrices(out.params)) {
    MaskEntry entry = all_ones_entry(w);
    if (targeted(w, targets)) {
      const auto it = scores.by_matrix.find(w.name);
      if (it == scores.by_matrix.end()) {
        throw std::invalid_argument("prune_unstructured: missing scores for " + w.name);
      }
      const auto& s = it->second;
      if (s.rows != w.rows || s.cols != w.cols) {
        throw std::invalid_argument("prune_unstructured: score shape mismatch for " + w.name);
      }
      const size_t count = s.data.size();
      const size_t drop = size_t(std::floor(ratio * double(count)));
      std::vector<size_t> order(count, 0);
      std::iota(order.begin(), order.end(), size_t(0));
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (s.data[a] != s.data[b]) return s.data[a] < s.data[b];
        return a < b;  // ties: lowest flattened index pruned first
      });
      for (size_t k = 0; k < drop; ++k) {
        w.data[order[k]] = 0.0f;
        entry.keep[order[k]] = 0;
      }
    }
    out.mask.entries.push_back(std::move(entry));
  }
  return out;
}

PruneResult prune_semi_structured(const model::ModelParams& p, int n, int m,
                                  const Scores& scores, Targets targets) {
  if (!(n > 0 && n < m)) {
    throw std::invalid_argument("prune_semi_structured: need 0 < n < m");
  }
  PruneResult out{p, {}};
  out.mask.scheme = Scheme::SemiStructured;
  out.mask.n = n;
  out.mask.m = m;
  out.mask.targets = targets;
  for (const auto& w : prunable_matrices(out.params)) {
    MaskEntry entry = all_ones_entry(w);
    if (targeted(w, targets)) {
      if (w.cols % m != 0) {
        throw std::invalid_argument(
            "prune_semi_structured: input dimension " + std::to_string(w.cols) + " of " +
            w.name + " is not divisible by m=" + std::to_string(m) + "; pad by " +
            std::to_string(m - (w.cols % m)) + " inputs or change the pattern");
      }
      const auto it = scores.by_matrix.find(w.name);
      if (it == scores.by_matrix.end()) {
        throw std::invalid_argument("prune_semi_structured: missing scores for " + w.name);
      }
      const auto& s = it->second;
      std::vector<int> idx(size_t(m), 0);
      for (int r = 0; r < w.rows; ++r) {
        for (int g = 0; g < w.cols; g += m) {
          std::iota(idx.begin(), idx.end(), 0);
          std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            const double sa = s.at(r, g + a), sb = s.at(r, g + b);
            if (sa != sb) return sa > sb;
            return a < b;  // ties: lower index survives
          });
          for (int k = n; k < m; ++k) {
            const size_t flat = size_t(r) * w.cols + size_t(g + idx[size_t(k)]);
            w.data[flat] = 0.0f;
            entry.keep[flat] = 0;
          }
        }
      }
    }
    out.mask.entries.push_back(std::move(entry));
  }
  return out;
}

std::map<std::pair<int, int>, double> default_head_scores(const model::ModelParams& p,
                                                          const Scores& scores) {
  const auto& c = p.config;
  std::map<std::pair<int, int>, double> out;
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (int h = 0; h < c.n_heads; ++h) {
      double total = 0.0;
      for (const char* mat : {"wq", "wk", "wv"}) {
        const auto it = scores.by_matrix.find(pre + mat);
        if (it == scores.by_matrix.end()) {
          throw std::invalid_argument("default_head_scores: missing scores for " + pre + mat);
        }
        // head rows of the projection
        for (int r = h * c.d_head; r < (h + 1) * c.d_head; ++r) {
          for (int col = 0; col < it->second.cols; ++col) total += it->second.at(r, col);
        }
      }
      const auto it = scores.by_matrix.find(pre + "wo");
      if (it == scores.by_matrix.end()) {
        throw std::invalid_argument("default_head_scores: missing scores for " + pre + "wo");
      }
      // head columns of the output projection
      for (int r = 0; r < it->second.rows; ++r) {
        for (int col = h * c.d_head; col < (h + 1) * c.d_head; ++col) {
          total += it->second.at(r, col);
        }
      }
      out[{l, h}] = total;
    }
  }
  return out;
}

PruneResult prune_structured_heads(const model::ModelParams& p, double ratio,
                                   const std::map<std::pair<int, int>, double>& head_scores) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("prune_structured_heads: ratio must be in [0, 1)");
  }
  const auto& c = p.config;
  const int total_heads = c.n_layers * c.n_heads;
  const int drop = int(std::floor(ratio * double(total_heads)));

  std::vector<std::pair<int, int>> order;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) order.emplace_back(l, h);
  }
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    const double sa = head_scores.at(a), sb = head_scores.at(b);
    if (sa != sb) return sa < sb;
    return a < b;
  });

  std::vector<int> removed_per_layer(size_t(c.n_layers), 0);
  std::set<std::pair<int, int>> removed;
  for (int k = 0; k < drop; ++k) {
    removed.insert(order[size_t(k)]);
    ++removed_per_layer[size_t(order[size_t(k)].first)];
  }
  for (int l = 0; l < c.n_layers; ++l) {
    if (removed_per_layer[size_t(l)] >= c.n_heads) {
      throw std::invalid_argument("prune_structured_heads: would remove every head of layer " +
                                  std::to_string(l));
    }
  }

  PruneResult out{p, {}};
  out.mask.scheme = Scheme::StructuredHeads;
  out.mask.targets = Targets::Attention;
  for (const auto& w : prunable_matrices(out.params)) {
    MaskEntry entry = all_ones_entry(w);
    if (w.is_attention) {
      const int l = w.layer;
      for (int h = 0; h < c.n_heads; ++h) {
        if (!removed.count({l, h})) continue;
        if (w.is_qkv) {
          for (int r = h * c.d_head; r < (h + 1) * c.d_head; ++r) {
            for (int col = 0; col < w.cols; ++col) {
              const size_t flat = size_t(r) * w.cols + size_t(col);
              w.data[flat] = 0.0f;
              entry.keep[flat] = 0;
            }
          }
        } else {  // wo: zero the head's column slice
          for (int r = 0; r < w.rows; ++r) {
            for (int col = h * c.d_head; col < (h + 1) * c.d_head; ++col) {
              const size_t flat = size_t(r) * w.cols + size_t(col);
              w.data[flat] = 0.0f;
              entry.keep[flat] = 0;
            }
          }
        }
      }
    }
    out.mask.entries.push_back(std::move(entry));
  }
  return out;
}

SparsityReport sparsity_report(const model::ModelParams& p, const PruneMask& mask,
                               const std::set<std::pair<int, int>>& compensated_heads,
                               const std::set<int>& compensated_ffn_layers) {
  if (!check_mask_faithfulness(p, mask)) {
    throw std::invalid_argument("sparsity_report: mask inconsistent with params");
  }
  const auto& c = p.config;
  SparsityReport rep;
  long pruned = 0, total = 0;
  for (const auto& e : mask.entries) {
    long zeros = 0;
    for (uint8_t k : e.keep) zeros += (k == 0);
    pruned += zeros;
    total += long(e.keep.size());
    rep.per_matrix[e.name] = double(zeros) / double(e.keep.size());
  }
  rep.global_sparsity = total > 0 ? double(pruned) / double(total) : 0.0;

  rep.overhead_per_layer.assign(size_t(c.n_layers), 0.0);
  const double d_l = double(c.d_model);
  for (int l = 0; l < c.n_layers; ++l) {
    int n_comp = 0;
    for (int h = 0; h < c.n_heads; ++h) {
      if (compensated_heads.count({l, h})) ++n_comp;
    }
    rep.overhead_per_layer[size_t(l)] =
        (double(n_comp) * double(c.d_head) * 2.0) / (4.0 * d_l * d_l);
    rep.added_parameters += long(n_comp) * c.d_head;
    if (compensated_ffn_layers.count(l)) rep.added_parameters += c.d_model;
  }
  rep.overhead_max = 0.0;
  for (double v : rep.overhead_per_layer) rep.overhead_max = std::max(rep.overhead_max, v);
  return rep;
}

bool check_mask_faithfulness(const model::ModelParams& p, const PruneMask& mask) {
  auto& mp = const_cast<model::ModelParams&>(p);
  for (const auto& w : prunable_matrices(mp)) {
    const MaskEntry* e = mask.find(w.name);
    if (!e) continue;
    if (e->rows != w.rows || e->cols != w.cols) return false;
    const size_t count = size_t(w.rows) * size_t(w.cols);
    for (size_t i = 0; i < count; ++i) {
      if (e->keep[i] == 0 && w.data[i] != 0.0f) return false;
    }
  }
  return true;
}

void save_mask(const PruneMask& mask, const std::filesystem::path& path) {
  nlohmann::json header;
  header["scheme"] = scheme_name(mask.scheme);
  header["n"] = mask.n;
  header["m"] = mask.m;
  header["targets"] = targets_name(mask.targets);
  nlohmann::json entries = nlohmann::json::array();
  uint64_t bit_offset = 0;
  for (const auto& e : mask.entries) {
    entries.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols},
                       {"bit_offset", bit_offset}});
    bit_offset += uint64_t(e.keep.size());
  }
  header["entries"] = entries;
  const std::string text = header.dump();

  std::vector<uint8_t> bits((bit_offset + 7) / 8, 0);
  uint64_t pos = 0;
  for (const auto& e : mask.entries) {
    for (uint8_t k : e.keep) {
      if (k) bits[pos / 8] |= uint8_t(1u << (pos % 8));
      ++pos;
    }
  }

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_mask: cannot open " + tmp);
    const char magic[8] = {'R', 'L', 'C', 'C', 'M', 'K', '0', '1'};
    out.write(magic, sizeof(magic));
    const uint64_t hlen = text.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(text.data(), std::streamsize(text.size()));
    out.write(reinterpret_cast<const char*>(bits.data()), std::streamsize(bits.size()));
    if (!out) throw std::runtime_error("save_mask: write failed");
  }
  std::filesystem::rename(tmp, path);
}

PruneMask load_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_mask: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, "RLCCMK01", 8) != 0) {
    throw std::runtime_error("load_mask: bad magic");
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string text(hlen, '\0');
  in.read(text.data(), std::streamsize(hlen));
  if (!in) throw std::runtime_error("load_mask: truncated header");
  const auto header = nlohmann::json::parse(text);

  PruneMask mask;
  mask.scheme = scheme_from_name(header.at("scheme").get<std::string>());
  mask.n = header.at("n").get<int>();
  mask.m = header.at("m").get<int>();
  mask.targets = targets_from_name(header.at("targets").get<std::string>());
  uint64_t total_bits = 0;
  for (const auto& e : header.at("entries")) {
    total_bits += uint64_t(e.at("rows").get<int>()) * uint64_t(e.at("cols").get<int>());
  }
  std::vector<uint8_t> bits((total_bits + 7) / 8, 0);
  in.read(reinterpret_cast<char*>(bits.data()), std::streamsize(bits.size()));
  if (!in) throw std::runtime_error("load_mask: truncated payload");

  for (const auto& e : header.at("entries")) {
    MaskEntry entry;
    entry.name = e.at("name").get<std::string>();
    entry.rows = e.at("rows").get<int>();
    entry.cols = e.at("cols").get<int>();
    uint64_t pos = e.at("bit_offset").get<uint64_t>();
    entry.keep.resize(size_t(entry.rows) * size_t(entry.cols));
    for (auto& k : entry.keep) {
      k = (bits[pos / 8] >> (pos % 8)) & 1u;
      ++pos;
    }
    mask.entries.push_back(std::move(entry));
  }
  return mask;
}

}  // namespace rlcc::pruning
