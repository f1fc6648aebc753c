#include "restorelcc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace rlcc::io {

namespace {

constexpr char kMagic[8] = {'R', 'L', 'C', 'C', 'T', 'F', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "tensor files assume a little-endian host");

void write_all(std::ofstream& out, const void* data, size_t n) {
  out.write(static_cast<const char*>(data), std::streamsize(n));
  if (!out) throw std::runtime_error("tensor file: write failed");
}

}  // namespace

const NamedTensor* TensorFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_tensor_file(const TensorFile& tf, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = nlohmann::json::parse(tf.meta_json.empty() ? "{}" : tf.meta_json);
  nlohmann::json manifest = nlohmann::json::array();
  size_t offset = 0;
  for (const auto& t : tf.tensors) {
    size_t numel = 1;
    for (int d : t.shape) numel *= size_t(d);
    if (numel != t.data.size()) {
      throw std::invalid_argument("tensor file: shape/data mismatch for " + t.name);
    }
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += numel;
  }
  header["tensors"] = manifest;
  const std::string header_text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("tensor file: cannot open " + tmp);
    write_all(out, kMagic, sizeof(kMagic));
    const uint64_t hlen = header_text.size();
    write_all(out, &hlen, sizeof(hlen));
    write_all(out, header_text.data(), header_text.size());
    for (const auto& t : tf.tensors) {
      write_all(out, t.data.data(), t.data.size() * sizeof(float));
    }
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("tensor file: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("tensor file: bad magic in " + path.string());
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw std::runtime_error("tensor file: truncated header length");
  std::string header_text(hlen, '\0');
  in.read(header_text.data(), std::streamsize(hlen));
  if (!in) throw std::runtime_error("tensor file: truncated header");
  const auto header = nlohmann::json::parse(header_text);

  TensorFile tf;
  tf.meta_json = header.at("meta").dump();
  size_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<int>>();
    const size_t offset = entry.at("offset").get<size_t>();
    if (offset != expected_offset) {
      throw std::runtime_error("tensor file: non-contiguous manifest in " + path.string());
    }
    size_t numel = 1;
    for (int d : t.shape) numel *= size_t(d);
    t.data.resize(numel);
    in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(numel * sizeof(float)));
    if (!in) throw std::runtime_error("tensor file: truncated payload in " + path.string());
    expected_offset += numel;
    tf.tensors.push_back(std::move(t));
  }
  return tf;
}

}  // namespace rlcc::io

namespace rlcc::model {

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"vocab_size", c.vocab_size}, {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
      {"d_model", c.d_model},       {"d_head", c.d_head},           {"d_ffn", c.d_ffn},
      {"max_seq_len", c.max_seq_len}, {"seed", c.seed},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  io::TensorFile tf;
  nlohmann::json meta;
  meta["kind"] = "checkpoint";
  meta["config"] = config_to_json(p.config);
  tf.meta_json = meta.dump();
  for_each_tensor(p, [&](const std::string& name, const TensorShape& shape,
                         const std::vector<float>& data) {
    tf.tensors.push_back({name, shape.dims, data});
  });
  io::save_tensor_file(tf, path);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  const auto tf = io::load_tensor_file(path);
  const auto meta = nlohmann::json::parse(tf.meta_json);
  ModelParams p = init_params(config_from_json(meta.at("config")));
  size_t idx = 0;
  for_each_tensor(p, [&](const std::string& name, const TensorShape& shape,
                         std::vector<float>& data) {
    if (idx >= tf.tensors.size() || tf.tensors[idx].name != name) {
      throw std::runtime_error("checkpoint: manifest mismatch at " + name);
    }
    if (tf.tensors[idx].data.size() != shape.numel()) {
      throw std::runtime_error("checkpoint: shape mismatch at " + name);
    }
    data = tf.tensors[idx].data;
    ++idx;
  });
  if (idx != tf.tensors.size()) {
    throw std::runtime_error("checkpoint: unexpected extra tensors");
  }
  return p;
}

void save_trace(const ActivationTrace& tr, const std::filesystem::path& path) {
  io::TensorFile tf;
  nlohmann::json meta;
  meta["kind"] = "trace";
  meta["n_layers"] = tr.n_layers;
  meta["n_heads"] = tr.n_heads;
  meta["d_head"] = tr.d_head;
  meta["d_model"] = tr.d_model;
  meta["n_samples"] = tr.n_samples;
  meta["policy"] = tr.policy;
  meta["sample_ids"] = tr.sample_ids;
  nlohmann::json heads = nlohmann::json::array();
  for (auto [l, h] : tr.heads) heads.push_back({l, h});
  meta["heads"] = heads;
  tf.meta_json = meta.dump();

  for (size_t i = 0; i < tr.heads.size(); ++i) {
    const auto [l, h] = tr.heads[i];
    io::NamedTensor t;
    t.name = "l" + std::to_string(l) + ".h" + std::to_string(h);
    t.shape = {tr.n_samples, tr.d_head};
    t.data.assign(tr.head_data.begin() + long(i * size_t(tr.n_samples) * size_t(tr.d_head)),
                  tr.head_data.begin() + long((i + 1) * size_t(tr.n_samples) * size_t(tr.d_head)));
    tf.tensors.push_back(std::move(t));
  }
  if (!tr.ffn_data.empty()) {
    for (int l = 0; l < tr.n_layers; ++l) {
      io::NamedTensor t;
      t.name = "l" + std::to_string(l) + ".ffn";
      t.shape = {tr.n_samples, tr.d_model};
      const size_t stride = size_t(tr.n_samples) * size_t(tr.d_model);
      t.data.assign(tr.ffn_data.begin() + long(size_t(l) * stride),
                    tr.ffn_data.begin() + long(size_t(l + 1) * stride));
      tf.tensors.push_back(std::move(t));
    }
  }
  io::save_tensor_file(tf, path);
}

ActivationTrace load_trace(const std::filesystem::path& path) {
  const auto tf = io::load_tensor_file(path);
  const auto meta = nlohmann::json::parse(tf.meta_json);
  ActivationTrace tr;
  tr.n_layers = meta.at("n_layers").get<int>();
  tr.n_heads = meta.at("n_heads").get<int>();
  tr.d_head = meta.at("d_head").get<int>();
  tr.d_model = meta.at("d_model").get<int>();
  tr.n_samples = meta.at("n_samples").get<int>();
  tr.policy = meta.at("policy").get<std::string>();
  tr.sample_ids = meta.at("sample_ids").get<std::vector<int>>();
  for (const auto& pair : meta.at("heads")) {
    tr.heads.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
  }
  tr.head_data.reserve(tr.heads.size() * size_t(tr.n_samples) * size_t(tr.d_head));
  for (const auto& [l, h] : tr.heads) {
    const auto* t = tf.find("l" + std::to_string(l) + ".h" + std::to_string(h));
    if (!t) throw std::runtime_error("trace: missing head tensor");
    tr.head_data.insert(tr.head_data.end(), t->data.begin(), t->data.end());
  }
  for (int l = 0; l < tr.n_layers; ++l) {
    const auto* t = tf.find("l" + std::to_string(l) + ".ffn");
    if (!t) {
      if (l == 0) break;
      throw std::runtime_error("trace: partial FFN capture");
    }
    tr.ffn_data.insert(tr.ffn_data.end(), t->data.begin(), t->data.end());
  }
  return tr;
}

}  // namespace rlcc::model
