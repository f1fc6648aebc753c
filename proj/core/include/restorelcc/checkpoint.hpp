#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "restorelcc/model.hpp"

namespace rlcc::io {

// Generic tensor container: 8-byte magic, u64 little-endian header length, a
// JSON header (meta object plus a tensor manifest with name/shape/offset),
// then little-endian 32-bit floats in manifest order. Round-trips are
// byte-identical.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct TensorFile {
  std::string meta_json;  // canonical JSON text (object)
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_tensor_file(const TensorFile& tf, const std::filesystem::path& path);
TensorFile load_tensor_file(const std::filesystem::path& path);

}  // namespace rlcc::io

namespace rlcc::model {

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

void save_trace(const ActivationTrace& tr, const std::filesystem::path& path);
ActivationTrace load_trace(const std::filesystem::path& path);

}  // namespace rlcc::model
