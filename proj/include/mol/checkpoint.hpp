#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "mol/model.hpp"

namespace mol {

struct NamedTensor {
  std::string name;
  Tensord tensor;
};

// On disk: UTF-8 JSON header, one '\0' byte, then little-endian float64
// payloads in manifest order. The header holds "config", "tensors"
// ([{name, shape, offset}], offsets in bytes from the payload start) and an
// optional free-form "meta" object.
struct Checkpoint {
  nlohmann::json config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensord* find(const std::string& name) const;
  std::size_t payload_bytes() const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Model parameters in named_parameters() order.
Checkpoint to_checkpoint(const RecursiveEncoder& model);
RecursiveEncoder from_checkpoint(const Checkpoint& ckpt);

}  // namespace mol
