#include "mol/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mol/config.hpp"

namespace mol {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

const Tensord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

std::size_t Checkpoint::payload_bytes() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.tensor.numel()) * sizeof(double);
  return n;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.tensor.numel()) * sizeof(double);
  }
  const json header = {{"config", ckpt.config}, {"tensors", manifest}, {"meta", ckpt.meta}};
  std::string out = header.dump();
  out.push_back('\0');
  std::size_t cursor = out.size();
  out.resize(cursor + offset);
  for (const auto& t : ckpt.tensors) {
    const std::size_t bytes = static_cast<std::size_t>(t.tensor.numel()) * sizeof(double);
    std::memcpy(out.data() + cursor, t.tensor.data().data(), bytes);
    cursor += bytes;
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto nul = bytes.find('\0');
  if (nul == std::string::npos) throw InputError("checkpoint: missing header terminator");
  json header;
  try {
    header = json::parse(bytes.substr(0, nul));
  } catch (const json::parse_error& e) {
    throw InputError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header.at("tensors").is_array()) {
    throw InputError("checkpoint: header lacks a tensor manifest");
  }
  Checkpoint ckpt;
  ckpt.config = header.value("config", json::object());
  ckpt.meta = header.value("meta", json::object());
  const std::size_t base = nul + 1;
  const std::size_t payload = bytes.size() - base;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t bytes_needed = static_cast<std::size_t>(shape_numel(shape)) * sizeof(double);
    if (offset + bytes_needed > payload) {
      throw InputError("checkpoint: tensor '" + name + "' extends past the end of the payload");
    }
    Tensord t(shape);
    std::memcpy(t.data().data(), bytes.data() + base + offset, bytes_needed);
    ckpt.tensors.push_back({name, std::move(t)});
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("checkpoint: cannot write " + tmp);
    const std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("checkpoint: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

Checkpoint to_checkpoint(const RecursiveEncoder& model) {
  Checkpoint ckpt;
  ckpt.config = to_json(model.config());
  for (const auto& p : model.named_parameters()) ckpt.tensors.push_back({p.name, p.var.value()});
  json merge = json::object();
  for (Index g : model.mol_groups()) {
    if (const auto& w = model.merge_weights(g)) {
      merge[std::to_string(g)] = std::vector<double>(w->data().data(), w->data().data() + w->numel());
    }
  }
  if (!merge.empty()) ckpt.meta["merge_weights"] = merge;
  return ckpt;
}

RecursiveEncoder from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = model_config_from_json(ckpt.config, "checkpoint.config");
  RecursiveEncoder model(cfg, 0);
  std::map<std::string, Tensord> values;
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("optim.", 0) == 0) continue;
    values.emplace(t.name, t.tensor);
  }
  model.assign(values);
  if (ckpt.meta.is_object() && ckpt.meta.contains("merge_weights")) {
    for (const auto& [key, w] : ckpt.meta.at("merge_weights").items()) {
      const auto v = w.get<std::vector<double>>();
      model.set_merge_weights(std::stol(key), Tensord::from_vector(v));
    }
  }
  return model;
}

}  // namespace mol
