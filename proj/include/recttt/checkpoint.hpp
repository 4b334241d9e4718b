#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "recttt/common.hpp"
#include "recttt/tensor.hpp"

namespace recttt {

// Binary checkpoint: magic "RCTT", a u32 format version, a JSON metadata
// blob, then named tensors as (name, rank, extents, raw little-endian f32
// payload). Round trips are bitwise; malformed files map onto distinct
// error kinds.

struct CheckpointError : IoError {
  enum class Kind { BadMagic, BadVersion, Truncated };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : IoError(msg), kind(k) {}
};

constexpr char kCheckpointMagic[4] = {'R', 'C', 'T', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string model_kind = "recttt";  // or "simsiam"
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  int epoch = 0;

  nlohmann::json to_json() const {
    return {{"model_kind", model_kind},
            {"config_hash", config_hash},
            {"seed", seed},
            {"epoch", epoch}};
  }

  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.model_kind = j.at("model_kind").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epoch = j.at("epoch").get<int>();
    return m;
  }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (is.gcount() != 4)
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const NamedTensors& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 4);
  detail::write_u32(f, kCheckpointVersion);
  const std::string meta_str = meta.to_json().dump();
  detail::write_u32(f, static_cast<std::uint32_t>(meta_str.size()));
  f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  detail::write_u32(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(f, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) detail::write_u32(f, static_cast<std::uint32_t>(e));
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  NamedTensors tensors;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);

  char magic[4] = {};
  f.read(magic, 4);
  if (f.gcount() != 4)
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint shorter than its magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::BadMagic, "not a checkpoint file: bad magic");

  const std::uint32_t version = detail::read_u32(f);
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::BadVersion,
                          "unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t meta_len = detail::read_u32(f);
  std::string meta_str(meta_len, '\0');
  f.read(meta_str.data(), meta_len);
  if (f.gcount() != static_cast<std::streamsize>(meta_len))
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint metadata truncated");
  nlohmann::json meta_json = nlohmann::json::parse(meta_str, nullptr, false);
  if (meta_json.is_discarded()) throw IoError("load_checkpoint: malformed metadata JSON");

  LoadedCheckpoint out;
  out.meta = CheckpointMeta::from_json(meta_json);
  const std::uint32_t count = detail::read_u32(f);
  out.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (f.gcount() != static_cast<std::streamsize>(name_len))
      throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint name truncated");
    const std::uint32_t rank = detail::read_u32(f);
    if (rank == 0 || rank > 8)
      throw IoError("load_checkpoint: implausible tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<int>(detail::read_u32(f));
    Tensor t = Tensor::uninit(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float)))
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "payload truncated for tensor '" + name + "'");
    out.tensors.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Collects (name, tensor) pairs from any module exposing visit().
template <class Module>
NamedTensors named_tensors(Module& m) {
  NamedTensors out;
  m.visit([&](const std::string& name, Param& p) { out.emplace_back(name, p.value); },
          [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

// Assigns loaded tensors into a module by name; every parameter must be
// present with a matching shape.
template <class Module>
void assign_named_tensors(Module& m, const NamedTensors& loaded) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : loaded) by_name[name] = &t;
  std::size_t assigned = 0;
  auto fetch = [&](const std::string& name) -> const Tensor* {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError("checkpoint/config mismatch: missing tensor '" + name + "'");
    ++assigned;
    return it->second;
  };
  m.visit(
      [&](const std::string& name, Param& p) {
        const Tensor* t = fetch(name);
        if (t->shape != p.value.shape)
          throw IoError("checkpoint/config mismatch: tensor '" + name + "' has shape " +
                        t->shape_str() + ", model expects " + p.value.shape_str());
        p.value = *t;
      },
      [&](const std::string& name, Tensor& dst) {
        const Tensor* t = fetch(name);
        if (t->shape != dst.shape)
          throw IoError("checkpoint/config mismatch: tensor '" + name + "' has shape " +
                        t->shape_str() + ", model expects " + dst.shape_str());
        dst = *t;
      });
  if (assigned != loaded.size())
    throw IoError("checkpoint/config mismatch: checkpoint carries " +
                  std::to_string(loaded.size()) + " tensors, model consumed " +
                  std::to_string(assigned));
}

}  // namespace recttt
