#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "setgen/models.hpp"

namespace setgen {

/// In-memory form of a model checkpoint file.
///
/// On disk: the 8 ASCII bytes "SETGENCK", a little-endian uint64 manifest
/// length H, H bytes of UTF-8 JSON manifest, then one blob of little-endian
/// float64 values. The manifest is
///   {"format": "setgen-checkpoint", "version": 1,
///    "tensors": {name: {"shape": [...], "offset": bytes, "length": count}},
///    "metadata": {...}}
/// with offsets relative to the first blob byte.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Array>> tensors;

  const Array& at(const std::string& name) const;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// `extra` is merged into the metadata (seed, iteration, loss weights...).
Checkpoint make_checkpoint(const VaeParams& p, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint make_checkpoint(const RegNetParams& p, const nlohmann::json& extra = nlohmann::json::object());

/// Rebuilds parameters; every architecture tensor must be present exactly
/// once with the expected shape.
VaeParams vae_from_checkpoint(const Checkpoint& ckpt);
RegNetParams regnet_from_checkpoint(const Checkpoint& ckpt);

/// Writes `bytes` to `path` through a temporary sibling and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace setgen
