#include "setgen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace setgen {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'E', 'T', 'G', 'E', 'N', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t offset) {
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  return v;
}

Checkpoint from_params(const NamedTensors& params, const std::string& kind, nlohmann::json config,
                       const nlohmann::json& extra) {
  Checkpoint c;
  c.metadata = extra.is_object() ? extra : nlohmann::json::object();
  c.metadata["kind"] = kind;
  c.metadata["config"] = std::move(config);
  for (const auto& [name, t] : params) c.tensors.emplace_back(name, t.value());
  return c;
}

void require_kind(const Checkpoint& c, const std::string& kind) {
  const auto it = c.metadata.find("kind");
  if (it == c.metadata.end() || *it != kind)
    throw DataError("checkpoint: expected a " + kind + " checkpoint, got " +
                    (it == c.metadata.end() ? std::string("untagged") : it->dump()));
}

void assign(const NamedTensors& params, const Checkpoint& c) {
  std::set<std::string> expected;
  for (const auto& [name, t] : params) expected.insert(name);
  std::set<std::string> seen;
  for (const auto& [name, value] : c.tensors) {
    if (!expected.count(name)) throw DataError("checkpoint: unexpected tensor '" + name + "'");
    if (!seen.insert(name).second) throw DataError("checkpoint: duplicate tensor '" + name + "'");
  }
  for (auto [name, t] : params) {
    const Array& v = c.at(name);
    if (v.shape() != t.shape())
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_string(v.shape()) + ", expected " +
                      shape_string(t.shape()));
    t.mutable_value() = v;
  }
}

}  // namespace

const Array& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, v] : tensors)
    if (n == name) return v;
  throw DataError("checkpoint: missing tensor '" + name + "'");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "setgen-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["metadata"] = ckpt.metadata;
  nlohmann::json tensors = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, v] : ckpt.tensors) {
    if (tensors.contains(name)) throw DataError("checkpoint: duplicate tensor '" + name + "'");
    tensors[name] = {{"shape", v.shape()}, {"offset", offset}, {"length", v.size()}};
    offset += static_cast<std::uint64_t>(v.size()) * sizeof(double);
  }
  manifest["tensors"] = std::move(tensors);
  const std::string header = manifest.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  put<std::uint64_t>(bytes, header.size());
  bytes += header;
  for (const auto& [name, v] : ckpt.tensors)
    bytes.append(reinterpret_cast<const char*>(v.ptr()), static_cast<std::size_t>(v.size()) * sizeof(double));
  write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("checkpoint " + path.string() + ": bad magic");
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (16 + header_len > bytes.size()) throw DataError("checkpoint " + path.string() + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": malformed manifest: " + e.what());
  }
  if (manifest.value("format", "") != "setgen-checkpoint" || manifest.value("version", 0) != kCheckpointVersion)
    throw DataError("checkpoint " + path.string() + ": unsupported format/version");
  const std::size_t blob = 16 + header_len;
  Checkpoint c;
  c.metadata = manifest.at("metadata");
  // Restore write order from the offsets.
  std::map<std::uint64_t, std::string> by_offset;
  for (const auto& [name, entry] : manifest.at("tensors").items()) by_offset[entry.at("offset").get<std::uint64_t>()] = name;
  for (const auto& [offset, name] : by_offset) {
    const auto& entry = manifest["tensors"][name];
    const Shape shape = entry.at("shape").get<Shape>();
    const auto length = entry.at("length").get<Index>();
    if (shape_size(shape) != length) throw DataError("checkpoint: tensor '" + name + "' shape/length mismatch");
    const std::size_t nbytes = static_cast<std::size_t>(length) * sizeof(double);
    if (blob + offset + nbytes > bytes.size()) throw DataError("checkpoint: tensor '" + name + "' past end of file");
    Array v(shape);
    std::memcpy(v.ptr(), bytes.data() + blob + offset, nbytes);
    c.tensors.emplace_back(name, std::move(v));
  }
  return c;
}

Checkpoint make_checkpoint(const VaeParams& p, const nlohmann::json& extra) {
  return from_params(named_parameters(p), "vae", to_json(p.config), extra);
}

Checkpoint make_checkpoint(const RegNetParams& p, const nlohmann::json& extra) {
  return from_params(named_parameters(p), "regnet", to_json(p.config), extra);
}

VaeParams vae_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "vae");
  VaeParams p = init_vae(vae_config_from_json(ckpt.metadata.at("config")), 0);
  assign(named_parameters(p), ckpt);
  return p;
}

RegNetParams regnet_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "regnet");
  RegNetParams p = init_regnet(regnet_config_from_json(ckpt.metadata.at("config")), 0);
  assign(named_parameters(p), ckpt);
  return p;
}

}  // namespace setgen
