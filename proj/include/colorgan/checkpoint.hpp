#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7    magic "CLRGANCK"
//   bytes 8..11   uint32 format version (1)
//   bytes 12..15  uint32 reserved (0)
//   bytes 16..23  uint64 manifest length in bytes
//   manifest      UTF-8 JSON:
//                   { "format": "colorgan-checkpoint", "version": 1,
//                     "meta": {...},
//                     "entries": [ { "name", "shape", "dtype": "float32",
//                                    "offset", "count" }, ... ] }
//   payload       raw float32 arrays, concatenated in entry order; "offset"
//                 is the byte offset from the start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colorgan/params.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

using json = nlohmann::json;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  json meta = json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  void add(std::string name, Shape shape, std::vector<float> values) {
    entries.push_back({std::move(name), std::move(shape), std::move(values)});
  }
};

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'R', 'G', 'A', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("truncated checkpoint header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void write_floats_le(std::ostream& os, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (float f : v) write_le(os, std::bit_cast<std::uint32_t>(f));
  }
}

inline void read_floats_le(std::istream& is, std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4)))
      throw CheckpointError("truncated checkpoint payload");
  } else {
    for (auto& f : v) f = std::bit_cast<float>(read_le<std::uint32_t>(is));
  }
}

}  // namespace detail

inline json checkpoint_manifest(const Checkpoint& ck) {
  json m;
  m["format"] = "colorgan-checkpoint";
  m["version"] = kCheckpointVersion;
  m["meta"] = ck.meta;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ck.entries) {
    if (shape_numel(e.shape) != e.values.size())
      throw CheckpointError("entry " + e.name + " has inconsistent shape");
    entries.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", "float32"},
                       {"offset", offset},
                       {"count", e.values.size()}});
    offset += 4 * e.values.size();
  }
  m["entries"] = std::move(entries);
  return m;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const std::string manifest = checkpoint_manifest(ck).dump();
  os.write(kCheckpointMagic, 8);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, 0);
  detail::write_le<std::uint64_t>(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& e : ck.entries) detail::write_floats_le(os, e.values);
}

/// Writes to `<path>.tmp` and renames, so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    write_checkpoint(os, ck);
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {
inline json read_manifest_from(std::istream& is, const std::string& source) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(source + ": not a checkpoint file");
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version));
  read_le<std::uint32_t>(is);
  const auto len = read_le<std::uint64_t>(is);
  if (len > (std::uint64_t(1) << 32)) throw CheckpointError(source + ": implausible manifest length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError(source + ": truncated manifest");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(source + ": malformed manifest: " + e.what());
  }
}
}  // namespace detail

inline json read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return detail::read_manifest_from(is, path.string());
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& source = "checkpoint") {
  const json m = detail::read_manifest_from(is, source);
  Checkpoint ck;
  try {
    ck.meta = m.value("meta", json::object());
    for (const auto& e : m.at("entries")) {
      CheckpointEntry ce;
      ce.name = e.at("name").get<std::string>();
      if (e.at("dtype") != "float32") throw CheckpointError("entry " + ce.name + " has unsupported dtype");
      ce.shape = e.at("shape").get<Shape>();
      ce.values.resize(e.at("count").get<std::size_t>());
      if (ce.values.size() != shape_numel(ce.shape))
        throw CheckpointError("entry " + ce.name + " count does not match its shape");
      detail::read_floats_le(is, ce.values);
      ck.entries.push_back(std::move(ce));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(source + ": malformed manifest: " + e.what());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(is, path.string());
}

inline void add_params(Checkpoint& ck, const std::string& prefix, const ParamSet<float>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& v = ps.tensors()[i].vec();
    ck.add(prefix + ps.names()[i], ps.tensors()[i].shape(), {v.begin(), v.end()});
  }
}

/// Copies every parameter of `ps` from `<prefix><name>`; all missing or
/// mis-shaped entries are named in the error.
inline void load_params(const Checkpoint& ck, const std::string& prefix, ParamSet<float>& ps) {
  std::string missing;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto* e = ck.find(prefix + ps.names()[i]);
    auto& t = ps.tensors()[i];
    if (!e) {
      missing += (missing.empty() ? "" : ", ") + prefix + ps.names()[i];
      continue;
    }
    if (e->shape != t.shape()) {
      missing += (missing.empty() ? "" : ", ") + prefix + ps.names()[i] + " (shape " +
                 shape_str(e->shape) + " != " + shape_str(t.shape()) + ")";
      continue;
    }
    std::copy(e->values.begin(), e->values.end(), t.values().begin());
  }
  if (!missing.empty()) throw CheckpointError("checkpoint is missing fields: " + missing);
}

}  // namespace colorgan
