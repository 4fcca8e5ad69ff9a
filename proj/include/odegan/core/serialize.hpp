// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container: a string meta map plus named typed arrays.
// Writes go to a temp file in the target directory and are renamed into
// place, so a crash never leaves a half-written checkpoint behind.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "odegan/core/errors.hpp"
#include "odegan/core/tensor.hpp"

namespace odegan::core {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

template <class S>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
  return Dtype::kF32;
}
template <>
constexpr Dtype dtype_of<double>() {
  return Dtype::kF64;
}

struct ArrayRecord {
  Shape shape;
  Dtype dtype = Dtype::kF32;
  std::vector<std::uint8_t> bytes;

  template <class S>
  static ArrayRecord from(const std::vector<S>& data, Shape shape) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("ArrayRecord: shape/data length mismatch");
    ArrayRecord r;
    r.shape = std::move(shape);
    r.dtype = dtype_of<S>();
    r.bytes.resize(data.size() * sizeof(S));
    std::memcpy(r.bytes.data(), data.data(), r.bytes.size());
    return r;
  }

  template <class S>
  std::vector<S> as() const {
    if (dtype != dtype_of<S>())
      throw IoError("ArrayRecord: stored dtype does not match requested type");
    std::vector<S> out(bytes.size() / sizeof(S));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, ArrayRecord> arrays;

  template <class S>
  void put_tree(const std::string& prefix, const ParamTree<S>& tree) {
    for (const auto& [path, t] : tree)
      arrays[prefix + "/" + path] = ArrayRecord::from(t.value(), t.shape());
  }

  // Loads stored values into an already-built tree; every entry must exist
  // with a matching shape so architecture drift is caught at load time.
  template <class S>
  void load_tree_into(const std::string& prefix, ParamTree<S>& tree) const {
    for (auto& [path, t] : tree) {
      auto it = arrays.find(prefix + "/" + path);
      if (it == arrays.end())
        throw IoError("checkpoint: missing array '" + prefix + "/" + path +
                      "'");
      if (it->second.shape != t.shape())
        throw IoError("checkpoint: shape mismatch for '" + prefix + "/" +
                      path + "': stored " + shape_str(it->second.shape) +
                      ", expected " + shape_str(t.shape()));
      t.value() = it->second.template as<S>();
    }
  }
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  auto n = read_pod<std::uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("checkpoint: truncated string");
  return s;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'O', 'D', 'E', 'G',
                                             'A', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ck) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open '" + tmp.string() +
                           "' for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, ck.meta.size());
    for (const auto& [k, v] : ck.meta) {
      detail::write_str(os, k);
      detail::write_str(os, v);
    }
    detail::write_pod<std::uint64_t>(os, ck.arrays.size());
    for (const auto& [name, rec] : ck.arrays) {
      detail::write_str(os, name);
      detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(rec.dtype));
      detail::write_pod<std::uint8_t>(os,
                                      static_cast<std::uint8_t>(
                                          rec.shape.size()));
      for (std::size_t d : rec.shape)
        detail::write_pod<std::uint64_t>(os, d);
      detail::write_pod<std::uint64_t>(os, rec.bytes.size());
      os.write(reinterpret_cast<const char*>(rec.bytes.data()),
               static_cast<std::streamsize>(rec.bytes.size()));
    }
    if (!os) throw IoError("checkpoint: write failed for '" + tmp.string() +
                           "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw IoError("checkpoint: rename to '" + path.string() +
                  "' failed: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("checkpoint: bad magic in '" + path.string() + "'");
  auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(version));
  Checkpoint ck;
  auto meta_n = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < meta_n; ++i) {
    std::string k = detail::read_str(is);
    ck.meta[k] = detail::read_str(is);
  }
  auto arr_n = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < arr_n; ++i) {
    std::string name = detail::read_str(is);
    ArrayRecord rec;
    auto dt = detail::read_pod<std::uint8_t>(is);
    if (dt > 1) throw IoError("checkpoint: unknown dtype tag");
    rec.dtype = static_cast<Dtype>(dt);
    auto ndim = detail::read_pod<std::uint8_t>(is);
    rec.shape.resize(ndim);
    for (auto& d : rec.shape) d = detail::read_pod<std::uint64_t>(is);
    auto nbytes = detail::read_pod<std::uint64_t>(is);
    std::size_t elem = rec.dtype == Dtype::kF32 ? 4 : 8;
    if (nbytes != shape_numel(rec.shape) * elem)
      throw IoError("checkpoint: byte count does not match shape for '" +
                    name + "'");
    rec.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(rec.bytes.data()),
            static_cast<std::streamsize>(nbytes));
    if (!is) throw IoError("checkpoint: truncated array '" + name + "'");
    ck.arrays[name] = std::move(rec);
  }
  return ck;
}

}  // namespace odegan::core
