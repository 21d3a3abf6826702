#pragma once

// Checkpoint file layout (all integers and doubles little-endian):
//
//   "CVCK"                 4-byte magic
//   u32 version            currently 1
//   u32 meta_len, bytes    free-form UTF-8 metadata (JSON by convention)
//   u32 count              number of tensors
//   repeated count times:
//     u32 name_len, bytes  parameter name
//     u32 rank
//     i64 dims[rank]
//     f64 data[prod(dims)] row-major
//
// Tensors are written in the order given, so identical models produce
// byte-identical files.

#include "covcast/nn/layers.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace covcast::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  Buffer data;
};

struct Checkpoint {
  std::string meta;
  std::vector<CheckpointEntry> entries;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: unexpected end of file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_pod<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw DataError("checkpoint: truncated string");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedParam>& params,
                             const std::string& meta) {
  os.write("CVCK", 4);
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  detail::write_string(os, meta);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_string(os, p.name);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (Index d : p.tensor.shape()) detail::write_pod<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor.value().data()),
             static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CVCK") throw DataError("checkpoint: bad magic");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.meta = detail::read_string(is);
  const auto count = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    e.name = detail::read_string(is);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    if (rank == 0 || rank > 5) throw DataError("checkpoint: bad rank for " + e.name);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::read_pod<std::int64_t>(is));
    const Index rows = e.shape.size() == 1 ? 1 : e.shape[0];
    const Index total = shape_numel(e.shape);
    e.data.resize(rows, total / std::max<Index>(rows, 1));
    is.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(total * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated data for " + e.name);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

/// Copies checkpoint data into existing parameters, matching by name and shape.
inline void restore_parameters(const Checkpoint& ck, std::vector<NamedParam>& params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.entries) by_name[e.name] = &e;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw DataError("checkpoint: shape mismatch for " + p.name + " (" +
                      shape_str(it->second->shape) + " vs " + shape_str(p.tensor.shape()) + ")");
    }
    p.tensor.mutable_value() = it->second->data;
  }
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedParam>& params,
                            const std::string& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint '" + path + "'");
  write_checkpoint(os, params, meta);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace covcast::nn
