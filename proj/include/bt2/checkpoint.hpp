#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "bt2/binary.hpp"
#include "bt2/errors.hpp"
#include "bt2/model.hpp"

// Checkpoint layout (little-endian):
//   "BTCK", version u32 = 1, model kind (u16 length + UTF-8), tensor count u32,
//   per tensor: name (u16 length + UTF-8), ndim u8, dims u32 each, data f64.
// Basis-transformation blocks are stored as theta, never as the materialized matrix.
namespace bt2::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

inline std::vector<char> encode(const model::Model& m) {
  binary::Writer w;
  w.bytes("BTCK");
  w.u32(kVersion);
  w.short_string(model::to_string(m.method));
  w.u32(static_cast<std::uint32_t>(m.tensors.size()));
  for (const auto& [name, t] : m.tensors) {
    w.short_string(name);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.data()) {
      if (!std::isfinite(v)) throw InputError("checkpoint: tensor '" + name + "' holds a non-finite value");
      w.f64(v);
    }
  }
  return w.buffer();
}

inline model::Model decode(std::vector<char> bytes) {
  binary::Reader r(std::move(bytes));
  r.expect_magic("BTCK");
  const std::size_t vpos = r.offset();
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v), vpos);
  const std::size_t kpos = r.offset();
  model::Model m;
  try {
    m.method = model::parse_method(r.short_string());
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), kpos);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t npos = r.offset();
    std::string name = r.short_string();
    const std::uint8_t ndim = r.u8();
    if (ndim < 1 || ndim > 2) throw FormatError("tensor '" + name + "' has unsupported rank", npos);
    std::uint64_t rows = r.u32();
    std::uint64_t cols = ndim == 2 ? r.u32() : 1;
    if (rows != 0 && cols > r.remaining() / sizeof(double) / rows) {
      throw FormatError("tensor '" + name + "' larger than the remaining file", npos);
    }
    std::vector<double> values(rows * cols);
    for (double& v : values) {
      const std::size_t pos = r.offset();
      v = r.f64();
      if (!std::isfinite(v)) throw FormatError("non-finite tensor value", pos);
    }
    if (!m.tensors.emplace(std::move(name), grad::Tensor(rows, cols, std::move(values))).second) {
      throw FormatError("duplicate tensor name", npos);
    }
  }
  r.expect_end();
  return m;
}

inline void save(const std::filesystem::path& path, const model::Model& m) { binary::write_file_atomic(path, encode(m)); }

inline model::Model load(const std::filesystem::path& path) { return decode(binary::read_file(path)); }

}  // namespace bt2::checkpoint
