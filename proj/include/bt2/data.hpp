#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "bt2/binary.hpp"
#include "bt2/errors.hpp"
#include "bt2/linalg.hpp"
#include "bt2/random.hpp"
#include "bt2/retrieval.hpp"

namespace bt2::data {

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 200;
  std::size_t feature_dim = 32;
  double separation = 3.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
    if (per_class < 2) throw ConfigError("synthetic: per_class must be >= 2");
    if (feature_dim < 1) throw ConfigError("synthetic: feature_dim must be >= 1");
    if (!(separation >= 0.0) || !std::isfinite(separation)) throw ConfigError("synthetic: separation must be >= 0");
  }
};

struct Sample {
  std::vector<double> x;
  std::uint32_t label = 0;
};

/// Labeled feature vectors. A sample's id is its index.
struct Dataset {
  std::vector<Sample> samples;
  std::size_t class_count = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t feature_dim() const { return samples.empty() ? 0 : samples.front().x.size(); }

  /// Features of the given samples as columns.
  linalg::DenseMatrix columns(std::span<const std::size_t> indices) const {
    linalg::DenseMatrix m(feature_dim(), indices.size());
    for (std::size_t c = 0; c < indices.size(); ++c) {
      const auto& x = samples[indices[c]].x;
      for (std::size_t i = 0; i < x.size(); ++i) m(i, c) = x[i];
    }
    return m;
  }

  std::vector<std::size_t> labels(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(samples[i].label);
    return out;
  }

  void validate() const {
    std::vector<bool> seen(class_count, false);
    for (const auto& s : samples) {
      if (s.label >= class_count) throw InputError("dataset: label out of range");
      seen[s.label] = true;
    }
    for (std::size_t c = 0; c < class_count; ++c) {
      if (!seen[c]) throw InputError("dataset: class " + std::to_string(c) + " has no samples");
    }
  }
};

struct SplitData {
  Dataset train;
  Dataset validation;
};

inline constexpr std::size_t kValidationStride = 5;  // every 5th sample of a class -> 80/20

/// Gaussian clusters: class means uniform on a sphere of radius `separation`,
/// samples = mean + N(0, I). Features are rounded to f32 so file round-trips are exact.
inline SplitData gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto dir = rng.unit_vector(spec.feature_dim);
    for (double& v : dir) v *= spec.separation;
    means.push_back(std::move(dir));
  }
  SplitData out;
  out.train.class_count = spec.num_classes;
  out.validation.class_count = spec.num_classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Sample s;
      s.label = static_cast<std::uint32_t>(c);
      s.x.resize(spec.feature_dim);
      for (std::size_t k = 0; k < spec.feature_dim; ++k) {
        s.x[k] = static_cast<double>(static_cast<float>(means[c][k] + rng.normal()));
      }
      (i % kValidationStride == kValidationStride - 1 ? out.validation : out.train).samples.push_back(std::move(s));
    }
  }
  return out;
}

/// Old split: samples whose label < ceil(old_fraction * classes). Labels are kept as-is.
inline std::pair<Dataset, Dataset> split_old_new(const Dataset& ds, double old_fraction) {
  if (!(old_fraction > 0.0) || old_fraction > 1.0) throw ConfigError("old_fraction must be in (0, 1]");
  const auto old_classes =
      static_cast<std::size_t>(std::ceil(old_fraction * static_cast<double>(ds.class_count) - 1e-12));
  Dataset old;
  old.class_count = old_classes;
  for (const auto& s : ds.samples)
    if (s.label < old_classes) old.samples.push_back(s);
  if (old.samples.empty()) throw ConfigError("old split is empty");
  return {std::move(old), ds};
}

// ---------------------------------------------------------------------------
// Binary formats
//
// Envelope (little-endian): magic[4], version u32 = 1, flags u8 (bit0: labels
// present), tag (u16 length + UTF-8), count u64, dim u32, then `count` rows.
//   EMBV rows: id u64, label u32, dim x f32
//   DSET rows: label u32, dim x f32

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kFlagLabels = 0x01;

namespace detail {

struct Envelope {
  std::uint8_t flags = 0;
  std::string tag;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
};

inline void write_envelope(binary::Writer& w, std::string_view magic, const Envelope& e) {
  w.bytes(magic);
  w.u32(kFormatVersion);
  w.u8(e.flags);
  w.short_string(e.tag);
  w.u64(e.count);
  w.u32(e.dim);
}

inline Envelope read_envelope(binary::Reader& r, std::string_view magic, std::size_t prefix_bytes) {
  r.expect_magic(magic);
  const std::size_t vpos = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) throw FormatError("unsupported version " + std::to_string(version), vpos);
  Envelope e;
  const std::size_t fpos = r.offset();
  e.flags = r.u8();
  if ((e.flags & ~kFlagLabels) != 0) throw FormatError("unknown flag bits", fpos);
  e.tag = r.short_string();
  const std::size_t cpos = r.offset();
  e.count = r.u64();
  e.dim = r.u32();
  const std::uint64_t row = prefix_bytes + static_cast<std::uint64_t>(e.dim) * sizeof(float);
  if (e.count > 0 && (row == 0 || e.count > r.remaining() / row || e.count * row != r.remaining())) {
    throw FormatError("record count/dimension do not match file size", cpos);
  }
  if (e.count == 0 && r.remaining() != 0) throw FormatError("trailing bytes after empty record set", cpos);
  return e;
}

inline float checked_f32(double v) {
  const auto f = static_cast<float>(v);
  if (!std::isfinite(f)) throw InputError("cannot store non-finite value " + std::to_string(v));
  return f;
}

inline double read_finite_f32(binary::Reader& r) {
  const std::size_t pos = r.offset();
  const float f = r.f32();
  if (!std::isfinite(f)) throw FormatError("non-finite value", pos);
  return static_cast<double>(f);
}

}  // namespace detail

inline std::vector<char> encode_embeddings(const std::string& model_tag,
                                           std::span<const retrieval::EmbeddingRecord> records,
                                           bool labels_present = true) {
  detail::Envelope e;
  e.flags = labels_present ? kFlagLabels : 0;
  e.tag = model_tag;
  e.count = records.size();
  e.dim = records.empty() ? 0 : static_cast<std::uint32_t>(records.front().vector.size());
  binary::Writer w;
  detail::write_envelope(w, "EMBV", e);
  for (const auto& r : records) {
    if (r.vector.size() != e.dim) throw InputError("write_embeddings: records have mixed dimensions");
    w.u64(r.id);
    w.u32(labels_present ? r.label : 0);
    for (double v : r.vector) w.f32(detail::checked_f32(v));
  }
  return w.buffer();
}

inline retrieval::Gallery decode_embeddings(std::vector<char> bytes) {
  binary::Reader r(std::move(bytes));
  const auto e = detail::read_envelope(r, "EMBV", sizeof(std::uint64_t) + sizeof(std::uint32_t));
  retrieval::Gallery g((e.flags & kFlagLabels) != 0);
  for (std::uint64_t i = 0; i < e.count; ++i) {
    const std::size_t pos = r.offset();
    retrieval::EmbeddingRecord rec;
    rec.id = r.u64();
    rec.label = r.u32();
    rec.model_tag = e.tag;
    rec.vector.resize(e.dim);
    for (double& v : rec.vector) v = detail::read_finite_f32(r);
    try {
      g.add(std::move(rec));
    } catch (const InputError& err) {
      throw FormatError(err.what(), pos);
    }
  }
  r.expect_end();
  return g;
}

inline void write_embeddings(const std::filesystem::path& path, const std::string& model_tag,
                             std::span<const retrieval::EmbeddingRecord> records, bool labels_present = true) {
  binary::write_file_atomic(path, encode_embeddings(model_tag, records, labels_present));
}

inline retrieval::Gallery read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(binary::read_file(path));
}

/// Dataset file: same envelope, magic "DSET".
inline std::vector<char> encode_dataset(const std::string& name, const Dataset& ds) {
  detail::Envelope e;
  e.flags = kFlagLabels;
  e.tag = name;
  e.count = ds.size();
  e.dim = static_cast<std::uint32_t>(ds.feature_dim());
  binary::Writer w;
  detail::write_envelope(w, "DSET", e);
  for (const auto& s : ds.samples) {
    if (s.x.size() != e.dim) throw InputError("write_dataset: mixed feature dimensions");
    w.u32(s.label);
    for (double v : s.x) w.f32(detail::checked_f32(v));
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::vector<char> bytes) {
  binary::Reader r(std::move(bytes));
  const auto e = detail::read_envelope(r, "DSET", sizeof(std::uint32_t));
  Dataset ds;
  std::size_t max_label = 0;
  for (std::uint64_t i = 0; i < e.count; ++i) {
    Sample s;
    s.label = r.u32();
    s.x.resize(e.dim);
    for (double& v : s.x) v = detail::read_finite_f32(r);
    max_label = std::max<std::size_t>(max_label, s.label);
    ds.samples.push_back(std::move(s));
  }
  r.expect_end();
  ds.class_count = ds.samples.empty() ? 0 : max_label + 1;
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const std::string& name, const Dataset& ds) {
  binary::write_file_atomic(path, encode_dataset(name, ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(binary::read_file(path)); }

}  // namespace bt2::data
