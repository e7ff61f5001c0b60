#pragma once

// "MFCK" checkpoint files: operator config, named parameters, normalization
// stats, optional optimizer moments and provenance, CRC-framed.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mfno/binary_io.hpp"
#include "mfno/dataset.hpp"
#include "mfno/fno.hpp"

namespace mfno {

template <class T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::uint64_t step = 0;
  bool operator==(const AdamState&) const = default;
};

struct Provenance {
  std::string phase = "pretrain";  // pretrain | finetune | hf
  std::uint32_t epoch = 0;         // 1-based epoch of the selected parameters
  double val_loss = 0;
  std::uint64_t seed = 0;
  std::string manifest_digest;
  std::string parent_digest;  // checkpoint a fine-tune started from
  std::string config_digest;
  std::vector<std::uint32_t> subset;  // training realizations when a subset was drawn
  std::string target;                 // pressure | saturation
  bool operator==(const Provenance&) const = default;
};

struct Checkpoint {
  FnoConfig config;
  FnoParams<float> params;
  NormalizationStats stats;
  std::optional<AdamState<float>> adam;
  Provenance provenance;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_named_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.str(name);
  w.u8(dtype_code<T>());
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.raw(t.data().data(), t.size() * sizeof(T));
}

inline std::pair<std::string, Tensor<float>> read_named_tensor(ByteReader& r) {
  std::string name = r.str();
  const auto code = r.u8();
  if (code != dtype_code<float>()) throw DataError("checkpoint tensor '" + name + "' is not f32");
  const auto ndim = r.u32();
  if (ndim > 16) throw DataError("checkpoint tensor '" + name + "' rank out of range");
  Shape shape(ndim);
  for (auto& d : shape) d = r.u32();
  const std::size_t n = shape_size(shape);
  if (r.remaining() < n * 4) throw TruncatedRead{};
  std::vector<float> data(n);
  r.raw(data.data(), n * 4);
  return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.magic("MFCK");
  w.u32(kCheckpointVersion);
  const auto& f = c.config;
  for (auto v : {f.in_channels, f.width, f.n_layers, f.modes.kept[0], f.modes.kept[1], f.modes.kept[2], f.padding,
                 f.out_channels})
    w.u32(static_cast<std::uint32_t>(v));
  w.str(to_string(f.activation));

  const auto named = named_parameters(c.params);
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) detail::write_named_tensor(w, name, t);

  w.u32(static_cast<std::uint32_t>(c.stats.ranges.size()));
  for (const auto& [name, r] : c.stats.ranges) {
    w.str(name);
    w.f64(r.first);
    w.f64(r.second);
  }
  w.f64(c.stats.t_max_years);
  w.u32(static_cast<std::uint32_t>(c.stats.planned_volumes.size()));
  for (double v : c.stats.planned_volumes) w.f64(v);

  w.u8(c.adam ? 1 : 0);
  if (c.adam) {
    w.u64(c.adam->step);
    for (const auto& [name, t] : named) {
      detail::write_named_tensor(w, name, c.adam->m.at(name));
      detail::write_named_tensor(w, name, c.adam->v.at(name));
    }
  }

  const auto& p = c.provenance;
  w.str(p.phase);
  w.u32(p.epoch);
  w.f64(p.val_loss);
  w.u64(p.seed);
  w.str(p.manifest_digest);
  w.str(p.parent_digest);
  w.str(p.config_digest);
  w.u32(static_cast<std::uint32_t>(p.subset.size()));
  for (auto r : p.subset) w.u32(r);
  w.str(p.target);
  w.crc();
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& path) {
  Checkpoint c;
  parse_framed(bytes, "MFCK", path, [&](ByteReader& r) {
    const auto version = r.u32();
    if (version != kCheckpointVersion)
      throw FileError(FileFault::unknown_version, path, "version " + std::to_string(version));
    auto& f = c.config;
    f.in_channels = r.u32();
    f.width = r.u32();
    f.n_layers = r.u32();
    for (auto& k : f.modes.kept) k = r.u32();
    f.padding = r.u32();
    f.out_channels = r.u32();
    f.activation = activation_from_string(r.str());
    if (f.n_layers > 1024 || f.width > 65536) throw DataError("checkpoint config out of range");

    const auto n = r.u32();
    std::vector<std::pair<std::string, Tensor<float>>> named;
    for (std::uint32_t i = 0; i < n && i < 4096; ++i) named.push_back(detail::read_named_tensor(r));
    c.params = params_from_named(f, named);

    c.stats.ranges.clear();
    const auto nr = r.u32();
    for (std::uint32_t i = 0; i < nr && i < 64; ++i) {
      auto name = r.str();
      const double lo = r.f64(), hi = r.f64();
      c.stats.ranges[name] = {lo, hi};
    }
    c.stats.t_max_years = r.f64();
    const auto np = r.u32();
    if (np > 4096) throw DataError("checkpoint well count out of range");
    c.stats.planned_volumes.resize(np);
    for (auto& v : c.stats.planned_volumes) v = r.f64();

    if (r.u8()) {
      AdamState<float> a;
      a.step = r.u64();
      for (std::size_t i = 0; i < named.size(); ++i) {
        auto m = detail::read_named_tensor(r);
        auto v = detail::read_named_tensor(r);
        if (m.first != named[i].first || v.first != named[i].first || m.second.shape() != named[i].second.shape() ||
            v.second.shape() != named[i].second.shape())
          throw DataError("checkpoint optimizer state does not mirror parameter '" + named[i].first + "'");
        a.m[m.first] = std::move(m.second);
        a.v[v.first] = std::move(v.second);
      }
      c.adam = std::move(a);
    }

    auto& p = c.provenance;
    p.phase = r.str();
    p.epoch = r.u32();
    p.val_loss = r.f64();
    p.seed = r.u64();
    p.manifest_digest = r.str();
    p.parent_digest = r.str();
    p.config_digest = r.str();
    const auto ns = r.u32();
    if (ns > (1u << 24)) throw DataError("checkpoint subset size out of range");
    p.subset.resize(ns);
    for (auto& v : p.subset) v = r.u32();
    p.target = r.str();
  });
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}
inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}
inline std::string checkpoint_digest(const Checkpoint& c) { return sha256_hex(encode_checkpoint(c)); }

}  // namespace mfno
