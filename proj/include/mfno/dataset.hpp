#pragma once

// Input features, normalization, sample files and the text manifest of one
// fidelity level.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfno/binary_io.hpp"
#include "mfno/geomodel.hpp"
#include "mfno/random.hpp"
#include "mfno/simulator.hpp"

namespace mfno {

inline constexpr std::size_t kFeatureChannels = 4;  // porosity, log-permeability, injection share, time

struct NormalizationStats {
  std::map<std::string, std::pair<double, double>> ranges;  // "porosity", "log_permeability" -> (min, max)
  double t_max_years = 10;
  std::vector<double> planned_volumes;  // per well, over the full horizon

  const std::pair<double, double>& range(const std::string& feature) const {
    auto it = ranges.find(feature);
    if (it == ranges.end()) throw DataError("normalization stats are missing feature '" + feature + "'");
    return it->second;
  }

  void validate() const {
    for (const char* f : {"porosity", "log_permeability"}) {
      const auto& [lo, hi] = range(f);
      if (!(hi > lo)) throw DataError(std::string("normalization range of ") + f + " is empty");
    }
    if (!(t_max_years > 0)) throw DataError("normalization horizon must be positive");
  }

  bool operator==(const NormalizationStats&) const = default;
};

/// Min/max of porosity and ln(k / mD) over the given geomodels.
inline NormalizationStats compute_stats(const std::vector<Geomodel>& models, double t_max_years,
                                        const std::vector<sim::WellSpec>& wells) {
  if (models.empty()) throw DataError("compute_stats: no geomodels");
  double pmin = INFINITY, pmax = -INFINITY, kmin = INFINITY, kmax = -INFINITY;
  for (const auto& g : models)
    for (std::size_t i = 0; i < g.porosity.size(); ++i) {
      pmin = std::min(pmin, g.porosity[i]);
      pmax = std::max(pmax, g.porosity[i]);
      const double lk = std::log(g.permeability[i]);
      kmin = std::min(kmin, lk);
      kmax = std::max(kmax, lk);
    }
  NormalizationStats s;
  s.ranges["porosity"] = {pmin, pmax};
  s.ranges["log_permeability"] = {kmin, kmax};
  s.t_max_years = t_max_years;
  for (const auto& w : wells) s.planned_volumes.push_back(w.planned_cumulative(t_max_years * sim::kSecondsPerYear));
  s.validate();
  return s;
}

inline double normalize(double x, const std::pair<double, double>& r) {
  return std::clamp((x - r.first) / (r.second - r.first), 0.0, 1.0);
}

/// [nx, ny, nz, 4] features at time t (years); well channels are zero off the trajectories.
template <class T = float>
Tensor<T> assemble_features(const Geomodel& g, const std::vector<sim::WellSpec>& wells, const NormalizationStats& stats,
                            double t_years) {
  const auto& pr = stats.range("porosity");
  const auto& kr = stats.range("log_permeability");
  if (!(t_years >= 0 && t_years <= stats.t_max_years * (1 + 1e-12)))
    throw DataError("assemble_features: time " + std::to_string(t_years) + " outside [0, " +
                    std::to_string(stats.t_max_years) + "]");
  const auto [nx, ny, nz] = g.grid();
  Tensor<T> out({nx, ny, nz, kFeatureChannels});
  for (std::size_t c = 0; c < g.porosity.size(); ++c) {
    out[c * kFeatureChannels + 0] = T(normalize(g.porosity[c], pr));
    out[c * kFeatureChannels + 1] = T(normalize(std::log(g.permeability[c]), kr));
  }
  std::vector<double> cum;
  double total = 0;
  for (const auto& w : wells) {
    cum.push_back(w.planned_cumulative(t_years * sim::kSecondsPerYear));
    total += cum.back();
  }
  for (std::size_t w = 0; w < wells.size(); ++w) {
    const auto& ws = wells[w];
    if (ws.i >= nx || ws.j >= ny || ws.k_bottom >= nz || ws.k_top > ws.k_bottom)
      throw ConfigError("assemble_features: well " + ws.name + " lies outside the grid");
    for (std::size_t k = ws.k_top; k <= ws.k_bottom; ++k) {
      const std::size_t c = (ws.i * ny + ws.j) * nz + k;
      out[c * kFeatureChannels + 2] = T(total > 0 ? cum[w] / total : 0.0);
      out[c * kFeatureChannels + 3] = T(t_years / stats.t_max_years);
    }
  }
  return out;
}

enum class Target { pressure, saturation };

inline std::string to_string(Target t) { return t == Target::pressure ? "pressure" : "saturation"; }
inline Target target_from_string(const std::string& s) {
  if (s == "pressure") return Target::pressure;
  if (s == "saturation") return Target::saturation;
  throw ConfigError("unknown target '" + s + "' (expected pressure or saturation)");
}

/// Pressure targets are the buildup over the initial state in MPa; saturation is used as is.
template <class T = float>
Tensor<T> target_field(Target target, const sim::Snapshot& snap, const Tensor<double>& initial_pressure) {
  const Shape& s = snap.pressure.shape();
  Tensor<T> out({s[0], s[1], s[2], 1});
  for (std::size_t c = 0; c < snap.pressure.size(); ++c)
    out[c] = target == Target::pressure ? T((snap.pressure[c] - initial_pressure[c]) * 1e-6) : T(snap.saturation[c]);
  return out;
}

// ---------------------------------------------------------------------------
// "MFNO" sample files.

inline constexpr std::uint32_t kSampleVersion = 1;

struct Sample {
  Tensor<float> input;   // [nx, ny, nz, 4]
  Tensor<float> target;  // [nx, ny, nz, 1]
  std::string target_name;
  std::uint32_t realization = 0;
  std::uint32_t timestep = 0;

  std::size_t bytes() const { return (input.size() + target.size()) * sizeof(float); }
};

inline std::vector<std::uint8_t> encode_sample(const Sample& s) {
  ByteWriter w;
  w.magic("MFNO");
  w.u32(kSampleVersion);
  w.str(s.target_name);
  w.u32(s.realization);
  w.u32(s.timestep);
  write_tensor_block(w, s.input);
  write_tensor_block(w, s.target);
  w.crc();
  return w.take();
}

inline Sample decode_sample(std::span<const std::uint8_t> bytes, const std::string& path) {
  Sample s;
  parse_framed(bytes, "MFNO", path, [&](ByteReader& r) {
    const auto version = r.u32();
    if (version != kSampleVersion)
      throw FileError(FileFault::unknown_version, path, "version " + std::to_string(version));
    s.target_name = r.str();
    s.realization = r.u32();
    s.timestep = r.u32();
    s.input = read_tensor_block<float>(r);
    s.target = read_tensor_block<float>(r);
  });
  return s;
}

inline void write_sample(const std::filesystem::path& path, const Sample& s) { write_file_atomic(path, encode_sample(s)); }
inline Sample read_sample(const std::filesystem::path& path) { return decode_sample(read_file(path), path.string()); }

/// Exact file size of a sample with f32 payloads.
inline std::size_t sample_file_bytes(const std::string& target_name, const Shape& input, const Shape& target) {
  return 4 + 4 + 4 + target_name.size() + 4 + 4 + tensor_block_bytes(input, 4) + tensor_block_bytes(target, 4) + 4;
}

// ---------------------------------------------------------------------------
// Manifest.

enum class Split { train, val, test, unused };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unused: return "unused";
  }
  return "unused";
}
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unused") return Split::unused;
  throw DataError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string digest;
  std::uint32_t realization = 0;
  std::uint32_t timestep = 0;
  Split split = Split::unused;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

struct DatasetManifest {
  std::string fidelity;  // "lf" | "hf"
  std::array<std::size_t, 3> grid{};
  std::string target;
  std::string pairing = "correlated";
  std::string config_digest;
  std::uint64_t split_seed = 0;
  NormalizationStats stats;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory holding the manifest; not serialized

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }

  std::vector<std::uint32_t> realizations(Split s) const {
    std::set<std::uint32_t> r;
    for (const auto& e : entries)
      if (e.split == s) r.insert(e.realization);
    return {r.begin(), r.end()};
  }

  /// Reads an entry and checks the recorded digest.
  Sample load(std::size_t index) const {
    const auto& e = entries.at(index);
    const auto path = root / e.path;
    const auto bytes = read_file(path);
    const auto digest = sha256_hex(bytes);
    if (digest != e.digest)
      throw FileError(FileFault::digest_mismatch, path.string(), "expected " + e.digest + ", found " + digest);
    return decode_sample(bytes, path.string());
  }
};

/// Seeded permutation of the distinct realization ids; the first counts.train go
/// to train, then val, then test, the rest are unused.
inline std::map<std::uint32_t, Split> assign_splits(std::vector<std::uint32_t> realizations, std::uint64_t seed,
                                                    const SplitCounts& counts) {
  std::sort(realizations.begin(), realizations.end());
  if (std::adjacent_find(realizations.begin(), realizations.end()) != realizations.end())
    throw DataError("assign_splits: duplicate realization ids");
  if (counts.train + counts.val + counts.test > realizations.size())
    throw ConfigError("split counts " + std::to_string(counts.train) + "/" + std::to_string(counts.val) + "/" +
                      std::to_string(counts.test) + " exceed the " + std::to_string(realizations.size()) +
                      " available realizations");
  Rng rng(mix_seed(seed, 0x53504c));
  rng.shuffle(realizations);
  std::map<std::uint32_t, Split> out;
  for (std::size_t i = 0; i < realizations.size(); ++i) {
    Split s = Split::unused;
    if (i < counts.train)
      s = Split::train;
    else if (i < counts.train + counts.val)
      s = Split::val;
    else if (i < counts.train + counts.val + counts.test)
      s = Split::test;
    out[realizations[i]] = s;
  }
  return out;
}

/// Catalogs every "*.mfno" file under `samples_dir`; each realization takes its split from `splits`.
inline DatasetManifest build_manifest(const std::filesystem::path& samples_dir,
                                      const std::map<std::uint32_t, Split>& splits, DatasetManifest header) {
  std::vector<std::filesystem::path> files;
  for (const auto& de : std::filesystem::directory_iterator(samples_dir))
    if (de.is_regular_file() && de.path().extension() == ".mfno") files.push_back(de.path());
  std::sort(files.begin(), files.end());
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  header.entries.clear();
  for (const auto& f : files) {
    const auto bytes = read_file(f);
    const auto s = decode_sample(bytes, f.string());
    if (!seen.emplace(s.realization, s.timestep).second)
      throw DataError("build_manifest: duplicate sample for realization " + std::to_string(s.realization) +
                      " timestep " + std::to_string(s.timestep) + " (" + f.string() + ")");
    if (!header.target.empty() && s.target_name != header.target)
      throw DataError("build_manifest: " + f.string() + " holds target '" + s.target_name + "', expected '" +
                      header.target + "'");
    const auto it = splits.find(s.realization);
    header.entries.push_back({std::filesystem::relative(f, samples_dir).generic_string(), sha256_hex(bytes),
                              s.realization, s.timestep, it == splits.end() ? Split::unused : it->second});
  }
  header.root = samples_dir;
  return header;
}

/// As above with a seeded split over the realizations found on disk.
inline DatasetManifest build_manifest(const std::filesystem::path& samples_dir, std::uint64_t split_seed,
                                      const SplitCounts& counts, DatasetManifest header) {
  std::set<std::uint32_t> reals;
  for (const auto& de : std::filesystem::directory_iterator(samples_dir))
    if (de.is_regular_file() && de.path().extension() == ".mfno")
      reals.insert(read_sample(de.path()).realization);
  header = build_manifest(samples_dir, assign_splits({reals.begin(), reals.end()}, split_seed, counts), std::move(header));
  header.split_seed = split_seed;
  return header;
}

inline std::string manifest_text(const DatasetManifest& m) {
  std::ostringstream os;
  os.precision(17);
  os << "# mfno dataset manifest\n";
  os << "version=1\n";
  os << "fidelity=" << m.fidelity << '\n';
  os << "grid=" << m.grid[0] << 'x' << m.grid[1] << 'x' << m.grid[2] << '\n';
  os << "target=" << m.target << '\n';
  os << "pairing=" << m.pairing << '\n';
  os << "config_digest=" << m.config_digest << '\n';
  os << "split_seed=" << m.split_seed << '\n';
  for (const auto& [name, r] : m.stats.ranges) os << "stats." << name << '=' << r.first << ',' << r.second << '\n';
  os << "stats.t_max_years=" << m.stats.t_max_years << '\n';
  os << "stats.planned_volumes=";
  for (std::size_t i = 0; i < m.stats.planned_volumes.size(); ++i) os << (i ? "," : "") << m.stats.planned_volumes[i];
  os << '\n';
  os << "samples=" << m.entries.size() << '\n';
  os << "---\n";
  for (const auto& e : m.entries)
    os << to_string(e.split) << ' ' << e.realization << ' ' << e.timestep << ' ' << e.digest << ' ' << e.path << '\n';
  return os.str();
}

inline std::string manifest_digest(const DatasetManifest& m) { return sha256_hex(manifest_text(m)); }

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  write_file_atomic(path, manifest_text(m));
}

inline std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  return out;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError(FileFault::io, path.string(), "cannot open manifest");
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  bool body = false;
  std::size_t declared = 0, lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      if (!body) {
        if (line == "---") {
          body = true;
          continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("expected key=value");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "version") {
          if (val != "1") throw FileError(FileFault::unknown_version, path.string(), "manifest version " + val);
        } else if (key == "fidelity") {
          m.fidelity = val;
        } else if (key == "grid") {
          if (std::sscanf(val.c_str(), "%zux%zux%zu", &m.grid[0], &m.grid[1], &m.grid[2]) != 3)
            throw DataError("bad grid '" + val + "'");
        } else if (key == "target") {
          m.target = val;
        } else if (key == "pairing") {
          m.pairing = val;
        } else if (key == "config_digest") {
          m.config_digest = val;
        } else if (key == "split_seed") {
          m.split_seed = std::stoull(val);
        } else if (key == "stats.t_max_years") {
          m.stats.t_max_years = std::stod(val);
        } else if (key == "stats.planned_volumes") {
          m.stats.planned_volumes = parse_doubles(val);
        } else if (key.starts_with("stats.")) {
          const auto v = parse_doubles(val);
          if (v.size() != 2) throw DataError("range '" + key + "' needs min,max");
          m.stats.ranges[key.substr(6)] = {v[0], v[1]};
        } else if (key == "samples") {
          declared = std::stoul(val);
        } else {
          throw DataError("unknown key '" + key + "'");
        }
      } else {
        std::istringstream ls(line);
        std::string split;
        ManifestEntry e;
        if (!(ls >> split >> e.realization >> e.timestep >> e.digest)) throw DataError("malformed sample record");
        std::getline(ls >> std::ws, e.path);
        if (e.path.empty()) throw DataError("sample record without a path");
        e.split = split_from_string(split);
        m.entries.push_back(std::move(e));
      }
    }
  } catch (const FileError&) {
    throw;
  } catch (const std::exception& ex) {
    throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + ex.what());
  }
  if (m.entries.size() != declared)
    throw DataError("manifest " + path.string() + ": declares " + std::to_string(declared) + " samples, lists " +
                    std::to_string(m.entries.size()));
  return m;
}

}  // namespace mfno
