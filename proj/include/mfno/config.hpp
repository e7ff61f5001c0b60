#pragma once

// Experiment configuration: line-oriented "section.key = value" text.
//
// Every key the pipeline reads is declared in ExperimentConfig::from_text;
// unknown keys are rejected so typos do not silently fall back to defaults.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfno/binary_io.hpp"
#include "mfno/dataset.hpp"
#include "mfno/fno.hpp"
#include "mfno/geomodel.hpp"
#include "mfno/simulator.hpp"
#include "mfno/training.hpp"

namespace mfno {

/// Raw key/value view with typed, error-reporting accessors.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin) {
    KeyValues kv;
    kv.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto key_end = line.find('=');
      const std::string key = trim(line.substr(0, key_end));
      if (key.empty() && key_end == std::string::npos) continue;
      if (key_end == std::string::npos || key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
      if (key.find('.') == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key + "' has no section");
      if (kv.values_.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      kv.values_[key] = trim(line.substr(key_end + 1));
    }
    return kv;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double real(const std::string& key, double fallback) {
    const auto s = str(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": '" + key + "' expects a number, got '" + s + "'");
    }
  }
  std::uint64_t integer(const std::string& key, std::uint64_t fallback) {
    const auto s = str(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(s, &pos);
      if (pos != s.size() || s[0] == '-') throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": '" + key + "' expects a nonnegative integer, got '" + s + "'");
    }
  }
  bool flag(const std::string& key, bool fallback) {
    const auto s = str(key, "");
    if (s.empty()) return fallback;
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    throw ConfigError(origin_ + ": '" + key + "' expects true or false, got '" + s + "'");
  }
  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback) {
    const auto s = str(key, "");
    if (s.empty()) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
  }
  std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    std::vector<double> out;
    for (const auto& item : list(key, {})) {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError(origin_ + ": '" + key + "' expects comma-separated numbers, got '" + item + "'");
      }
    }
    return out;
  }
  template <std::size_t N>
  std::array<std::size_t, N> sizes(const std::string& key, const std::array<std::size_t, N>& fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const auto v = reals(key, {});
    if (v.size() != N)
      throw ConfigError(origin_ + ": '" + key + "' expects " + std::to_string(N) + " comma-separated values");
    std::array<std::size_t, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
      if (v[i] < 0 || v[i] != std::floor(v[i]))
        throw ConfigError(origin_ + ": '" + key + "' expects nonnegative integers");
      out[i] = std::size_t(v[i]);
    }
    return out;
  }
  template <std::size_t N>
  std::array<double, N> reals_n(const std::string& key, const std::array<double, N>& fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const auto v = reals(key, {});
    if (v.size() != N)
      throw ConfigError(origin_ + ": '" + key + "' expects " + std::to_string(N) + " comma-separated values");
    std::array<double, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  }

  void reject_unused() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw ConfigError(origin_ + ": unknown key '" + k + "'");
  }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

struct WellLayout {
  std::vector<std::array<std::size_t, 2>> positions;  // high-fidelity (i, j)
  double total_rate = 0.013;                           // m^3/s summed over wells
  double share_spread = 0.5;                           // per-well weight drawn in [1 - s, 1 + s]
  std::optional<double> bhp_cap;                       // Pa
};

struct SplitPlan {
  SplitCounts global{256, 16, 16};  // over all realizations
  SplitCounts high{32, 4, 16};      // high-fidelity subset drawn from each global split
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::filesystem::path root = "runs/experiment";
  std::string pairing = "correlated";  // correlated | decorrelated

  GeomodelSpec geomodel;                  // high-fidelity grid and statistics
  std::array<std::size_t, 3> upscale{2, 2, 1};
  double decorrelated_corr_scale = 1.5;

  sim::ReservoirConfig reservoir;  // fluid, rock and stepping settings; fields are filled per realization
  WellLayout wells;

  std::size_t realizations = 288;
  SplitPlan splits;
  std::vector<std::size_t> timesteps;  // 1-based report indices used as samples; empty = all

  FnoConfig model;
  TrainConfig pretrain, finetune, hf_baseline;
  std::size_t finetune_hf = 16;

  std::string digest;  // of the canonical text; pairing and root excluded
  std::string canonical;

  std::array<std::size_t, 3> grid(const std::string& fidelity) const {
    if (fidelity == "hf") return geomodel.grid;
    return {geomodel.grid[0] / upscale[0], geomodel.grid[1] / upscale[1], geomodel.grid[2] / upscale[2]};
  }

  static ExperimentConfig from_text(const std::string& text, const std::string& origin) {
    auto kv = KeyValues::parse(text, origin);
    if (const char* env = std::getenv("MFNO_SEED"); env && *env) kv.set("experiment.seed", env);
    ExperimentConfig c;
    c.name = kv.str("experiment.name", c.name);
    c.seed = kv.integer("experiment.seed", c.seed);
    c.root = kv.str("experiment.root", "runs/" + c.name);
    c.pairing = kv.str("experiment.pairing", c.pairing);
    if (c.pairing != "correlated" && c.pairing != "decorrelated")
      throw ConfigError(origin + ": experiment.pairing must be correlated or decorrelated");

    auto& g = c.geomodel;
    g.grid = kv.sizes<3>("geomodel.grid", g.grid);
    c.upscale = kv.sizes<3>("geomodel.upscale", c.upscale);
    g.poro_mean = kv.real("geomodel.poro_mean", g.poro_mean);
    g.poro_std = kv.real("geomodel.poro_std", g.poro_std);
    g.corr_len = kv.reals_n<3>("geomodel.corr_len", g.corr_len);
    g.logk_slope = kv.real("geomodel.logk_slope", g.logk_slope);
    g.logk_intercept = kv.real("geomodel.logk_intercept", g.logk_intercept);
    g.logk_residual_std = kv.real("geomodel.logk_residual_std", g.logk_residual_std);
    g.poro_min = kv.real("geomodel.poro_min", g.poro_min);
    g.poro_max = kv.real("geomodel.poro_max", g.poro_max);
    g.seed = mix_seed(c.seed, 0x47454f4d);
    c.decorrelated_corr_scale = kv.real("geomodel.decorrelated_corr_scale", c.decorrelated_corr_scale);
    g.validate();
    for (std::size_t a = 0; a < 3; ++a)
      if (c.upscale[a] < 1 || g.grid[a] % c.upscale[a] != 0)
        throw ConfigError(origin + ": geomodel.upscale must divide geomodel.grid");

    auto& r = c.reservoir;
    r.cell_size = kv.reals_n<3>("simulator.cell_size", r.cell_size);
    r.mu_w = kv.real("simulator.mu_w", r.mu_w);
    r.mu_g = kv.real("simulator.mu_g", r.mu_g);
    r.rho_w = kv.real("simulator.rho_w", r.rho_w);
    r.rho_g = kv.real("simulator.rho_g", r.rho_g);
    r.n_w = kv.real("simulator.n_w", r.n_w);
    r.n_g = kv.real("simulator.n_g", r.n_g);
    r.s_wr = kv.real("simulator.s_wr", r.s_wr);
    r.s_gr = kv.real("simulator.s_gr", r.s_gr);
    r.c_r = kv.real("simulator.c_r", r.c_r);
    r.kv_kh = kv.real("simulator.kv_kh", r.kv_kh);
    r.gravity = kv.flag("simulator.gravity", r.gravity);
    r.p0 = kv.real("simulator.p0", r.p0);
    r.datum_depth = kv.real("simulator.datum_depth", r.datum_depth);
    r.constant_pressure = {};
    static const char* faces[6] = {"x_minus", "x_plus", "y_minus", "y_plus", "z_minus", "z_plus"};
    for (const auto& f : kv.list("simulator.constant_pressure", {})) {
      if (f == "none") continue;
      const auto it = std::find_if(std::begin(faces), std::end(faces), [&](const char* n) { return f == n; });
      if (it == std::end(faces)) throw ConfigError(origin + ": unknown boundary face '" + f + "'");
      r.constant_pressure[std::size_t(it - std::begin(faces))] = true;
    }
    r.report_years = kv.reals("simulator.report_years", r.report_years);
    r.dt_initial_days = kv.real("simulator.dt_initial_days", r.dt_initial_days);
    r.dt_max_days = kv.real("simulator.dt_max_days", r.dt_max_days);
    r.dt_growth = kv.real("simulator.dt_growth", r.dt_growth);
    r.cfl_max = kv.real("simulator.cfl_max", r.cfl_max);
    r.upwind_iterations = int(kv.integer("simulator.upwind_iterations", std::uint64_t(r.upwind_iterations)));
    r.solver_tol = kv.real("simulator.solver_tol", r.solver_tol);

    c.wells.positions.clear();
    for (const auto& p : kv.list("wells.positions", {"8:8", "8:23", "23:8", "23:23"})) {
      std::size_t i = 0, j = 0;
      char colon = 0;
      std::istringstream ps(p);
      if (!(ps >> i >> colon >> j) || colon != ':')
        throw ConfigError(origin + ": wells.positions entries look like i:j, got '" + p + "'");
      if (i >= g.grid[0] || j >= g.grid[1]) throw ConfigError(origin + ": well position " + p + " outside the grid");
      c.wells.positions.push_back({i, j});
    }
    c.wells.total_rate = kv.real("wells.total_rate", c.wells.total_rate);
    c.wells.share_spread = kv.real("wells.share_spread", c.wells.share_spread);
    if (kv.has("wells.bhp_cap_mpa")) c.wells.bhp_cap = kv.real("wells.bhp_cap_mpa", 0) * 1e6;
    if (!(c.wells.share_spread >= 0 && c.wells.share_spread < 1))
      throw ConfigError(origin + ": wells.share_spread must lie in [0, 1)");

    c.realizations = kv.integer("dataset.realizations", c.realizations);
    auto split = [&](const std::string& key, SplitCounts fallback) {
      const auto v = kv.sizes<3>(key, {fallback.train, fallback.val, fallback.test});
      return SplitCounts{v[0], v[1], v[2]};
    };
    c.splits.global = split("dataset.split", c.splits.global);
    c.splits.high = split("dataset.hf_split", c.splits.high);
    for (double t : kv.reals("dataset.timesteps", {})) {
      if (t < 1 || t > double(r.report_years.size()) || t != std::floor(t))
        throw ConfigError(origin + ": dataset.timesteps must be report indices in [1, " +
                          std::to_string(r.report_years.size()) + "]");
      c.timesteps.push_back(std::size_t(t));
    }
    const auto& sg = c.splits.global;
    const auto& sh = c.splits.high;
    if (sg.train + sg.val + sg.test > c.realizations)
      throw ConfigError(origin + ": dataset.split exceeds dataset.realizations");
    if (sh.train > sg.train || sh.val > sg.val || sh.test > sg.test)
      throw ConfigError(origin + ": dataset.hf_split must fit inside dataset.split");

    auto& m = c.model;
    m.width = kv.integer("model.width", m.width);
    m.n_layers = kv.integer("model.layers", m.n_layers);
    m.modes.kept = kv.sizes<3>("model.modes", m.modes.kept);
    m.padding = kv.integer("model.padding", m.padding);
    m.activation = activation_from_string(kv.str("model.activation", "gelu"));
    m.validate();

    const std::size_t batch = kv.integer("train.batch_size", 8);
    const double p = kv.real("train.loss_p", 2.0);
    const bool det = kv.flag("train.deterministic", true);
    auto phase = [&](const std::string& name, TrainConfig t, std::uint64_t tag) {
      t.phase = name;
      t.epochs = kv.integer("train." + name + ".epochs", t.epochs);
      t.learning_rate = kv.real("train." + name + ".learning_rate", t.learning_rate);
      t.batch_size = batch;
      t.loss_p = p;
      t.deterministic = det;
      t.seed = mix_seed(c.seed, tag);
      t.validate();
      return t;
    };
    c.pretrain = phase("pretrain", TrainConfig::pretrain(), 0x505245);
    c.finetune = phase("finetune", TrainConfig::finetune(), 0x46494e);
    c.hf_baseline = phase("hf", TrainConfig::pretrain(), 0x484642);
    c.finetune_hf = kv.integer("train.finetune.n_hf", c.finetune_hf);
    kv.reject_unused();

    std::ostringstream os;
    for (const auto& [k, v] : kv.values())
      if (k != "experiment.pairing" && k != "experiment.root") os << k << '=' << v << '\n';
    c.canonical = os.str();
    c.digest = sha256_hex(c.canonical).substr(0, 16);
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path.string());
  }
};

}  // namespace mfno
