#pragma once

// Experiment stages behind the command-line driver. Artifacts live under the
// configured root:
//
//   geomodels/<fid>/rNNNN.geom     sims/<fid>/rNNNN.snap, rNNNN.csv
//   datasets/<fid>/<target>/       samples and manifest.txt
//   checkpoints/<target>/          lf.mfck, mf<k>[-decorrelated].mfck, hf[-decorrelated].mfck
//   logs/, reports/
//
// <fid> is "lf", "hf", or "hf-decorrelated" for the decorrelated pairing.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <omp.h>

#include "mfno/checkpoint.hpp"
#include "mfno/config.hpp"
#include "mfno/dataset.hpp"
#include "mfno/geomodel.hpp"
#include "mfno/metrics.hpp"
#include "mfno/simulator.hpp"
#include "mfno/training.hpp"

namespace mfno::pipeline {

namespace fs = std::filesystem;

inline void require_fidelity(const std::string& fid) {
  if (fid != "lf" && fid != "hf") throw ConfigError("fidelity must be lf or hf, got '" + fid + "'");
}

/// Directory tag of a fidelity level under the configured pairing.
inline std::string fidelity_tag(const ExperimentConfig& c, const std::string& fid) {
  require_fidelity(fid);
  return fid == "hf" && c.pairing == "decorrelated" ? "hf-decorrelated" : fid;
}

inline std::string rname(std::uint32_t r) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "r%04u", r);
  return buf;
}

struct Paths {
  fs::path root;
  explicit Paths(const ExperimentConfig& c) : root(c.root) {}
  fs::path geomodel(const std::string& tag, std::uint32_t r) const { return root / "geomodels" / tag / (rname(r) + ".geom"); }
  fs::path snapshots(const std::string& tag, std::uint32_t r) const { return root / "sims" / tag / (rname(r) + ".snap"); }
  fs::path run_csv(const std::string& tag, std::uint32_t r) const { return root / "sims" / tag / (rname(r) + ".csv"); }
  fs::path dataset(const std::string& tag, const std::string& target) const { return root / "datasets" / tag / target; }
  fs::path manifest(const std::string& tag, const std::string& target) const {
    return dataset(tag, target) / "manifest.txt";
  }
  fs::path checkpoints(const std::string& target) const { return root / "checkpoints" / target; }
  fs::path logs() const { return root / "logs"; }
  fs::path reports() const { return root / "reports"; }
};

// ---------------------------------------------------------------------------
// Realization plan.

struct Plan {
  std::map<std::uint32_t, Split> low;   // every realization
  std::map<std::uint32_t, Split> high;  // realizations that also get a high-fidelity run
  std::uint64_t split_seed = 0;

  std::vector<std::uint32_t> ids(const std::string& fid) const {
    std::vector<std::uint32_t> out;
    for (const auto& [r, s] : fid == "hf" ? high : low)
      if (s != Split::unused) out.push_back(r);
    return out;
  }
  const std::map<std::uint32_t, Split>& splits(const std::string& fid) const { return fid == "hf" ? high : low; }
  std::vector<std::uint32_t> members(const std::string& fid, Split s) const {
    std::vector<std::uint32_t> out;
    for (const auto& [r, sp] : splits(fid))
      if (sp == s) out.push_back(r);
    return out;
  }
};

/// Global split over all realizations, then a seeded high-fidelity subset of each split.
inline Plan make_plan(const ExperimentConfig& c) {
  Plan p;
  p.split_seed = mix_seed(c.seed, 0x53504c4954);
  std::vector<std::uint32_t> all(c.realizations);
  for (std::uint32_t r = 0; r < c.realizations; ++r) all[r] = r;
  p.low = assign_splits(all, p.split_seed, c.splits.global);
  const std::array<std::pair<Split, std::size_t>, 3> quota{
      {{Split::train, c.splits.high.train}, {Split::val, c.splits.high.val}, {Split::test, c.splits.high.test}}};
  for (const auto& [split, n] : quota) {
    std::vector<std::uint32_t> pool;
    for (const auto& [r, s] : p.low)
      if (s == split) pool.push_back(r);
    Rng rng(mix_seed(p.split_seed, 0x4846 + std::uint64_t(split)));
    rng.shuffle(pool);
    for (std::size_t i = 0; i < n; ++i) p.high[pool[i]] = split;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Geomodels and wells.

inline GeomodelSpec decorrelated_spec(const ExperimentConfig& c) {
  GeomodelSpec s = c.geomodel;
  for (auto& l : s.corr_len) l *= c.decorrelated_corr_scale;
  s.seed = mix_seed(c.seed, 0x4445434f);
  return s;
}

/// Geomodel of one realization at a fidelity; the low-fidelity model is always
/// the upscale of the correlated high-fidelity field.
inline Geomodel make_geomodel(const ExperimentConfig& c, const std::string& fid, std::uint32_t r) {
  Geomodel g;
  if (fid == "hf" && c.pairing == "decorrelated")
    g = grf_generate(decorrelated_spec(c), r);
  else if (fid == "hf")
    g = grf_generate(c.geomodel, r);
  else
    g = upscale_geomodel(grf_generate(c.geomodel, r), c.upscale);
  g.config_digest = c.digest;
  return g;
}

/// Fully perforated vertical injectors; the total rate is split by seeded per-realization shares.
inline std::vector<sim::WellSpec> make_wells(const ExperimentConfig& c, const std::string& fid, std::uint32_t r) {
  require_fidelity(fid);
  const auto grid = c.grid(fid);
  const std::size_t fx = fid == "hf" ? 1 : c.upscale[0], fy = fid == "hf" ? 1 : c.upscale[1];
  const std::size_t n = c.wells.positions.size();
  Rng rng(mix_seed(mix_seed(c.seed, 0x57454c4c), r));
  std::vector<double> share(n);
  double total = 0;
  for (auto& s : share) total += s = 1.0 + c.wells.share_spread * (2.0 * rng.uniform() - 1.0);
  std::vector<sim::WellSpec> wells;
  for (std::size_t w = 0; w < n; ++w) {
    sim::WellSpec ws;
    ws.name = "I" + std::to_string(w + 1);
    ws.i = c.wells.positions[w][0] / fx;
    ws.j = c.wells.positions[w][1] / fy;
    ws.k_top = 0;
    ws.k_bottom = grid[2] - 1;
    ws.schedule = {{0.0, c.wells.total_rate * share[w] / total}};
    ws.bhp_cap = c.wells.bhp_cap;
    wells.push_back(ws);
  }
  return wells;
}

inline sim::ReservoirConfig make_reservoir(const ExperimentConfig& c, const std::string& fid, const Geomodel& g) {
  sim::ReservoirConfig rc = c.reservoir;
  rc.grid = c.grid(fid);
  if (fid == "lf")
    for (std::size_t a = 0; a < 3; ++a) rc.cell_size[a] *= double(c.upscale[a]);
  rc.porosity = g.porosity;
  rc.permeability = g.permeability;
  return rc;
}

inline std::vector<std::size_t> timesteps(const ExperimentConfig& c) {
  if (!c.timesteps.empty()) return c.timesteps;
  std::vector<std::size_t> t(c.reservoir.report_years.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = i + 1;
  return t;
}

inline void check_digest(const std::string& found, const std::string& expected, const std::string& what, bool force) {
  if (found != expected && !force)
    throw DataError(what + " was produced by config " + found + ", current config is " + expected +
                    " (use --force to override)");
}

/// Runs body(i) for i in [0, n) on `jobs` threads; the first failure by index is rethrown.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& body) {
  std::vector<std::exception_ptr> errors(n);
  const int threads = jobs > 0 ? jobs : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct StageTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

/// Appends "stage,seconds,threads" to logs/timings.csv.
inline void record_timing(const ExperimentConfig& c, const std::string& stage, double seconds, int jobs) {
  const auto path = Paths(c).logs() / "timings.csv";
  fs::create_directories(path.parent_path());
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "stage,seconds,threads\n";
  out << stage << ',' << seconds << ',' << (jobs > 0 ? jobs : omp_get_max_threads()) << '\n';
}

// ---------------------------------------------------------------------------
// Stages.

inline std::size_t gen_geomodels(const ExperimentConfig& c, const std::string& fid, int jobs) {
  const StageTimer timer;
  const auto plan = make_plan(c);
  const auto ids = plan.ids(fid);
  const auto tag = fidelity_tag(c, fid);
  const Paths paths(c);
  parallel_for(ids.size(), jobs, [&](std::size_t i) { write_geomodel(paths.geomodel(tag, ids[i]), make_geomodel(c, fid, ids[i])); });
  record_timing(c, "gen-geomodels-" + tag, timer.seconds(), jobs);
  return ids.size();
}

struct SimulateReport {
  std::size_t runs = 0;
  double worst_mass_balance = 0;
};

inline SimulateReport simulate(const ExperimentConfig& c, const std::string& fid, int jobs, bool force) {
  const StageTimer timer;
  const auto plan = make_plan(c);
  const auto ids = plan.ids(fid);
  const auto tag = fidelity_tag(c, fid);
  const Paths paths(c);
  std::vector<double> balance(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const auto r = ids[i];
    const auto g = read_geomodel(paths.geomodel(tag, r));
    check_digest(g.config_digest, c.digest, paths.geomodel(tag, r).string(), force);
    const auto wells = make_wells(c, fid, r);
    sim::SimulationResult res;
    try {
      res = sim::run_simulation(make_reservoir(c, fid, g), wells);
    } catch (const NumericError& e) {
      throw NumericError(tag + " realization " + std::to_string(r) + ": " + e.what());
    }
    sim::SnapshotFile f;
    f.realization = r;
    f.config_digest = c.digest;
    f.snapshots = res.snapshots;
    sim::write_snapshots(paths.snapshots(tag, r), f);
    write_file_atomic(paths.run_csv(tag, r), sim::run_summary_csv(res, wells));
    balance[i] = res.summary.mass_balance_error;
  });
  record_timing(c, "simulate-" + tag, timer.seconds(), jobs);
  SimulateReport rep;
  rep.runs = ids.size();
  for (double b : balance) rep.worst_mass_balance = std::max(rep.worst_mass_balance, b);
  return rep;
}

/// Normalization ranges from the low-fidelity training geomodels, shared by both fidelities.
inline NormalizationStats experiment_stats(const ExperimentConfig& c, const Plan& plan, bool force) {
  const Paths paths(c);
  std::vector<Geomodel> train;
  for (auto r : plan.members("lf", Split::train)) {
    train.push_back(read_geomodel(paths.geomodel("lf", r)));
    check_digest(train.back().config_digest, c.digest, paths.geomodel("lf", r).string(), force);
  }
  return compute_stats(train, c.reservoir.report_years.back(), make_wells(c, "lf", 0));
}

inline DatasetManifest build_dataset(const ExperimentConfig& c, const std::string& fid, Target target, int jobs,
                                     bool force) {
  const StageTimer timer;
  const auto plan = make_plan(c);
  const auto tag = fidelity_tag(c, fid);
  const Paths paths(c);
  const auto stats = experiment_stats(c, plan, force);
  const auto dir = paths.dataset(tag, to_string(target));
  if (fs::exists(dir))
    for (const auto& de : fs::directory_iterator(dir))
      if (de.path().extension() == ".mfno") fs::remove(de.path());
  fs::create_directories(dir);
  const auto ids = plan.ids(fid);
  const auto steps = timesteps(c);
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const auto r = ids[i];
    const auto g = read_geomodel(paths.geomodel(tag, r));
    const auto snaps = sim::read_snapshots(paths.snapshots(tag, r));
    check_digest(g.config_digest, c.digest, paths.geomodel(tag, r).string(), force);
    check_digest(snaps.config_digest, c.digest, paths.snapshots(tag, r).string(), force);
    const auto wells = make_wells(c, fid, r);
    const auto initial = sim::Reservoir(make_reservoir(c, fid, g), wells).initial_state().pressure;
    for (auto t : steps) {
      if (t > snaps.snapshots.size())
        throw DataError(paths.snapshots(tag, r).string() + " has no report " + std::to_string(t));
      const auto& snap = snaps.snapshots[t - 1];
      Sample s;
      s.input = assemble_features(g, wells, stats, snap.time_years);
      s.target = target_field(target, snap, initial);
      s.target_name = to_string(target);
      s.realization = r;
      s.timestep = std::uint32_t(t);
      char name[32];
      std::snprintf(name, sizeof name, "%s_t%02zu.mfno", rname(r).c_str(), t);
      write_sample(dir / name, s);
    }
  });
  DatasetManifest header;
  header.fidelity = fid;
  header.grid = c.grid(fid);
  header.target = to_string(target);
  header.pairing = c.pairing;
  header.config_digest = c.digest;
  header.stats = stats;
  auto m = build_manifest(dir, plan.splits(fid), header);
  m.split_seed = plan.split_seed;
  write_manifest(paths.manifest(tag, to_string(target)), m);
  record_timing(c, "build-dataset-" + tag + "-" + to_string(target), timer.seconds(), jobs);
  return m;
}

inline DatasetManifest load_manifest(const ExperimentConfig& c, const std::string& fid, Target target, bool force) {
  const auto path = Paths(c).manifest(fidelity_tag(c, fid), to_string(target));
  if (!fs::exists(path)) throw DataError("missing manifest " + path.string() + " (run build-dataset first)");
  auto m = read_manifest(path);
  check_digest(m.config_digest, c.digest, path.string(), force);
  if (m.target != to_string(target)) throw DataError(path.string() + " holds target " + m.target);
  return m;
}

/// Manifest entries of the given realizations (all timesteps).
inline std::vector<std::size_t> entries_of(const DatasetManifest& m, const std::vector<std::uint32_t>& reals) {
  const std::set<std::uint32_t> want(reals.begin(), reals.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    if (want.count(m.entries[i].realization)) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Training stages.

inline std::string suffix(const ExperimentConfig& c) { return c.pairing == "decorrelated" ? "-decorrelated" : ""; }

inline fs::path lf_checkpoint(const ExperimentConfig& c, Target t) { return Paths(c).checkpoints(to_string(t)) / "lf.mfck"; }
inline fs::path mf_checkpoint(const ExperimentConfig& c, Target t, std::size_t n_hf) {
  return Paths(c).checkpoints(to_string(t)) / ("mf" + std::to_string(n_hf) + suffix(c) + ".mfck");
}
inline fs::path hf_checkpoint(const ExperimentConfig& c, Target t) {
  return Paths(c).checkpoints(to_string(t)) / ("hf" + suffix(c) + ".mfck");
}

struct PhaseOutcome {
  Checkpoint checkpoint;
  fs::path path;
  TrainResult result;
};

namespace detail {

inline PhaseOutcome run_phase(const ExperimentConfig& c, Target target, const DatasetManifest& m,
                              const std::vector<std::uint32_t>& train_reals, const FnoParams<float>& start,
                              TrainConfig tc, int jobs, const fs::path& out, Provenance prov) {
  const StageTimer timer;
  tc.jobs = jobs;
  const auto log_path = Paths(c).logs() / (out.stem().string() + "-" + to_string(target) + ".csv");
  fs::remove(log_path);
  auto res = train_phase(c.model, start, manifest_set(m, entries_of(m, train_reals)),
                         manifest_set(m, m.indices(Split::val)), tc,
                         [&](const EpochLog& e) { append_training_log(log_path, e); });
  Checkpoint ck;
  ck.config = c.model;
  ck.params = res.best_params;
  ck.stats = m.stats;
  ck.adam = res.best_adam;
  prov.phase = tc.phase;
  prov.epoch = std::uint32_t(res.best_epoch);
  prov.val_loss = res.best_val_loss;
  prov.seed = tc.seed;
  prov.manifest_digest = manifest_digest(m);
  prov.config_digest = c.digest;
  prov.target = to_string(target);
  ck.provenance = prov;
  write_checkpoint(out, ck);
  record_timing(c, out.stem().string() + "-" + to_string(target), timer.seconds(), jobs);
  return {std::move(ck), out, std::move(res)};
}

}  // namespace detail

inline FnoConfig model_config(const ExperimentConfig& c) {
  FnoConfig f = c.model;
  f.in_channels = kFeatureChannels;
  f.out_channels = 1;
  return f;
}

inline PhaseOutcome pretrain(const ExperimentConfig& c, Target target, int jobs, bool force) {
  const auto m = load_manifest(c, "lf", target, force);
  const auto start = init_params<float>(model_config(c), mix_seed(c.seed, 0x494e4954));
  return detail::run_phase(c, target, m, m.realizations(Split::train), start, c.pretrain, jobs, lf_checkpoint(c, target),
                           {});
}

/// Seeded subset of n_hf high-fidelity training realizations.
inline std::vector<std::uint32_t> finetune_subset(const ExperimentConfig& c, const DatasetManifest& m, std::size_t n_hf) {
  auto pool = m.realizations(Split::train);
  if (n_hf == 0 || n_hf > pool.size())
    throw ConfigError("--n-hf " + std::to_string(n_hf) + " must lie in [1, " + std::to_string(pool.size()) + "]");
  Rng rng(mix_seed(c.seed, 0x53554253 + n_hf));
  rng.shuffle(pool);
  pool.resize(n_hf);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline void check_compatible(const Checkpoint& ck, const DatasetManifest& m, const std::string& what, bool force) {
  if (!ck.provenance.target.empty() && ck.provenance.target != m.target)
    throw DataError(what + " predicts " + ck.provenance.target + ", manifest holds " + m.target);
  if (!(ck.stats == m.stats) && !force)
    throw DataError(what + " was normalized with different feature ranges than the manifest (use --force to override)");
  check_digest(ck.provenance.config_digest, m.config_digest, what, force);
}

inline PhaseOutcome finetune(const ExperimentConfig& c, Target target, const fs::path& from, std::size_t n_hf, int jobs,
                             bool force) {
  const auto m = load_manifest(c, "hf", target, force);
  const auto parent = read_checkpoint(from);
  check_compatible(parent, m, from.string(), force);
  if (!(parent.config == c.model) && !force) throw ConfigError(from.string() + " has a different model configuration");
  Provenance prov;
  prov.parent_digest = checkpoint_digest(parent);
  prov.subset = finetune_subset(c, m, n_hf);
  return detail::run_phase(c, target, m, prov.subset, parent.params, c.finetune, jobs, mf_checkpoint(c, target, n_hf),
                           prov);
}

inline PhaseOutcome train_hf(const ExperimentConfig& c, Target target, int jobs, bool force) {
  const auto m = load_manifest(c, "hf", target, force);
  const auto start = init_params<float>(model_config(c), mix_seed(c.seed, 0x494e4954));
  return detail::run_phase(c, target, m, m.realizations(Split::train), start, c.hf_baseline, jobs,
                           hf_checkpoint(c, target), {});
}

// ---------------------------------------------------------------------------
// Evaluation and export.

inline std::string metric_for(const std::string& target) { return target == "pressure" ? "rmse" : "pme"; }

struct Evaluation {
  EvalReport report;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ids;
  std::vector<Tensor<float>> pred, truth;
};

/// Scores a checkpoint on one split of a manifest: RMSE for pressure, PME for saturation.
inline Evaluation evaluate(const Checkpoint& ck, const DatasetManifest& m, Split split, bool force, int jobs = 0,
                           const std::string& what = "checkpoint") {
  check_compatible(ck, m, what, force);
  const auto idx = m.indices(split);
  if (idx.empty()) throw DataError("manifest has no " + to_string(split) + " samples");
  Evaluation ev;
  ev.ids.resize(idx.size());
  ev.pred.resize(idx.size());
  ev.truth.resize(idx.size());
  parallel_for(idx.size(), jobs, [&](std::size_t i) {
    auto s = m.load(idx[i]);
    ev.pred[i] = forward(ck.config, ck.params, s.input);
    ev.truth[i] = std::move(s.target);
    ev.ids[i] = {s.realization, s.timestep};
  });
  ev.report = evaluate_fields(metric_for(m.target), ev.ids, ev.pred, ev.truth);
  return ev;
}

// "PRED" prediction files.
inline constexpr std::uint32_t kPredictionVersion = 1;

struct Prediction {
  std::string target_name;
  std::uint32_t realization = 0, timestep = 0;
  Tensor<float> field;
};

inline void write_prediction(const fs::path& path, const Prediction& p) {
  ByteWriter w;
  w.magic("PRED");
  w.u32(kPredictionVersion);
  w.str(p.target_name);
  w.u32(p.realization);
  w.u32(p.timestep);
  write_tensor_block(w, p.field);
  w.crc();
  write_file_atomic(path, w.bytes());
}

inline Prediction read_prediction(const fs::path& path) {
  const auto bytes = read_file(path);
  Prediction p;
  parse_framed(bytes, "PRED", path.string(), [&](ByteReader& r) {
    const auto version = r.u32();
    if (version != kPredictionVersion)
      throw FileError(FileFault::unknown_version, path.string(), "version " + std::to_string(version));
    p.target_name = r.str();
    p.realization = r.u32();
    p.timestep = r.u32();
    p.field = read_tensor_block<float>(r);
  });
  return p;
}

inline Prediction predict(const Checkpoint& ck, const Sample& s) {
  if (s.input.rank() != 4 || s.input.dim(3) != ck.config.in_channels)
    throw DataError("predict: sample input " + shape_str(s.input.shape()) + " does not match the checkpoint");
  return {ck.provenance.target.empty() ? s.target_name : ck.provenance.target, s.realization, s.timestep,
          forward(ck.config, ck.params, s.input)};
}

/// Error-versus-time series: timestep,value.
inline std::string timestep_series_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "timestep," << r.metric << '\n';
  for (const auto& [t, v] : r.by_timestep()) os << t << ',' << v << '\n';
  return os.str();
}

/// Heatmaps of one prediction against its truth: middle-layer slices of both
/// fields and their absolute difference, plus saturation footprints and their difference.
inline std::vector<fs::path> export_field_plots(const fs::path& out, const std::string& stem, const std::string& target,
                                                const Tensor<float>& pred, const Tensor<float>& truth) {
  std::vector<fs::path> written;
  const std::size_t k = pred.dim(2) / 2;
  const auto ps = layer_slice(pred, k), ts = layer_slice(truth, k);
  double lo = INFINITY, hi = -INFINITY;
  for (const auto* t : {&ps, &ts})
    for (double v : t->storage()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  Tensor<double> diff(ps.shape());
  double dmax = 0;
  for (std::size_t i = 0; i < diff.size(); ++i) dmax = std::max(dmax, diff[i] = std::abs(ps[i] - ts[i]));
  auto put = [&](const std::string& name, const auto& img, double a, double b) {
    written.push_back(out / (stem + "_" + name + ".pgm"));
    write_pgm(written.back(), img, a, b);
  };
  put("pred_k" + std::to_string(k), ps, lo, hi);
  put("true_k" + std::to_string(k), ts, lo, hi);
  put("absdiff_k" + std::to_string(k), diff, 0.0, dmax);
  if (target == "saturation") {
    const auto fp = plume_footprint(pred), ft = plume_footprint(truth);
    const auto d = footprint_difference(fp, ft);
    Tensor<double> shifted(d.map.shape());
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] = double(d.map[i]);
    put("footprint_pred", fp, 0.0, 1.0);
    put("footprint_true", ft, 0.0, 1.0);
    put("footprint_diff", shifted, -1.0, 1.0);  // black truth-only, gray agree, white predicted-only
    std::ostringstream os;
    os << "agree,false_positive,false_negative\n" << d.agree << ',' << d.false_positive << ',' << d.false_negative << '\n';
    written.push_back(out / (stem + "_footprint_counts.csv"));
    write_file_atomic(written.back(), os.str());
  }
  return written;
}

}  // namespace mfno::pipeline
