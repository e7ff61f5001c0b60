#pragma once

// Relative-loss training of the operator: Adam, lazy batch streaming with
// memory accounting, and best-by-validation selection.

#include <omp.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfno/autodiff.hpp"
#include "mfno/checkpoint.hpp"
#include "mfno/dataset.hpp"
#include "mfno/fno.hpp"

namespace mfno {

/// ||truth - pred||_p / ||truth||_p.
template <class T>
double relative_lp_loss(const Tensor<T>& truth, const Tensor<T>& pred, double p = 2.0) {
  detail::require_same_shape(truth.shape(), pred.shape(), "relative_lp_loss");
  const double denom = double(lp_norm(truth, p));
  if (!(denom > 0)) throw DataError("relative_lp_loss: truth has zero norm (degenerate sample)");
  Tensor<T> diff(truth.shape());
  for (std::size_t i = 0; i < truth.size(); ++i) diff[i] = truth[i] - pred[i];
  return double(lp_norm(diff, p)) / denom;
}

struct TrainConfig {
  std::string phase = "pretrain";
  std::size_t epochs = 400;
  double learning_rate = 0.01;
  std::size_t batch_size = 8;
  double loss_p = 2.0;
  std::uint64_t seed = 0;
  bool deterministic = true;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int jobs = 0;  // worker threads for per-sample passes; 0 = runtime default

  static TrainConfig pretrain() { return {}; }
  static TrainConfig finetune() {
    TrainConfig c;
    c.phase = "finetune";
    c.epochs = 200;
    c.learning_rate = 0.005;
    return c;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("training epochs must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(loss_p >= 1)) throw ConfigError("loss exponent p must be >= 1");
  }
};

template <class T>
AdamState<T> adam_init(const FnoParams<T>& params) {
  AdamState<T> s;
  for (auto& [name, t] : named_parameters(params)) {
    s.m[name] = Tensor<T>(t.shape());
    s.v[name] = Tensor<T>(t.shape());
  }
  return s;
}

/// One bias-corrected Adam update of every named tensor that has a gradient.
template <class T>
void adam_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, const TrainConfig& cfg) {
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(state.step)), c2 = 1.0 - std::pow(b2, double(state.step));
  for (auto& [name, w] : params) {
    auto g = grads.find(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    detail::require_same_shape(w.shape(), m.shape(), "adam_step");
    if (g != grads.end()) detail::require_same_shape(w.shape(), g->second.shape(), "adam_step");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g == grads.end() ? 0.0 : double(g->second[i]);
      const double mi = b1 * double(m[i]) + (1 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1 - b2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      w[i] = T(double(w[i]) - cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Sample sources and batch streaming.

/// Random-access sample collection; `load` may hit the disk.
struct SampleSet {
  std::size_t size = 0;
  std::function<Sample(std::size_t)> load;
};

inline SampleSet manifest_set(const DatasetManifest& m, std::vector<std::size_t> entries) {
  auto shared = std::make_shared<const DatasetManifest>(m);
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(entries));
  return {idx->size(), [shared, idx](std::size_t i) { return shared->load(idx->at(i)); }};
}

inline SampleSet memory_set(std::vector<Sample> samples) {
  auto shared = std::make_shared<const std::vector<Sample>>(std::move(samples));
  return {shared->size(), [shared](std::size_t i) { return shared->at(i); }};
}

/// Counts bytes of sample payload held by live batches.
class MemoryMeter {
 public:
  void acquire(std::size_t b) {
    const auto now = live_.fetch_add(b) + b;
    auto hw = high_.load();
    while (now > hw && !high_.compare_exchange_weak(hw, now)) {
    }
  }
  void release(std::size_t b) { live_.fetch_sub(b); }
  std::size_t live() const { return live_.load(); }
  std::size_t high_water() const { return high_.load(); }
  void reset() {
    live_ = 0;
    high_ = 0;
  }

 private:
  std::atomic<std::size_t> live_{0}, high_{0};
};

struct Batch {
  std::vector<Sample> samples;
  std::vector<std::size_t> indices;  // positions in the sample set

  Batch() = default;
  Batch(const Batch&) = delete;
  Batch& operator=(const Batch&) = delete;
  Batch(Batch&& o) noexcept { *this = std::move(o); }
  Batch& operator=(Batch&& o) noexcept {
    release();
    samples = std::move(o.samples);
    indices = std::move(o.indices);
    meter_ = o.meter_;
    bytes_ = o.bytes_;
    o.meter_ = nullptr;
    o.bytes_ = 0;
    return *this;
  }
  ~Batch() { release(); }

  void account(MemoryMeter* meter) {
    meter_ = meter;
    bytes_ = 0;
    for (const auto& s : samples) bytes_ += s.bytes();
    if (meter_) meter_->acquire(bytes_);
  }
  std::size_t bytes() const { return bytes_; }

 private:
  void release() {
    if (meter_) meter_->release(bytes_);
    meter_ = nullptr;
    bytes_ = 0;
  }
  MemoryMeter* meter_ = nullptr;
  std::size_t bytes_ = 0;
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x45504f43ULL + epoch));
  rng.shuffle(order);
  return order;
}

/// Lazily loads batches in an epoch-seeded order; at most the current batch and
/// one prefetched batch are resident. The final partial batch is emitted.
class BatchStream {
 public:
  BatchStream(SampleSet set, std::size_t batch_size, std::uint64_t seed, std::size_t epoch, MemoryMeter* meter = nullptr,
              bool shuffle = true)
      : set_(std::move(set)), batch_(batch_size), meter_(meter) {
    if (batch_ == 0) throw ConfigError("batch size must be >= 1");
    if (shuffle) {
      order_ = epoch_order(set_.size, seed, epoch);
    } else {
      order_.resize(set_.size);
      for (std::size_t i = 0; i < set_.size; ++i) order_[i] = i;
    }
  }

  std::size_t batches() const { return (order_.size() + batch_ - 1) / batch_; }

  /// Next batch, or nullopt at the end of the epoch.
  std::optional<Batch> next() {
    if (!prefetched_) prefetched_ = load(pos_);
    if (prefetched_->samples.empty()) return std::nullopt;
    Batch current = std::move(*prefetched_);
    pos_ += current.samples.size();
    prefetched_ = load(pos_);  // the following batch stays resident alongside the current one
    return current;
  }

 private:
  Batch load(std::size_t from) const {
    Batch b;
    for (std::size_t i = from; i < std::min(from + batch_, order_.size()); ++i) {
      b.indices.push_back(order_[i]);
      b.samples.push_back(set_.load(order_[i]));
    }
    b.account(meter_);
    return b;
  }

  SampleSet set_;
  std::size_t batch_;
  MemoryMeter* meter_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::optional<Batch> prefetched_;
};

inline BatchStream stream_batches(const DatasetManifest& m, std::vector<std::size_t> indices, std::size_t batch_size,
                                  std::uint64_t seed, std::size_t epoch, MemoryMeter* meter = nullptr) {
  for (auto i : indices)
    if (i >= m.entries.size()) throw DataError("stream_batches: index " + std::to_string(i) + " outside manifest");
  return BatchStream(manifest_set(m, std::move(indices)), batch_size, seed, epoch, meter);
}

// ---------------------------------------------------------------------------
// Training phase.

struct EpochLog {
  std::size_t epoch = 0;
  std::string phase;
  double train_loss = 0, val_loss = 0, wall_seconds = 0;
};

struct TrainResult {
  FnoParams<float> best_params;
  AdamState<float> best_adam;
  std::size_t best_epoch = 0;
  double best_val_loss = INFINITY;
  std::vector<EpochLog> log;
  std::size_t memory_high_water = 0;
  std::size_t batch_bytes = 0;
};

struct SampleGrad {
  double loss = 0;
  ParamGrads<float> grads;
};

/// Loss and parameter gradients of one sample.
inline SampleGrad sample_gradient(const FnoConfig& cfg, const FnoParams<float>& params, const Sample& s, double p) {
  ad::Tape<float> tape;
  auto vars = bind_parameters(tape, params, {}, true);
  auto in = tape.leaf(s.input, false);
  auto out = fno_graph(tape, cfg, vars, in);
  auto loss = ad::relative_lp_loss(tape, s.target, out, p);
  tape.backward(loss);
  SampleGrad g;
  g.loss = double(tape.value(loss)[0]);
  for (auto& [name, var] : vars.by_name) {
    const auto* gv = tape.grad(var);
    g.grads[name] = gv ? *gv : Tensor<float>(tape.value(var).shape());
  }
  return g;
}

/// Mean per-sample relative loss over a set (no gradients).
inline double evaluate_loss(const FnoConfig& cfg, const FnoParams<float>& params, const SampleSet& set, double p,
                            std::size_t batch_size, int jobs = 0) {
  if (set.size == 0) throw DataError("evaluate_loss: empty dataset");
  BatchStream stream(set, batch_size, 0, 0, nullptr, false);
  double total = 0;
  while (auto batch = stream.next()) {
    std::vector<double> losses(batch->samples.size());
    const int threads = jobs > 0 ? jobs : omp_get_max_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::size_t i = 0; i < losses.size(); ++i) {
      const auto& s = batch->samples[i];
      losses[i] = relative_lp_loss(s.target, forward(cfg, params, s.input), p);
    }
    for (double l : losses) total += l;  // fixed order
  }
  return total / double(set.size);
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from `start` and returns the parameters with minimum validation loss.
inline TrainResult train_phase(const FnoConfig& cfg, const FnoParams<float>& start, const SampleSet& train,
                               const SampleSet& val, const TrainConfig& tc, const EpochCallback& on_epoch = {},
                               std::optional<AdamState<float>> adam = std::nullopt) {
  tc.validate();
  if (train.size == 0) throw DataError("train_phase: empty training set");
  if (val.size == 0) throw DataError("train_phase: empty validation set");
  auto named_vec = named_parameters(start);
  std::map<std::string, Tensor<float>> named(named_vec.begin(), named_vec.end());
  AdamState<float> state = adam ? *adam : adam_init(start);
  TrainResult res;
  MemoryMeter meter;
  const int threads = tc.jobs > 0 ? tc.jobs : omp_get_max_threads();
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchStream stream(train, tc.batch_size, tc.seed, epoch, &meter);
    double loss_sum = 0;
    std::size_t batch_no = 0;
    while (auto batch = stream.next()) {
      ++batch_no;
      res.batch_bytes = std::max(res.batch_bytes, batch->bytes());
      const auto params = params_from_named(cfg, named);
      std::vector<SampleGrad> per(batch->samples.size());
      std::vector<std::string> failures(per.size());
#pragma omp parallel for schedule(static) num_threads(threads)
      for (std::size_t i = 0; i < per.size(); ++i) {
        try {
          per[i] = sample_gradient(cfg, params, batch->samples[i], tc.loss_p);
        } catch (const std::exception& e) {
          failures[i] = e.what();
        }
      }
      for (std::size_t i = 0; i < per.size(); ++i) {
        if (!failures[i].empty() || !std::isfinite(per[i].loss)) {
          const auto& s = batch->samples[i];
          throw NumericError("training " + tc.phase + " epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch_no) + " (realization " + std::to_string(s.realization) +
                             ", timestep " + std::to_string(s.timestep) + "): " +
                             (failures[i].empty() ? "non-finite loss" : failures[i]));
        }
      }
      // fixed-order reduction to the gradient of the batch-mean loss
      ParamGrads<float> total = std::move(per[0].grads);
      double batch_loss = per[0].loss;
      for (std::size_t i = 1; i < per.size(); ++i) {
        batch_loss += per[i].loss;
        for (auto& [name, g] : per[i].grads) {
          auto& t = total.at(name);
          for (std::size_t k = 0; k < g.size(); ++k) t[k] += g[k];
        }
      }
      const float inv = 1.0f / float(per.size());
      for (auto& [name, g] : total)
        for (auto& v : g.storage()) v *= inv;
      loss_sum += batch_loss;
      adam_step(named, total, state, tc);
    }
    EpochLog log;
    log.epoch = epoch;
    log.phase = tc.phase;
    log.train_loss = loss_sum / double(train.size);
    const auto params = params_from_named(cfg, named);
    log.val_loss = evaluate_loss(cfg, params, val, tc.loss_p, tc.batch_size, tc.jobs);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(log.val_loss))
      throw NumericError("training " + tc.phase + " epoch " + std::to_string(epoch) + ": non-finite validation loss");
    if (log.val_loss < res.best_val_loss) {
      res.best_val_loss = log.val_loss;
      res.best_epoch = epoch;
      res.best_params = params;
      res.best_adam = state;
    }
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  res.memory_high_water = meter.high_water();
  return res;
}

inline void append_training_log(const std::filesystem::path& path, const EpochLog& e) {
  const bool fresh = !std::filesystem::exists(path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw FileError(FileFault::io, path.string(), "cannot append training log");
  if (fresh) out << "epoch,phase,train_loss,val_loss,wall_seconds\n";
  out.precision(9);
  out << e.epoch << ',' << e.phase << ',' << e.train_loss << ',' << e.val_loss << ',' << e.wall_seconds << '\n';
}

}  // namespace mfno
