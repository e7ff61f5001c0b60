#pragma once

// Test-set metrics: pressure RMSE, plume-masked saturation error, plume
// footprints, and the per-sample report with percentile summaries.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfno/binary_io.hpp"
#include "mfno/tensor.hpp"

namespace mfno {

inline constexpr double kFootprintThreshold = 0.1;

namespace detail {

template <class T>
void require_pairs(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<T>>& truth, const char* what) {
  if (pred.size() != truth.size())
    throw DataError(std::string(what) + ": " + std::to_string(pred.size()) + " predictions for " +
                    std::to_string(truth.size()) + " truths");
  if (pred.empty()) throw DataError(std::string(what) + ": empty set");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require_same_shape(pred[i].shape(), truth[i].shape(), what);
    if (pred[i].shape() != pred[0].shape()) throw DataError(std::string(what) + ": fields differ in shape");
  }
}

}  // namespace detail

/// Mean squared error of one field pair, per cell.
template <class T>
double mean_squared_error(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::require_same_shape(pred.shape(), truth.shape(), "mean_squared_error");
  if (pred.size() == 0) throw DataError("mean_squared_error: empty field");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred[i]) - double(truth[i]);
    s += d * d;
  }
  return s / double(pred.size());
}

/// sqrt of the squared error summed over every (realization, time) pair and
/// cell, divided by pairs * cells.
template <class T>
double rmse(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<T>>& truth) {
  detail::require_pairs(pred, truth, "rmse");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += mean_squared_error(pred[i], truth[i]);
  return std::sqrt(s / double(pred.size()));
}

/// Mean |pred - truth| over cells where truth > 0; nullopt when the pair has no plume.
template <class T>
std::optional<double> plume_error(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::require_same_shape(pred.shape(), truth.shape(), "plume_error");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (truth[i] > T(0)) {
      s += std::abs(double(pred[i]) - double(truth[i]));
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

/// Per-pair plume-masked mean absolute error, averaged over the pairs that
/// contain plume cells.
template <class T>
double pme(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<T>>& truth) {
  detail::require_pairs(pred, truth, "pme");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (auto e = plume_error(pred[i], truth[i])) {
      s += *e;
      ++n;
    }
  if (n == 0) throw DataError("pme: no plume cells in any true field");
  return s / double(n);
}

/// [nx, ny] map, 1 where any layer of the column exceeds the threshold.
/// Accepts [nx, ny, nz] or [nx, ny, nz, 1].
template <class T>
Tensor<std::uint8_t> plume_footprint(const Tensor<T>& saturation, double threshold = kFootprintThreshold) {
  if (!(threshold > 0 && threshold < 1)) throw DataError("plume_footprint: threshold must lie in (0, 1)");
  if (saturation.rank() < 3 || (saturation.rank() == 4 && saturation.dim(3) != 1) || saturation.rank() > 4)
    throw DataError("plume_footprint: expected [nx, ny, nz] saturation, got " + shape_str(saturation.shape()));
  const std::size_t nx = saturation.dim(0), ny = saturation.dim(1), nz = saturation.dim(2);
  Tensor<std::uint8_t> fp({nx, ny});
  for (std::size_t ij = 0; ij < nx * ny; ++ij)
    for (std::size_t k = 0; k < nz; ++k)
      if (double(saturation[ij * nz + k]) > threshold) {
        fp[ij] = 1;
        break;
      }
  return fp;
}

struct FootprintDifference {
  Tensor<std::int8_t> map;  // 0 agree, +1 predicted only, -1 truth only
  std::size_t agree = 0, false_positive = 0, false_negative = 0;
};

inline FootprintDifference footprint_difference(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth) {
  detail::require_same_shape(pred.shape(), truth.shape(), "footprint_difference");
  FootprintDifference d;
  d.map = Tensor<std::int8_t>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int v = int(pred[i] != 0) - int(truth[i] != 0);
    d.map[i] = std::int8_t(v);
    if (v > 0)
      ++d.false_positive;
    else if (v < 0)
      ++d.false_negative;
    else
      ++d.agree;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Report.

/// Linear interpolation between order statistics (q in [0, 1]).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct EvalRow {
  std::uint32_t realization = 0;
  std::uint32_t timestep = 0;
  double value = 0;  // per-pair RMSE or PME
  double mse = 0;    // per-pair mean squared error (pressure only)
};

struct EvalReport {
  std::string metric;  // "rmse" | "pme"
  std::string units;
  std::vector<EvalRow> rows;
  double aggregate = 0;  // the set-level metric
  double mean = 0;       // mean of row values
  double p05 = 0, p25 = 0, median = 0, p75 = 0, p95 = 0;

  void summarize() {
    if (rows.empty()) throw DataError("EvalReport: no rows");
    std::vector<double> v;
    double s = 0, m = 0;
    for (const auto& r : rows) {
      v.push_back(r.value);
      s += r.value;
      m += r.mse;
    }
    mean = s / double(rows.size());
    aggregate = metric == "rmse" ? std::sqrt(m / double(rows.size())) : mean;
    p05 = percentile(v, 0.05);
    p25 = percentile(v, 0.25);
    median = percentile(v, 0.5);
    p75 = percentile(v, 0.75);
    p95 = percentile(v, 0.95);
  }

  /// Per-timestep mean of row values, for error-versus-time series.
  std::vector<std::pair<std::uint32_t, double>> by_timestep() const {
    std::map<std::uint32_t, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
      acc[r.timestep].first += r.value;
      ++acc[r.timestep].second;
    }
    std::vector<std::pair<std::uint32_t, double>> out;
    for (const auto& [t, a] : acc) out.emplace_back(t, a.first / double(a.second));
    return out;
  }
};

/// Builds the report from parallel lists of (realization, timestep, pred, truth).
template <class T>
EvalReport evaluate_fields(const std::string& metric, const std::vector<std::pair<std::uint32_t, std::uint32_t>>& ids,
                           const std::vector<Tensor<T>>& pred, const std::vector<Tensor<T>>& truth) {
  detail::require_pairs(pred, truth, "evaluate_fields");
  if (ids.size() != pred.size()) throw DataError("evaluate_fields: id list does not match field count");
  EvalReport rep;
  rep.metric = metric;
  if (metric == "rmse") {
    rep.units = "MPa";
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double m = mean_squared_error(pred[i], truth[i]);
      rep.rows.push_back({ids[i].first, ids[i].second, std::sqrt(m), m});
    }
  } else if (metric == "pme") {
    rep.units = "saturation";
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (auto e = plume_error(pred[i], truth[i])) rep.rows.push_back({ids[i].first, ids[i].second, *e, 0});
    if (rep.rows.empty()) throw DataError("pme: no plume cells in any true field");
  } else {
    throw ConfigError("unknown metric '" + metric + "'");
  }
  rep.summarize();
  return rep;
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "# metric=" << r.metric << " units=" << r.units << '\n';
  os << "# aggregate=" << r.aggregate << " mean=" << r.mean << " p05=" << r.p05 << " p25=" << r.p25
     << " median=" << r.median << " p75=" << r.p75 << " p95=" << r.p95 << '\n';
  os << "realization,timestep," << r.metric << '\n';
  for (const auto& row : r.rows) os << row.realization << ',' << row.timestep << ',' << row.value << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// 8-bit grayscale images.

/// Binary PGM of a [rows, cols] map, values mapped linearly from [lo, hi] to 0..255.
template <class T>
std::vector<std::uint8_t> encode_pgm(const Tensor<T>& image, double lo, double hi) {
  if (image.rank() != 2) throw DataError("encode_pgm: expected a 2D map, got " + shape_str(image.shape()));
  const std::size_t rows = image.dim(0), cols = image.dim(1);
  const std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double t = std::clamp((double(image[i]) - lo) / span, 0.0, 1.0);
    out.push_back(std::uint8_t(std::lround(t * 255.0)));
  }
  return out;
}

template <class T>
void write_pgm(const std::filesystem::path& path, const Tensor<T>& image, double lo, double hi) {
  write_file_atomic(path, encode_pgm(image, lo, hi));
}

/// Horizontal slice k of a [nx, ny, nz] or [nx, ny, nz, 1] field.
template <class T>
Tensor<double> layer_slice(const Tensor<T>& f, std::size_t k) {
  if (f.rank() < 3 || k >= f.dim(2)) throw DataError("layer_slice: layer out of range");
  const std::size_t nx = f.dim(0), ny = f.dim(1), nz = f.dim(2);
  Tensor<double> out({nx, ny});
  for (std::size_t ij = 0; ij < nx * ny; ++ij) out[ij] = double(f[ij * nz + k]);
  return out;
}

}  // namespace mfno
