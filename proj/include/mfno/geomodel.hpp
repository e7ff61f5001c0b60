#pragma once

// Synthetic porosity/permeability realizations from stationary Gaussian random
// fields, plus Gaussian-filter + linear-interpolation upscaling.

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>

#include "mfno/binary_io.hpp"
#include "mfno/random.hpp"
#include "mfno/spectral.hpp"
#include "mfno/tensor.hpp"

namespace mfno {

struct GeomodelSpec {
  std::array<std::size_t, 3> grid{32, 32, 8};
  double poro_mean = 0.2;
  double poro_std = 0.05;
  std::array<double, 3> corr_len{6.0, 6.0, 2.0};  // cells
  double logk_slope = 25.0;                        // ln(k / mD) per unit porosity
  double logk_intercept = -0.5;
  double logk_residual_std = 0.4;
  double poro_min = 0.02;
  double poro_max = 0.4;
  std::uint64_t seed = 1;

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
      if (grid[a] == 0) throw ConfigError("geomodel grid extents must be positive");
      if (!(corr_len[a] > 0)) throw ConfigError("geomodel correlation lengths must be positive");
    }
    if (!(poro_min > 0 && poro_max < 1 && poro_min < poro_max))
      throw ConfigError("porosity clamp range must satisfy 0 < min < max < 1");
    if (poro_std < 0 || logk_residual_std < 0) throw ConfigError("standard deviations must be nonnegative");
  }

  /// Canonical text, also the input of the spec digest.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "grid=" << grid[0] << 'x' << grid[1] << 'x' << grid[2] << ";mean=" << poro_mean << ";std=" << poro_std
       << ";corr=" << corr_len[0] << ',' << corr_len[1] << ',' << corr_len[2] << ";a=" << logk_slope
       << ";b=" << logk_intercept << ";res=" << logk_residual_std << ";clamp=" << poro_min << ',' << poro_max
       << ";seed=" << seed;
    return os.str();
  }
  std::string digest() const { return sha256_hex(canonical()); }
};

struct Geomodel {
  Tensor<double> porosity;      // [nx, ny, nz]
  Tensor<double> permeability;  // [nx, ny, nz], mD
  std::string spec_digest;
  std::string config_digest;
  std::uint32_t realization = 0;

  std::array<std::size_t, 3> grid() const { return {porosity.dim(0), porosity.dim(1), porosity.dim(2)}; }
};

namespace detail {

/// Smallest 2,3,5-smooth length >= n.
inline std::size_t smooth_length(std::size_t n) {
  for (;; ++n) {
    std::size_t r = n;
    for (std::size_t f : {2, 3, 5})
      while (r % f == 0) r /= f;
    if (r == 1) return n;
  }
}

}  // namespace detail

/// Zero-mean, unit-variance stationary field with Gaussian covariance
/// exp(-(r/l)^2) per axis, synthesized on a padded periodic domain and cropped.
inline Tensor<double> gaussian_random_field(const std::array<std::size_t, 3>& grid,
                                            const std::array<double, 3>& corr_len, std::uint64_t seed) {
  std::array<std::size_t, 3> m{};
  for (std::size_t a = 0; a < 3; ++a)
    m[a] = detail::smooth_length(grid[a] + static_cast<std::size_t>(std::ceil(3.0 * corr_len[a])));
  ComplexTensor<double> w({m[0], m[1], m[2]});
  Rng rng(seed);
  for (auto& z : w.data()) z = {rng.normal(), 0.0};
  w = dft_complex(std::move(w), {0, 1, 2}, false);

  // Spectral density of the covariance, normalized to unit mean so the field has unit variance.
  std::array<std::vector<double>, 3> axis_density;
  for (std::size_t a = 0; a < 3; ++a) {
    axis_density[a].resize(m[a]);
    double sum = 0;
    for (std::size_t f = 0; f < m[a]; ++f) {
      const double sf = f <= m[a] / 2 ? double(f) : double(f) - double(m[a]);
      const double k = 2.0 * std::numbers::pi * sf / double(m[a]);
      axis_density[a][f] = std::exp(-k * k * corr_len[a] * corr_len[a] / 4.0);
      sum += axis_density[a][f];
    }
    for (auto& d : axis_density[a]) d *= double(m[a]) / sum;
  }
  for (std::size_t i = 0; i < m[0]; ++i)
    for (std::size_t j = 0; j < m[1]; ++j)
      for (std::size_t k = 0; k < m[2]; ++k)
        w[(i * m[1] + j) * m[2] + k] *= std::sqrt(axis_density[0][i] * axis_density[1][j] * axis_density[2][k]);
  w = dft_complex(std::move(w), {0, 1, 2}, true);

  const double inv_n = 1.0 / double(m[0] * m[1] * m[2]);
  Tensor<double> out({grid[0], grid[1], grid[2]});
  for (std::size_t i = 0; i < grid[0]; ++i)
    for (std::size_t j = 0; j < grid[1]; ++j)
      for (std::size_t k = 0; k < grid[2]; ++k)
        out[(i * grid[1] + j) * grid[2] + k] = w[(i * m[1] + j) * m[2] + k].real() * inv_n;
  return out;
}

inline Geomodel grf_generate(const GeomodelSpec& spec, std::uint32_t realization) {
  spec.validate();
  const auto x = gaussian_random_field(spec.grid, spec.corr_len, mix_seed(spec.seed, 2 * std::uint64_t(realization)));
  const auto r =
      gaussian_random_field(spec.grid, spec.corr_len, mix_seed(spec.seed, 2 * std::uint64_t(realization) + 1));
  Geomodel g;
  g.porosity = Tensor<double>(x.shape());
  g.permeability = Tensor<double>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double phi = std::clamp(spec.poro_mean + spec.poro_std * x[i], spec.poro_min, spec.poro_max);
    g.porosity[i] = phi;
    g.permeability[i] = std::exp(spec.logk_slope * phi + spec.logk_intercept + spec.logk_residual_std * r[i]);
  }
  g.spec_digest = spec.digest();
  g.realization = realization;
  return g;
}

// ---------------------------------------------------------------------------
// Upscaling.

namespace detail {

/// Normalized Gaussian taps with std 0.5 * factor, truncated at 3 sigma.
inline std::vector<double> gaussian_taps(std::size_t factor) {
  const double sigma = 0.5 * double(factor);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0;
  for (int d = -radius; d <= radius; ++d) sum += taps[d + radius] = std::exp(-0.5 * d * d / (sigma * sigma));
  for (auto& t : taps) t /= sum;
  return taps;
}

inline void filter_axis(Tensor<double>& f, std::size_t axis, std::size_t factor) {
  const auto taps = gaussian_taps(factor);
  const int radius = int(taps.size() / 2);
  const Shape& s = f.shape();
  const std::size_t n = s[axis];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t outer = f.size() / (n * inner);
  std::vector<double> line(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      double* base = f.data().data() + o * n * inner + in;
      for (std::size_t i = 0; i < n; ++i) line[i] = base[i * inner];
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (int d = -radius; d <= radius; ++d) {
          const long j = std::clamp<long>(long(i) + d, 0, long(n) - 1);
          acc += taps[d + radius] * line[j];
        }
        base[i * inner] = acc;
      }
    }
}

/// Linear interpolation along `axis` onto coarse centres at fine coordinate (I + 0.5) f - 0.5.
inline Tensor<double> sample_axis(const Tensor<double>& f, std::size_t axis, std::size_t factor) {
  Shape s = f.shape();
  const std::size_t n = s[axis], nc = n / factor;
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t outer = f.size() / (n * inner);
  s[axis] = nc;
  Tensor<double> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t I = 0; I < nc; ++I) {
      const double pos = (double(I) + 0.5) * double(factor) - 0.5;
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, n - 1);
      const double t = pos - double(lo);
      for (std::size_t in = 0; in < inner; ++in)
        out[(o * nc + I) * inner + in] =
            (1.0 - t) * f[(o * n + lo) * inner + in] + t * f[(o * n + hi) * inner + in];
    }
  return out;
}

}  // namespace detail

/// Gaussian low-pass (std 0.5 * factor, 3 sigma, edge-clamped) then linear
/// interpolation onto coarse cell centres; factor 1 leaves an axis untouched.
inline Tensor<double> upscale(const Tensor<double>& field, const std::array<std::size_t, 3>& factors) {
  if (field.rank() != 3) throw DataError("upscale: expected a [nx, ny, nz] field, got " + shape_str(field.shape()));
  for (std::size_t a = 0; a < 3; ++a) {
    if (factors[a] < 1) throw ConfigError("upscale: factors must be >= 1");
    if (field.dim(a) % factors[a] != 0)
      throw ConfigError("upscale: extent " + std::to_string(field.dim(a)) + " on axis " + std::to_string(a) +
                        " is not divisible by factor " + std::to_string(factors[a]));
  }
  Tensor<double> f = field;
  for (std::size_t a = 0; a < 3; ++a)
    if (factors[a] > 1) detail::filter_axis(f, a, factors[a]);
  for (std::size_t a = 0; a < 3; ++a)
    if (factors[a] > 1) f = detail::sample_axis(f, a, factors[a]);
  return f;
}

/// Coarse geomodel: porosity and log-permeability are upscaled, then k = exp(.).
inline Geomodel upscale_geomodel(const Geomodel& fine, const std::array<std::size_t, 3>& factors) {
  Geomodel c;
  c.porosity = upscale(fine.porosity, factors);
  Tensor<double> logk(fine.permeability.shape());
  for (std::size_t i = 0; i < logk.size(); ++i) logk[i] = std::log(fine.permeability[i]);
  auto lc = upscale(logk, factors);
  c.permeability = Tensor<double>(lc.shape());
  for (std::size_t i = 0; i < lc.size(); ++i) c.permeability[i] = std::exp(lc[i]);
  c.spec_digest = fine.spec_digest;
  c.config_digest = fine.config_digest;
  c.realization = fine.realization;
  return c;
}

// ---------------------------------------------------------------------------
// "GEOM" files.

inline constexpr std::uint32_t kGeomVersion = 1;

inline std::vector<std::uint8_t> encode_geomodel(const Geomodel& g) {
  ByteWriter w;
  w.magic("GEOM");
  w.u32(kGeomVersion);
  w.u32(g.realization);
  w.str(g.spec_digest);
  w.str(g.config_digest);
  write_tensor_block(w, g.porosity);
  write_tensor_block(w, g.permeability);
  w.crc();
  return w.take();
}

inline void write_geomodel(const std::filesystem::path& path, const Geomodel& g) {
  write_file_atomic(path, encode_geomodel(g));
}

inline Geomodel read_geomodel(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Geomodel g;
  parse_framed(bytes, "GEOM", path.string(), [&](ByteReader& r) {
    const auto version = r.u32();
    if (version != kGeomVersion)
      throw FileError(FileFault::unknown_version, path.string(), "version " + std::to_string(version));
    g.realization = r.u32();
    g.spec_digest = r.str();
    g.config_digest = r.str();
    g.porosity = read_tensor_block<double>(r);
    g.permeability = read_tensor_block<double>(r);
  });
  if (g.porosity.shape() != g.permeability.shape() || g.porosity.rank() != 3)
    throw DataError("geomodel " + path.string() + ": inconsistent field shapes");
  return g;
}

}  // namespace mfno
