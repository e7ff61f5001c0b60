#pragma once

// Immiscible, slightly compressible two-phase (water / injected gas) finite
// volume simulator on a Cartesian grid: implicit pressure, explicit upwind
// saturation transport. Cells are indexed like the [nx, ny, nz] tensors; layer
// k = 0 is the top of the reservoir.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfno/binary_io.hpp"
#include "mfno/linear_solver.hpp"
#include "mfno/tensor.hpp"

namespace mfno::sim {

inline constexpr double kMilliDarcy = 9.869233e-16;  // m^2
inline constexpr double kSecondsPerYear = 365.25 * 86400.0;

enum Face6 { x_minus = 0, x_plus, y_minus, y_plus, z_minus, z_plus };

struct ReservoirConfig {
  std::array<std::size_t, 3> grid{32, 32, 8};
  std::array<double, 3> cell_size{50.0, 50.0, 10.0};  // m
  Tensor<double> porosity;                             // [nx, ny, nz]
  Tensor<double> permeability;                         // [nx, ny, nz], mD
  double mu_w = 5e-4, mu_g = 5e-5;                     // Pa s
  double rho_w = 1000.0, rho_g = 700.0;                // kg/m^3
  double n_w = 2.0, n_g = 2.0;
  double s_wr = 0.2, s_gr = 0.0;
  double c_r = 4.64e-9;  // 1/Pa
  double kv_kh = 1.0;    // vertical / horizontal permeability
  bool gravity = false;
  double g = 9.81;
  double p0 = 15e6;          // Pa at the datum depth
  double datum_depth = 1000.0;  // m, depth of the top face
  std::array<bool, 6> constant_pressure{};  // per face, Face6 order; false = closed
  std::vector<double> report_years{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  double dt_initial_days = 1.0;
  double dt_max_days = 60.0;
  double dt_growth = 1.5;
  double dt_min_seconds = 1.0;
  double cfl_max = 0.9;
  int upwind_iterations = 3;
  double solver_tol = 1e-8;

  std::size_t cells() const { return grid[0] * grid[1] * grid[2]; }

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a)
      if (grid[a] == 0 || !(cell_size[a] > 0)) throw ConfigError("reservoir grid and cell sizes must be positive");
    const Shape shape{grid[0], grid[1], grid[2]};
    if (porosity.shape() != shape || permeability.shape() != shape)
      throw ConfigError("reservoir property fields do not match grid " + shape_str(shape));
    if (!(mu_w > 0 && mu_g > 0 && rho_w > 0 && rho_g > 0)) throw ConfigError("viscosities and densities must be positive");
    if (!(s_wr >= 0 && s_gr >= 0 && s_wr + s_gr < 1)) throw ConfigError("residual saturations must satisfy 0 <= Swr + Sgr < 1");
    if (n_w < 1 || n_g < 1) throw ConfigError("Brooks-Corey exponents must be >= 1");
    if (c_r < 0) throw ConfigError("rock compressibility must be nonnegative");
    if (!(kv_kh > 0)) throw ConfigError("vertical permeability ratio must be positive");
    for (std::size_t i = 0; i < cells(); ++i) {
      if (!(permeability[i] > 0)) throw ConfigError("permeability must be positive (cell " + std::to_string(i) + ")");
      if (!(porosity[i] > 0 && porosity[i] < 1)) throw ConfigError("porosity must lie in (0,1) (cell " + std::to_string(i) + ")");
    }
    for (std::size_t r = 0; r < report_years.size(); ++r)
      if (!(report_years[r] > 0) || (r > 0 && report_years[r] <= report_years[r - 1]))
        throw ConfigError("report times must be positive and increasing");
  }
};

struct RateSegment {
  double start_years = 0;
  double rate = 0;  // m^3/s of injected phase at reservoir conditions
};

struct WellSpec {
  std::string name = "W";
  std::size_t i = 0, j = 0, k_top = 0, k_bottom = 0;
  std::vector<RateSegment> schedule;
  std::optional<double> bhp_cap;  // Pa
  double radius = 0.1;            // m

  double rate_at(double t_seconds) const {
    double r = 0;
    for (const auto& s : schedule)
      if (t_seconds >= s.start_years * kSecondsPerYear) r = s.rate;
    return r;
  }

  /// Scheduled cumulative volume injected by time t.
  double planned_cumulative(double t_seconds) const {
    double total = 0;
    for (std::size_t s = 0; s < schedule.size(); ++s) {
      const double a = schedule[s].start_years * kSecondsPerYear;
      const double b = s + 1 < schedule.size() ? schedule[s + 1].start_years * kSecondsPerYear : t_seconds;
      const double end = std::min(b, t_seconds);
      if (end > a) total += schedule[s].rate * (end - a);
    }
    return total;
  }
};

struct SimState {
  Tensor<double> pressure;    // Pa
  Tensor<double> saturation;  // injected phase
  std::vector<double> cumulative;
  double time = 0;  // s
};

struct RelPerm {
  double krw, krg;
};

inline RelPerm brooks_corey_relperm(double s_g, const ReservoirConfig& c) {
  const double se = std::clamp((s_g - c.s_gr) / (1.0 - c.s_wr - c.s_gr), 0.0, 1.0);
  auto power = [](double x, double n) { return n == 2.0 ? x * x : std::pow(x, n); };
  return {power(1.0 - se, c.n_w), power(se, c.n_g)};
}

inline double face_permeability(double ka, double kb) { return 2.0 * ka * kb / (ka + kb); }

struct Face {
  std::size_t a, b;
  double trans;   // m^3 (k A / distance, harmonic)
  double ddepth;  // depth(a) - depth(b)
  bool vertical;
};

struct BoundaryFace {
  std::size_t cell;
  double trans;
  double pressure;  // Pa, held fixed
  double ddepth;    // depth(cell) - depth(face)
  bool vertical;
};

struct WellControl {
  bool bhp = false;
  double rate = 0;
  double bhp_value = 0;
};

struct PressureSystem {
  CsrMatrix matrix;
  std::vector<double> rhs;   // for the increment p_new - p_old
  std::vector<double> base;  // p_old
};

/// Upstream selector per face and phase: 1 when the first cell (or the interior cell of a boundary face) is upstream.
struct Upwind {
  std::vector<std::uint8_t> w, g, bw, bg;
  bool operator==(const Upwind&) const = default;
};

struct StepFluxes {
  std::vector<double> fw, fg;    // internal faces, a -> b
  std::vector<double> bfw, bfg;  // boundary faces, cell -> outside
  std::vector<double> well_q;    // per cell injected volume rate
  std::vector<double> well_rate; // per well
};

class Reservoir {
 public:
  Reservoir(ReservoirConfig config, std::vector<WellSpec> wells) : cfg_(std::move(config)), wells_(std::move(wells)) {
    cfg_.validate();
    build_geometry();
    build_wells();
    lipschitz();
  }

  const ReservoirConfig& config() const { return cfg_; }
  const std::vector<WellSpec>& wells() const { return wells_; }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<BoundaryFace>& boundary_faces() const { return bfaces_; }
  std::size_t cells() const { return cfg_.cells(); }
  double pore_volume0(std::size_t c) const { return pv0_[c]; }
  double depth(std::size_t c) const { return depth_[c]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * cfg_.grid[1] + j) * cfg_.grid[2] + k;
  }
  const std::vector<std::pair<std::size_t, double>>& well_allocation(std::size_t w) const { return alloc_[w]; }
  const std::vector<double>& well_index(std::size_t w) const { return wi_[w]; }

  double lambda_w(double s) const { return brooks_corey_relperm(s, cfg_).krw / cfg_.mu_w; }
  double lambda_g(double s) const { return brooks_corey_relperm(s, cfg_).krg / cfg_.mu_g; }

  /// Pore volume at pressure p relative to the initial state.
  double pore_volume(std::size_t c, double p) const { return pv0_[c] * (1.0 + cfg_.c_r * (p - p_init_[c])); }

  SimState initial_state() const {
    SimState s;
    const Shape shape{cfg_.grid[0], cfg_.grid[1], cfg_.grid[2]};
    s.pressure = Tensor<double>(shape, p_init_);
    s.saturation = Tensor<double>(shape);
    s.cumulative.assign(wells_.size(), 0.0);
    return s;
  }

  const std::vector<double>& initial_pressure() const { return p_init_; }

  Upwind upwind_from(const std::vector<double>& p) const {
    Upwind u;
    u.w.resize(faces_.size());
    u.g.resize(faces_.size());
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const auto& fc = faces_[f];
      const double dp = p[fc.a] - p[fc.b];
      u.w[f] = dp - cfg_.rho_w * gacc() * fc.ddepth >= 0;
      u.g[f] = dp - cfg_.rho_g * gacc() * fc.ddepth >= 0;
    }
    u.bw.resize(bfaces_.size());
    u.bg.resize(bfaces_.size());
    for (std::size_t f = 0; f < bfaces_.size(); ++f) {
      const auto& bf = bfaces_[f];
      const double dp = p[bf.cell] - bf.pressure;
      u.bw[f] = dp - cfg_.rho_w * gacc() * bf.ddepth >= 0;
      u.bg[f] = dp - cfg_.rho_g * gacc() * bf.ddepth >= 0;
    }
    return u;
  }

  /// Rate control for every well at time t.
  std::vector<WellControl> rate_controls(double t) const {
    std::vector<WellControl> c(wells_.size());
    for (std::size_t w = 0; w < wells_.size(); ++w) c[w].rate = wells_[w].rate_at(t);
    return c;
  }

  PressureSystem assemble(const SimState& s, double dt, const Upwind& up, const std::vector<WellControl>& ctl) const {
    const std::size_t n = cells();
    const auto& S = s.saturation;
    const auto& P = s.pressure;
    std::vector<double> diag(n, 0.0), rhs(n, 0.0);
    std::vector<std::vector<std::pair<std::size_t, double>>> off(n);
    if (cfg_.c_r > 0 && dt > 0)
      for (std::size_t c = 0; c < n; ++c) diag[c] += pv0_[c] * cfg_.c_r / dt;
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const auto& fc = faces_[f];
      const double lw = lambda_w(S[up.w[f] ? fc.a : fc.b]);
      const double lg = lambda_g(S[up.g[f] ? fc.a : fc.b]);
      const double coef = fc.trans * (lw + lg);
      const double grav = fc.trans * gacc() * fc.ddepth * (lw * cfg_.rho_w + lg * cfg_.rho_g);
      const double flux_old = coef * (P[fc.a] - P[fc.b]) - grav;
      diag[fc.a] += coef;
      diag[fc.b] += coef;
      off[fc.a].emplace_back(fc.b, -coef);
      off[fc.b].emplace_back(fc.a, -coef);
      rhs[fc.a] -= flux_old;
      rhs[fc.b] += flux_old;
    }
    for (std::size_t f = 0; f < bfaces_.size(); ++f) {
      const auto& bf = bfaces_[f];
      const double lw = up.bw[f] ? lambda_w(S[bf.cell]) : lambda_w(0.0);
      const double lg = up.bg[f] ? lambda_g(S[bf.cell]) : lambda_g(0.0);
      const double coef = bf.trans * (lw + lg);
      const double grav = bf.trans * gacc() * bf.ddepth * (lw * cfg_.rho_w + lg * cfg_.rho_g);
      diag[bf.cell] += coef;
      rhs[bf.cell] -= coef * (P[bf.cell] - bf.pressure) - grav;
    }
    for (std::size_t w = 0; w < wells_.size(); ++w) {
      if (ctl[w].bhp) {
        for (std::size_t l = 0; l < alloc_[w].size(); ++l) {
          const std::size_t c = alloc_[w][l].first;
          const double coef = wi_[w][l] * (lambda_w(S[c]) + lambda_g(S[c]));
          diag[c] += coef;
          rhs[c] += coef * (ctl[w].bhp_value - P[c]);
        }
      } else {
        for (const auto& [c, frac] : alloc_[w]) rhs[c] += ctl[w].rate * frac;
      }
    }
    PressureSystem sys;
    sys.matrix.n = n;
    sys.matrix.row_ptr.assign(1, 0);
    for (std::size_t c = 0; c < n; ++c) {
      auto& row = off[c];
      row.emplace_back(c, diag[c]);
      std::sort(row.begin(), row.end());
      for (const auto& [col, v] : row) {
        if (!std::isfinite(v)) throw NumericError("pressure system: non-finite coefficient at cell " + std::to_string(c));
        sys.matrix.col.push_back(col);
        sys.matrix.val.push_back(v);
      }
      sys.matrix.row_ptr.push_back(sys.matrix.col.size());
      if (!std::isfinite(rhs[c])) throw NumericError("pressure system: non-finite right-hand side at cell " + std::to_string(c));
    }
    sys.rhs = std::move(rhs);
    sys.base = P.storage();
    return sys;
  }

  /// `guess` is a full pressure field to start from (e.g. the previous upwind pass).
  std::vector<double> solve(const PressureSystem& sys, const std::vector<double>* guess = nullptr) const {
    std::vector<double> x0;
    if (guess) {
      x0 = *guess;
      for (std::size_t c = 0; c < x0.size(); ++c) x0[c] -= sys.base[c];
    }
    auto res = conjugate_gradient(sys.matrix, sys.rhs, cfg_.solver_tol, 0, std::move(x0),
                                  Preconditioner::incomplete_cholesky);
    std::vector<double> p = sys.base;
    for (std::size_t c = 0; c < p.size(); ++c) p[c] += res.x[c];
    last_cg_iterations_ = res.iterations;
    return p;
  }

  /// Phase fluxes at the new pressure with the mobilities of the old saturation.
  StepFluxes fluxes(const SimState& s, const std::vector<double>& p, const Upwind& up,
                    const std::vector<WellControl>& ctl) const {
    const auto& S = s.saturation;
    StepFluxes fx;
    fx.fw.resize(faces_.size());
    fx.fg.resize(faces_.size());
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const auto& fc = faces_[f];
      const double dp = p[fc.a] - p[fc.b];
      fx.fw[f] = fc.trans * lambda_w(S[up.w[f] ? fc.a : fc.b]) * (dp - cfg_.rho_w * gacc() * fc.ddepth);
      fx.fg[f] = fc.trans * lambda_g(S[up.g[f] ? fc.a : fc.b]) * (dp - cfg_.rho_g * gacc() * fc.ddepth);
    }
    fx.bfw.resize(bfaces_.size());
    fx.bfg.resize(bfaces_.size());
    for (std::size_t f = 0; f < bfaces_.size(); ++f) {
      const auto& bf = bfaces_[f];
      const double dp = p[bf.cell] - bf.pressure;
      const double lw = up.bw[f] ? lambda_w(S[bf.cell]) : lambda_w(0.0);
      const double lg = up.bg[f] ? lambda_g(S[bf.cell]) : lambda_g(0.0);
      fx.bfw[f] = bf.trans * lw * (dp - cfg_.rho_w * gacc() * bf.ddepth);
      fx.bfg[f] = bf.trans * lg * (dp - cfg_.rho_g * gacc() * bf.ddepth);
    }
    fx.well_q.assign(cells(), 0.0);
    fx.well_rate.assign(wells_.size(), 0.0);
    for (std::size_t w = 0; w < wells_.size(); ++w) {
      for (std::size_t l = 0; l < alloc_[w].size(); ++l) {
        const std::size_t c = alloc_[w][l].first;
        const double q = ctl[w].bhp
                             ? wi_[w][l] * (lambda_w(S[c]) + lambda_g(S[c])) * (ctl[w].bhp_value - p[c])
                             : ctl[w].rate * alloc_[w][l].second;
        fx.well_q[c] += q;
        fx.well_rate[w] += q;
      }
    }
    return fx;
  }

  /// True when the phase directions implied by the fluxes differ from `up`.
  bool upwind_changed(const StepFluxes& fx, const Upwind& up) const {
    auto flipped = [](double flux, std::uint8_t upstream_first) {
      return (flux > 0 && !upstream_first) || (flux < 0 && upstream_first);
    };
    for (std::size_t f = 0; f < faces_.size(); ++f)
      if (flipped(fx.fw[f], up.w[f]) || flipped(fx.fg[f], up.g[f])) return true;
    for (std::size_t f = 0; f < bfaces_.size(); ++f)
      if (flipped(fx.bfw[f], up.bw[f]) || flipped(fx.bfg[f], up.bg[f])) return true;
    return false;
  }

  /// Largest CFL number of an explicit step of length dt with these fluxes.
  double cfl_number(const std::vector<double>& p, const StepFluxes& fx, double dt) const {
    std::vector<double> out(cells(), 0.0), grav(cells(), 0.0);
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const auto& fc = faces_[f];
      const double ft = fx.fw[f] + fx.fg[f];
      (ft > 0 ? out[fc.a] : out[fc.b]) += std::abs(ft);
      if (cfg_.gravity && fc.vertical) {
        const double gb = fc.trans * gacc() * std::abs(fc.ddepth) * std::abs(cfg_.rho_w - cfg_.rho_g) * lip_grav_;
        grav[fc.a] += gb;
        grav[fc.b] += gb;
      }
    }
    for (std::size_t f = 0; f < bfaces_.size(); ++f) {
      const double ft = fx.bfw[f] + fx.bfg[f];
      if (ft > 0) out[bfaces_[f].cell] += ft;
    }
    double worst = 0;
    for (std::size_t c = 0; c < cells(); ++c)
      worst = std::max(worst, dt * (out[c] * lip_frac_ + grav[c]) / pore_volume(c, p[c]));
    return worst;
  }

  struct TransportResult {
    Tensor<double> saturation;
    double clamp_volume = 0;
    double boundary_gas_out = 0;  // volume
  };

  TransportResult transport(const SimState& s, const std::vector<double>& p, const StepFluxes& fx, double dt) const {
    const std::size_t n = cells();
    std::vector<double> net(n, 0.0);  // gas volume rate into cell
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      net[faces_[f].a] -= fx.fg[f];
      net[faces_[f].b] += fx.fg[f];
    }
    TransportResult r;
    for (std::size_t f = 0; f < bfaces_.size(); ++f) {
      net[bfaces_[f].cell] -= fx.bfg[f];
      r.boundary_gas_out += dt * fx.bfg[f];
    }
    r.saturation = Tensor<double>(s.saturation.shape());
    for (std::size_t c = 0; c < n; ++c) {
      const double pv_old = pore_volume(c, s.pressure[c]);
      const double pv_new = pore_volume(c, p[c]);
      double sn = (pv_old * s.saturation[c] + dt * (net[c] + fx.well_q[c])) / pv_new;
      if (sn < 0) {
        r.clamp_volume += -sn * pv_new;
        sn = 0;
      } else if (sn > 1) {
        r.clamp_volume += (sn - 1) * pv_new;
        sn = 1;
      }
      r.saturation[c] = sn;
    }
    return r;
  }

  /// Bottomhole pressure implied by rate control: q = sum_l WI_l lambda_l (p_bh - p_l).
  double implied_bhp(std::size_t w, const SimState& s, const std::vector<double>& p, double rate) const {
    double num = rate, den = 0;
    for (std::size_t l = 0; l < alloc_[w].size(); ++l) {
      const std::size_t c = alloc_[w][l].first;
      const double coef = wi_[w][l] * (lambda_w(s.saturation[c]) + lambda_g(s.saturation[c]));
      num += coef * p[c];
      den += coef;
    }
    return num / den;
  }

  std::size_t last_cg_iterations() const { return last_cg_iterations_; }
  double fractional_flow_lipschitz() const { return lip_frac_; }

 private:
  double gacc() const { return cfg_.gravity ? cfg_.g : 0.0; }

  void build_geometry() {
    const auto [nx, ny, nz] = cfg_.grid;
    const auto [dx, dy, dz] = cfg_.cell_size;
    const std::size_t n = cells();
    pv0_.resize(n);
    depth_.resize(n);
    p_init_.resize(n);
    std::vector<double> k(n);
    for (std::size_t c = 0; c < n; ++c) {
      pv0_[c] = cfg_.porosity[c] * dx * dy * dz;
      depth_[c] = cfg_.datum_depth + (double(c % nz) + 0.5) * dz;
      p_init_[c] = hydrostatic(depth_[c]);
      k[c] = cfg_.permeability[c] * kMilliDarcy;
    }
    const std::array<double, 3> area{dy * dz, dx * dz, dx * dy};
    const std::array<double, 3> len{dx, dy, dz};
    const std::array<std::size_t, 3> stride{ny * nz, nz, 1};
    for (std::size_t i = 0; i < nx; ++i)
      for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t l = 0; l < nz; ++l) {
          const std::size_t c = index(i, j, l);
          const std::array<std::size_t, 3> ijk{i, j, l};
          for (std::size_t a = 0; a < 3; ++a) {
            if (ijk[a] + 1 < cfg_.grid[a]) {
              const std::size_t d = c + stride[a];
              const double t = area[a] * face_permeability(k[c], k[d]) * (a == 2 ? cfg_.kv_kh : 1.0) / len[a];
              faces_.push_back({c, d, t, depth_[c] - depth_[d], a == 2});
            }
            for (int side = 0; side < 2; ++side) {
              const bool at_edge = side == 0 ? ijk[a] == 0 : ijk[a] + 1 == cfg_.grid[a];
              if (!at_edge || !cfg_.constant_pressure[2 * a + side]) continue;
              const double face_depth = a == 2 ? depth_[c] + (side == 0 ? -0.5 : 0.5) * dz : depth_[c];
              const double kf = k[c] * (a == 2 ? cfg_.kv_kh : 1.0);
              bfaces_.push_back({c, area[a] * kf / (0.5 * len[a]), hydrostatic(face_depth), depth_[c] - face_depth, a == 2});
            }
          }
        }
  }

  double hydrostatic(double d) const { return cfg_.p0 + (cfg_.gravity ? cfg_.rho_w * cfg_.g * (d - cfg_.datum_depth) : 0.0); }

  void build_wells() {
    const auto [dx, dy, dz] = cfg_.cell_size;
    for (const auto& w : wells_) {
      if (w.i >= cfg_.grid[0] || w.j >= cfg_.grid[1] || w.k_top > w.k_bottom || w.k_bottom >= cfg_.grid[2])
        throw ConfigError("well " + w.name + " completion lies outside the grid");
      for (const auto& seg : w.schedule)
        if (seg.rate < 0) throw ConfigError("well " + w.name + " has a negative rate");
      std::vector<std::pair<std::size_t, double>> alloc;
      std::vector<double> wi;
      double total = 0;
      const double r_eq = 0.2 * dx;
      for (std::size_t l = w.k_top; l <= w.k_bottom; ++l) {
        const std::size_t c = index(w.i, w.j, l);
        const double kh = cfg_.permeability[c] * dz;
        alloc.emplace_back(c, kh);
        total += kh;
        wi.push_back(2.0 * std::numbers::pi * cfg_.permeability[c] * kMilliDarcy * dz / std::log(r_eq / w.radius));
      }
      for (auto& a : alloc) a.second /= total;
      alloc_.push_back(std::move(alloc));
      wi_.push_back(std::move(wi));
    }
  }

  void lipschitz() {
    // max |df/dS| of the fractional flow and of the buoyancy mobility product
    const int m = 4000;
    auto frac = [&](double s) {
      const double lw = lambda_w(s), lg = lambda_g(s);
      return lw + lg > 0 ? lg / (lw + lg) : 0.0;
    };
    auto buoy = [&](double s) {
      const double lw = lambda_w(s), lg = lambda_g(s);
      return lw + lg > 0 ? lw * lg / (lw + lg) : 0.0;
    };
    lip_frac_ = lip_grav_ = 0;
    for (int i = 0; i < m; ++i) {
      const double a = double(i) / m, b = double(i + 1) / m;
      lip_frac_ = std::max(lip_frac_, std::abs(frac(b) - frac(a)) * m);
      lip_grav_ = std::max(lip_grav_, std::abs(buoy(b) - buoy(a)) * m);
    }
  }

  ReservoirConfig cfg_;
  std::vector<WellSpec> wells_;
  std::vector<double> pv0_, depth_, p_init_;
  std::vector<Face> faces_;
  std::vector<BoundaryFace> bfaces_;
  std::vector<std::vector<std::pair<std::size_t, double>>> alloc_;
  std::vector<std::vector<double>> wi_;
  double lip_frac_ = 0, lip_grav_ = 0;
  mutable std::size_t last_cg_iterations_ = 0;
};

// ---------------------------------------------------------------------------
// Operation-level entry points.

inline PressureSystem assemble_pressure_system(const Reservoir& r, const SimState& s, double dt) {
  return r.assemble(s, dt, r.upwind_from(s.pressure.storage()), r.rate_controls(s.time));
}

inline std::vector<double> solve_pressure(const Reservoir& r, const PressureSystem& sys) { return r.solve(sys); }

struct SaturationStep {
  SimState state;
  double cfl = 0;
  bool accepted = false;
  double clamp_volume = 0;
  double boundary_gas_out = 0;
};

/// Explicit transport over dt using phase fluxes from `pressure`; rejected (state untouched) when the CFL bound fails.
inline SaturationStep advance_saturation(const Reservoir& r, const SimState& s, const std::vector<double>& pressure,
                                         double dt, const Upwind& up, const std::vector<WellControl>& ctl) {
  SaturationStep out;
  const auto fx = r.fluxes(s, pressure, up, ctl);
  out.cfl = r.cfl_number(pressure, fx, dt);
  if (out.cfl > r.config().cfl_max) {
    out.state = s;
    return out;
  }
  auto tr = r.transport(s, pressure, fx, dt);
  out.state.pressure = Tensor<double>(s.pressure.shape(), pressure);
  out.state.saturation = std::move(tr.saturation);
  out.state.cumulative = s.cumulative;
  for (std::size_t w = 0; w < fx.well_rate.size(); ++w) out.state.cumulative[w] += dt * std::max(0.0, fx.well_rate[w]);
  out.state.time = s.time + dt;
  out.clamp_volume = tr.clamp_volume;
  out.boundary_gas_out = tr.boundary_gas_out;
  out.accepted = true;
  return out;
}

inline SaturationStep advance_saturation(const Reservoir& r, const SimState& s, const std::vector<double>& pressure,
                                         double dt) {
  return advance_saturation(r, s, pressure, dt, r.upwind_from(s.pressure.storage()), r.rate_controls(s.time));
}

struct Snapshot {
  double time_years = 0;
  Tensor<double> pressure;
  Tensor<double> saturation;
  std::vector<double> cumulative;
  std::vector<double> bhp;  // per well at the report time
};

struct RunSummary {
  std::size_t accepted_steps = 0, rejected_steps = 0, upwind_resolves = 0, bhp_switches = 0;
  double clamp_volume = 0;
  double boundary_gas_out = 0;
  double initial_gas_volume = 0, final_gas_volume = 0;
  std::vector<double> cumulative, planned, shortfall;
  double mass_balance_error = 0;  // relative to injected volume
  std::vector<std::string> log;
};

struct SimulationResult {
  std::vector<Snapshot> snapshots;
  RunSummary summary;
};

inline double gas_volume(const Reservoir& r, const SimState& s) {
  double v = 0;
  for (std::size_t c = 0; c < r.cells(); ++c) v += r.pore_volume(c, s.pressure[c]) * s.saturation[c];
  return v;
}

namespace detail {

struct StepOutcome {
  SaturationStep step;
  std::vector<WellControl> controls;
  std::vector<double> bhp;
  double dt_cfl = 0;
};

/// Pressure solve (with upwind re-iteration and BHP switching) followed by transport.
inline StepOutcome try_step(const Reservoir& r, const SimState& s, double dt, RunSummary& summary) {
  const auto& cfg = r.config();
  auto ctl = r.rate_controls(s.time);
  Upwind up = r.upwind_from(s.pressure.storage());
  std::vector<double> p;
  StepFluxes fx;
  for (int pass = 0; pass < 2; ++pass) {
    for (int it = 0; it < std::max(1, cfg.upwind_iterations); ++it) {
      p = r.solve(r.assemble(s, dt, up, ctl), p.empty() ? nullptr : &p);
      fx = r.fluxes(s, p, up, ctl);
      if (!r.upwind_changed(fx, up) || it + 1 == std::max(1, cfg.upwind_iterations)) break;
      up = r.upwind_from(p);
      ++summary.upwind_resolves;
    }
    bool switched = false;
    for (std::size_t w = 0; w < r.wells().size(); ++w) {
      const auto& well = r.wells()[w];
      if (!well.bhp_cap || ctl[w].bhp || ctl[w].rate <= 0) continue;
      if (r.implied_bhp(w, s, p, ctl[w].rate) > *well.bhp_cap) {
        ctl[w].bhp = true;
        ctl[w].bhp_value = *well.bhp_cap;
        switched = true;
        ++summary.bhp_switches;
      }
    }
    if (!switched) break;
  }
  StepOutcome out;
  out.controls = ctl;
  out.step = advance_saturation(r, s, p, dt, up, ctl);
  out.dt_cfl = out.step.cfl > 0 ? dt * cfg.cfl_max / out.step.cfl : std::numeric_limits<double>::infinity();
  out.bhp.resize(r.wells().size());
  for (std::size_t w = 0; w < r.wells().size(); ++w)
    out.bhp[w] = ctl[w].bhp ? ctl[w].bhp_value : r.implied_bhp(w, s, p, ctl[w].rate);
  return out;
}

}  // namespace detail

/// IMPES driver with dt ramping to a cap, CFL rejection by halving and exact report times.
inline SimulationResult run_simulation(const Reservoir& r) {
  const auto& cfg = r.config();
  SimulationResult res;
  auto& sum = res.summary;
  SimState s = r.initial_state();
  sum.initial_gas_volume = gas_volume(r, s);

  std::vector<double> breaks;
  for (const auto& w : r.wells())
    for (const auto& seg : w.schedule) breaks.push_back(seg.start_years * kSecondsPerYear);
  std::sort(breaks.begin(), breaks.end());

  const double dt_max = cfg.dt_max_days * 86400.0;
  double dt_nominal = std::min(cfg.dt_initial_days * 86400.0, dt_max);
  std::vector<double> last_bhp(r.wells().size(), 0.0);
  for (double report_years : cfg.report_years) {
    const double t_report = report_years * kSecondsPerYear;
    while (s.time < t_report) {
      double target = t_report;
      for (double b : breaks)
        if (b > s.time && b < target) target = b;
      const double limit = target - s.time;
      double dt = std::min(dt_nominal, limit);
      bool rejected = false;
      detail::StepOutcome o;
      for (;;) {
        o = detail::try_step(r, s, dt, sum);
        if (o.step.accepted) break;
        ++sum.rejected_steps;
        rejected = true;
        dt *= 0.5;
        if (dt < cfg.dt_min_seconds) {
          std::ostringstream os;
          os << "simulation: time step fell below " << cfg.dt_min_seconds << " s at t = " << s.time / kSecondsPerYear
             << " yr (CFL " << o.step.cfl << ")";
          throw NumericError(os.str());
        }
      }
      const bool hits_limit = dt == limit;
      s = std::move(o.step.state);
      if (hits_limit) s.time = target;  // land exactly on the report or schedule time
      sum.clamp_volume += o.step.clamp_volume;
      sum.boundary_gas_out += o.step.boundary_gas_out;
      last_bhp = o.bhp;
      ++sum.accepted_steps;
      if (rejected)
        dt_nominal = dt;
      else if (!hits_limit || dt == dt_nominal)
        dt_nominal = std::min(dt_nominal * cfg.dt_growth, dt_max);
      dt_nominal = std::min(dt_nominal, std::max(0.95 * o.dt_cfl, cfg.dt_min_seconds));
      for (std::size_t w = 0; w < r.wells().size(); ++w)
        if (o.controls[w].bhp) {
          std::ostringstream os;
          os << "t=" << s.time / kSecondsPerYear << " yr well " << r.wells()[w].name << " at BHP cap "
             << o.controls[w].bhp_value << " Pa";
          if (sum.log.size() < 1000) sum.log.push_back(os.str());
        }
    }
    s.time = t_report;
    Snapshot snap;
    snap.time_years = report_years;
    snap.pressure = s.pressure;
    snap.saturation = s.saturation;
    snap.cumulative = s.cumulative;
    snap.bhp = last_bhp;
    res.snapshots.push_back(std::move(snap));
  }
  sum.final_gas_volume = gas_volume(r, s);
  sum.cumulative = s.cumulative;
  double injected = 0;
  for (std::size_t w = 0; w < r.wells().size(); ++w) {
    sum.planned.push_back(r.wells()[w].planned_cumulative(s.time));
    sum.shortfall.push_back(std::max(0.0, sum.planned.back() - s.cumulative[w]));
    injected += s.cumulative[w];
    if (sum.shortfall.back() > 1e-9 * std::max(1.0, sum.planned.back())) {
      std::ostringstream os;
      os << "well " << r.wells()[w].name << " missed its target by " << sum.shortfall.back() << " m^3";
      sum.log.push_back(os.str());
    }
  }
  const double change = sum.final_gas_volume - sum.initial_gas_volume;
  sum.mass_balance_error = injected > 0 ? std::abs(change - (injected - sum.boundary_gas_out)) / injected : 0.0;
  return res;
}

inline SimulationResult run_simulation(const ReservoirConfig& cfg, const std::vector<WellSpec>& wells) {
  return run_simulation(Reservoir(cfg, wells));
}

// ---------------------------------------------------------------------------
// Output.

inline constexpr std::uint32_t kSnapVersion = 1;

struct SnapshotFile {
  std::uint32_t realization = 0;
  std::string config_digest;
  std::vector<Snapshot> snapshots;
};

inline void write_snapshots(const std::filesystem::path& path, const SnapshotFile& f) {
  ByteWriter w;
  w.magic("SNAP");
  w.u32(kSnapVersion);
  w.u32(f.realization);
  w.str(f.config_digest);
  w.u32(static_cast<std::uint32_t>(f.snapshots.size()));
  for (const auto& s : f.snapshots) {
    w.f64(s.time_years);
    w.u32(static_cast<std::uint32_t>(s.cumulative.size()));
    for (double v : s.cumulative) w.f64(v);
    for (double v : s.bhp) w.f64(v);
    write_tensor_block(w, s.pressure);
    write_tensor_block(w, s.saturation);
  }
  w.crc();
  write_file_atomic(path, w.bytes());
}

inline SnapshotFile read_snapshots(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  SnapshotFile f;
  parse_framed(bytes, "SNAP", path.string(), [&](ByteReader& r) {
    const auto version = r.u32();
    if (version != kSnapVersion)
      throw FileError(FileFault::unknown_version, path.string(), "version " + std::to_string(version));
    f.realization = r.u32();
    f.config_digest = r.str();
    const auto n = r.u32();
    f.snapshots.clear();
    for (std::uint32_t i = 0; i < n; ++i) {
      Snapshot s;
      s.time_years = r.f64();
      const auto nw = r.u32();
      if (nw > 4096) throw DataError("snapshot well count out of range");
      s.cumulative.resize(nw);
      s.bhp.resize(nw);
      for (auto& v : s.cumulative) v = r.f64();
      for (auto& v : s.bhp) v = r.f64();
      s.pressure = read_tensor_block<double>(r);
      s.saturation = read_tensor_block<double>(r);
      f.snapshots.push_back(std::move(s));
    }
  });
  return f;
}

/// Per-report CSV: time, then cumulative volume and BHP per well; trailer rows carry run counters.
inline std::string run_summary_csv(const SimulationResult& res, const std::vector<WellSpec>& wells) {
  std::ostringstream os;
  os.precision(10);
  os << "time_years";
  for (const auto& w : wells) os << ",cum_" << w.name << "_m3,bhp_" << w.name << "_pa";
  os << '\n';
  for (const auto& s : res.snapshots) {
    os << s.time_years;
    for (std::size_t w = 0; w < wells.size(); ++w) os << ',' << s.cumulative[w] << ',' << s.bhp[w];
    os << '\n';
  }
  const auto& m = res.summary;
  os << "# accepted_steps," << m.accepted_steps << "\n# rejected_steps," << m.rejected_steps << "\n# bhp_switches,"
     << m.bhp_switches << "\n# clamp_volume_m3," << m.clamp_volume << "\n# boundary_gas_out_m3," << m.boundary_gas_out
     << "\n# mass_balance_rel_err," << m.mass_balance_error << '\n';
  for (std::size_t w = 0; w < wells.size(); ++w)
    os << "# shortfall_" << wells[w].name << "_m3," << m.shortfall[w] << '\n';
  return os.str();
}

}  // namespace mfno::sim
