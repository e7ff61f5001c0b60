#pragma once

// Discrete Fourier transforms over tensor axes, low-mode truncation and the
// per-mode complex channel mixing used by the Fourier layers.
//
// Conventions
//  * forward transforms are unnormalized, inverse transforms carry 1/n;
//  * real-input transforms keep floor(n/2)+1 coefficients along the last
//    transformed axis (the Hermitian axis);
//  * on full-spectrum axes the kept modes are [0, K) followed by the
//    conjugate corner [n-K, n); on the Hermitian axis they are [0, K).
//    Mode slot s < K maps to frequency s, slot s >= K to n - 2K + s.

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "mfno/fft.hpp"
#include "mfno/tensor.hpp"

namespace mfno {

struct ModeSpec {
  std::array<std::size_t, 3> kept{20, 20, 10};

  /// Rejects extents that cannot hold the kept modes (K <= floor(n/2) per axis).
  void validate(const std::array<std::size_t, 3>& extents) const {
    for (std::size_t a = 0; a < 3; ++a) {
      if (kept[a] == 0) throw ConfigError("mode count on axis " + std::to_string(a) + " must be positive");
      if (kept[a] > extents[a] / 2)
        throw ConfigError("mode count " + std::to_string(kept[a]) + " on axis " + std::to_string(a) +
                          " requires a (padded) extent of at least " + std::to_string(2 * kept[a]) + ", got " +
                          std::to_string(extents[a]));
    }
  }

  std::size_t mode_count() const { return 4 * kept[0] * kept[1] * kept[2]; }
  Shape weight_shape(std::size_t c_in, std::size_t c_out) const {
    return {c_in, c_out, 2 * kept[0], 2 * kept[1], kept[2]};
  }

  bool operator==(const ModeSpec&) const = default;
};

/// Learnable per-mode complex channel mixing, shape (c_in, c_out, 2Kx, 2Ky, Kz).
template <class T>
struct SpectralWeights {
  ComplexTensor<T> r;
};

inline std::size_t mode_frequency(std::size_t slot, std::size_t kept, std::size_t n) {
  return slot < kept ? slot : n - 2 * kept + slot;
}

// ---------------------------------------------------------------------------
// Full transforms over arbitrary axes.

/// Real-to-complex forward DFT over `axes` (the last listed axis is stored half-length).
template <class T>
ComplexTensor<T> dft_forward(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw DataError("dft_forward: no axes given");
  for (std::size_t a : axes)
    if (a >= x.rank() || x.dim(a) < 1) throw DataError("dft_forward: invalid axis " + std::to_string(a));
  ComplexTensor<T> full(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) full[i] = {x[i], T(0)};
  for (std::size_t a : axes) fft::transform_axis<T>(full.data(), full.shape(), a, false);

  const std::size_t h = axes.back();
  Shape half_shape = x.shape();
  half_shape[h] = x.dim(h) / 2 + 1;
  ComplexTensor<T> out(half_shape);
  std::size_t inner = 1;
  for (std::size_t a = h + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t n = x.dim(h), nh = half_shape[h];
  const std::size_t outer = x.size() / (n * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < nh; ++k)
      std::copy_n(full.data().data() + (o * n + k) * inner, inner, out.data().data() + (o * nh + k) * inner);
  return out;
}

/// Complex-to-real inverse of dft_forward; `extents` are the original lengths of `axes`.
template <class T>
Tensor<T> dft_inverse(const ComplexTensor<T>& spectrum, const std::vector<std::size_t>& axes,
                      const std::vector<std::size_t>& extents) {
  if (axes.empty() || axes.size() != extents.size()) throw DataError("dft_inverse: axes/extents mismatch");
  const std::size_t h = axes.back();
  const std::size_t n = extents.back();
  if (spectrum.dim(h) != n / 2 + 1)
    throw DataError("dft_inverse: Hermitian axis holds " + std::to_string(spectrum.dim(h)) +
                    " coefficients, inconsistent with extent " + std::to_string(n));
  for (std::size_t i = 0; i + 1 < axes.size(); ++i)
    if (spectrum.dim(axes[i]) != extents[i])
      throw DataError("dft_inverse: axis " + std::to_string(axes[i]) + " extent mismatch");

  Shape full_shape = spectrum.shape();
  full_shape[h] = n;
  ComplexTensor<T> full(full_shape);
  const std::size_t rank = full_shape.size();
  std::vector<bool> transformed(rank, false);
  for (std::size_t a : axes) transformed[a] = true;

  // Fill the full spectrum; bins past n/2 on the Hermitian axis are conjugate mirrors.
  std::vector<std::size_t> idx(rank, 0), src(rank, 0);
  for (std::size_t flat = 0; flat < full.size(); ++flat) {
    bool mirror = idx[h] >= spectrum.dim(h);
    for (std::size_t a = 0; a < rank; ++a) {
      if (mirror && transformed[a])
        src[a] = (full_shape[a] - idx[a]) % full_shape[a];
      else
        src[a] = idx[a];
    }
    std::size_t off = 0;
    for (std::size_t a = 0; a < rank; ++a) off = off * spectrum.dim(a) + src[a];
    full[flat] = mirror ? std::conj(spectrum[off]) : spectrum[off];
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < full_shape[a]) break;
      idx[a] = 0;
    }
  }
  double norm = 1.0;
  for (std::size_t a : axes) {
    fft::transform_axis<T>(full.data(), full.shape(), a, true);
    norm *= double(full_shape[a]);
  }
  Tensor<T> out(full_shape);
  const T inv = T(1.0 / norm);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = full[i].real() * inv;
  return out;
}

/// Complex-to-complex unnormalized transform over `axes`.
template <class T>
ComplexTensor<T> dft_complex(ComplexTensor<T> x, const std::vector<std::size_t>& axes, bool inverse) {
  for (std::size_t a : axes) fft::transform_axis<T>(x.data(), x.shape(), a, inverse);
  return x;
}

// ---------------------------------------------------------------------------
// Truncation + mixing on a half spectrum laid out [c, nx, ny, nz/2+1].

template <class T>
ComplexTensor<T> truncate_and_mix(const ComplexTensor<T>& spectrum, const ModeSpec& spec,
                                  const SpectralWeights<T>& w) {
  if (spectrum.rank() != 4) throw DataError("truncate_and_mix: expected [c_in, nx, ny, nz/2+1] spectrum");
  const std::size_t cin = spectrum.dim(0), nx = spectrum.dim(1), ny = spectrum.dim(2), nzh = spectrum.dim(3);
  spec.validate({nx, ny, 2 * (nzh - 1)});
  const auto& [kx, ky, kz] = spec.kept;
  if (w.r.rank() != 5 || w.r.dim(0) != cin || w.r.dim(2) != 2 * kx || w.r.dim(3) != 2 * ky || w.r.dim(4) != kz)
    throw DataError("truncate_and_mix: weights " + shape_str(w.r.shape()) + " inconsistent with spectrum " +
                    shape_str(spectrum.shape()));
  const std::size_t cout = w.r.dim(1);
  const std::size_t nmodes = 4 * kx * ky * kz;
  ComplexTensor<T> out({cout, nx, ny, nzh});
  for (std::size_t sx = 0; sx < 2 * kx; ++sx) {
    const std::size_t fx = mode_frequency(sx, kx, nx);
    for (std::size_t sy = 0; sy < 2 * ky; ++sy) {
      const std::size_t fy = mode_frequency(sy, ky, ny);
      for (std::size_t fz = 0; fz < kz; ++fz) {
        const std::size_t md = (sx * 2 * ky + sy) * kz + fz;
        for (std::size_t o = 0; o < cout; ++o) {
          std::complex<T> acc{};
          for (std::size_t i = 0; i < cin; ++i)
            acc += spectrum[((i * nx + fx) * ny + fy) * nzh + fz] * w.r[(i * cout + o) * nmodes + md];
          out[((o * nx + fx) * ny + fy) * nzh + fz] = acc;
        }
      }
    }
  }
  return out;
}

template <class T>
struct TruncateMixGrads {
  ComplexTensor<T> spectrum;
  ComplexTensor<T> weights;
};

/// Gradients packaged as dL/dRe + i dL/dIm.
template <class T>
TruncateMixGrads<T> truncate_and_mix_vjp(const ComplexTensor<T>& spectrum, const ModeSpec& spec,
                                         const SpectralWeights<T>& w, const ComplexTensor<T>& grad_out) {
  const std::size_t cin = spectrum.dim(0), nx = spectrum.dim(1), ny = spectrum.dim(2), nzh = spectrum.dim(3);
  const auto& [kx, ky, kz] = spec.kept;
  const std::size_t cout = w.r.dim(1);
  const std::size_t nmodes = 4 * kx * ky * kz;
  TruncateMixGrads<T> g{ComplexTensor<T>(spectrum.shape()), ComplexTensor<T>(w.r.shape())};
  for (std::size_t sx = 0; sx < 2 * kx; ++sx) {
    const std::size_t fx = mode_frequency(sx, kx, nx);
    for (std::size_t sy = 0; sy < 2 * ky; ++sy) {
      const std::size_t fy = mode_frequency(sy, ky, ny);
      for (std::size_t fz = 0; fz < kz; ++fz) {
        const std::size_t md = (sx * 2 * ky + sy) * kz + fz;
        for (std::size_t o = 0; o < cout; ++o) {
          const auto go = grad_out[((o * nx + fx) * ny + fy) * nzh + fz];
          for (std::size_t i = 0; i < cin; ++i) {
            const std::size_t xi = ((i * nx + fx) * ny + fy) * nzh + fz;
            const std::size_t ri = (i * cout + o) * nmodes + md;
            g.spectrum[xi] += go * std::conj(w.r[ri]);
            g.weights[ri] += std::conj(spectrum[xi]) * go;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pruned spectral convolution on channel-last [nx, ny, nz, c] fields.
//
// Only the kept modes are ever formed: a separable partial DFT runs along z
// (real to Kz coefficients), then y and x restricted to the kept slots. This is
// algebraically identical to dft_forward -> truncate_and_mix -> dft_inverse.

namespace detail {

/// Split real/imaginary buffer laid out [a][b][c][channels].
template <class T>
struct SplitComplex {
  std::vector<T> re, im;
  explicit SplitComplex(std::size_t n = 0) : re(n, T(0)), im(n, T(0)) {}
  std::size_t size() const { return re.size(); }
};

template <class T>
struct Twiddles {
  std::vector<T> c, s;  // [slot][position], cos and sin of +2 pi f x / n
};

template <class T>
Twiddles<T> make_twiddles(std::size_t n, std::size_t kept, bool full_axis) {
  const std::size_t slots = full_axis ? 2 * kept : kept;
  Twiddles<T> t;
  t.c.resize(slots * n);
  t.s.resize(slots * n);
  for (std::size_t s = 0; s < slots; ++s) {
    const std::size_t f = full_axis ? mode_frequency(s, kept, n) : s;
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t fx = (f * x) % n;
      const double phase = 2.0 * std::numbers::pi * double(fx) / double(n);
      t.c[s * n + x] = T(std::cos(phase));
      t.s[s * n + x] = T(std::sin(phase));
    }
  }
  return t;
}

}  // namespace detail

template <class T>
class SpectralConvKernel {
 public:
  SpectralConvKernel(std::array<std::size_t, 3> extents, const ModeSpec& spec)
      : n_(extents), spec_(spec) {
    spec.validate(extents);
    tx_ = detail::make_twiddles<T>(n_[0], spec.kept[0], true);
    ty_ = detail::make_twiddles<T>(n_[1], spec.kept[1], true);
    tz_ = detail::make_twiddles<T>(n_[2], spec.kept[2], false);
  }

  std::size_t mode_count() const { return spec_.mode_count(); }
  const std::array<std::size_t, 3>& extents() const { return n_; }

  /// Kept modes [2Kx, 2Ky, Kz, c] = scale_z[kz] * sum_x v[x] exp(-i theta).
  detail::SplitComplex<T> forward_modes(const T* v, std::size_t c, const std::vector<T>& scale_z) const {
    const auto [nx, ny, nz] = n_;
    const auto [kx, ky, kz] = spec_.kept;
    // z: real -> Kz
    detail::SplitComplex<T> a(nx * ny * kz * c);
    for (std::size_t xy = 0; xy < nx * ny; ++xy) {
      const T* vz = v + xy * nz * c;
      for (std::size_t f = 0; f < kz; ++f) {
        T* ar = a.re.data() + (xy * kz + f) * c;
        T* ai = a.im.data() + (xy * kz + f) * c;
        const T* cz = tz_.c.data() + f * nz;
        const T* sz = tz_.s.data() + f * nz;
        for (std::size_t z = 0; z < nz; ++z) {
          const T cr = cz[z] * scale_z[f], si = sz[z] * scale_z[f];
          const T* vc = vz + z * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            ar[ch] += vc[ch] * cr;
            ai[ch] -= vc[ch] * si;
          }
        }
      }
    }
    // y: ny -> 2Ky
    const std::size_t run_y = kz * c;
    detail::SplitComplex<T> b(nx * 2 * ky * run_y);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t s = 0; s < 2 * ky; ++s) {
        T* br = b.re.data() + (x * 2 * ky + s) * run_y;
        T* bi = b.im.data() + (x * 2 * ky + s) * run_y;
        for (std::size_t y = 0; y < ny; ++y) {
          const T cr = ty_.c[s * ny + y], si = -ty_.s[s * ny + y];
          const T* ar = a.re.data() + (x * ny + y) * run_y;
          const T* ai = a.im.data() + (x * ny + y) * run_y;
          for (std::size_t j = 0; j < run_y; ++j) {
            br[j] += ar[j] * cr - ai[j] * si;
            bi[j] += ar[j] * si + ai[j] * cr;
          }
        }
      }
    // x: nx -> 2Kx
    const std::size_t run_x = 2 * ky * run_y;
    detail::SplitComplex<T> m(2 * kx * run_x);
    for (std::size_t s = 0; s < 2 * kx; ++s) {
      T* mr = m.re.data() + s * run_x;
      T* mi = m.im.data() + s * run_x;
      for (std::size_t x = 0; x < nx; ++x) {
        const T cr = tx_.c[s * nx + x], si = -tx_.s[s * nx + x];
        const T* br = b.re.data() + x * run_x;
        const T* bi = b.im.data() + x * run_x;
        for (std::size_t j = 0; j < run_x; ++j) {
          mr[j] += br[j] * cr - bi[j] * si;
          mi[j] += br[j] * si + bi[j] * cr;
        }
      }
    }
    return m;
  }

  /// out[x] = sum_kz scale_z[kz] * Re(sum over kept modes of m * exp(+i theta)).
  void inverse_modes(const detail::SplitComplex<T>& m, std::size_t c, const std::vector<T>& scale_z, T* out) const {
    const auto [nx, ny, nz] = n_;
    const auto [kx, ky, kz] = spec_.kept;
    const std::size_t run_y = kz * c;
    const std::size_t run_x = 2 * ky * run_y;
    detail::SplitComplex<T> p(nx * run_x);
    for (std::size_t x = 0; x < nx; ++x) {
      T* pr = p.re.data() + x * run_x;
      T* pi = p.im.data() + x * run_x;
      for (std::size_t s = 0; s < 2 * kx; ++s) {
        const T cr = tx_.c[s * nx + x], si = tx_.s[s * nx + x];
        const T* mr = m.re.data() + s * run_x;
        const T* mi = m.im.data() + s * run_x;
        for (std::size_t j = 0; j < run_x; ++j) {
          pr[j] += mr[j] * cr - mi[j] * si;
          pi[j] += mr[j] * si + mi[j] * cr;
        }
      }
    }
    detail::SplitComplex<T> q(nx * ny * run_y);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) {
        T* qr = q.re.data() + (x * ny + y) * run_y;
        T* qi = q.im.data() + (x * ny + y) * run_y;
        for (std::size_t s = 0; s < 2 * ky; ++s) {
          const T cr = ty_.c[s * ny + y], si = ty_.s[s * ny + y];
          const T* pr = p.re.data() + (x * 2 * ky + s) * run_y;
          const T* pi = p.im.data() + (x * 2 * ky + s) * run_y;
          for (std::size_t j = 0; j < run_y; ++j) {
            qr[j] += pr[j] * cr - pi[j] * si;
            qi[j] += pr[j] * si + pi[j] * cr;
          }
        }
      }
    std::fill_n(out, nx * ny * nz * c, T(0));
    for (std::size_t xy = 0; xy < nx * ny; ++xy) {
      T* oz = out + xy * nz * c;
      for (std::size_t f = 0; f < kz; ++f) {
        const T* qr = q.re.data() + (xy * kz + f) * c;
        const T* qi = q.im.data() + (xy * kz + f) * c;
        for (std::size_t z = 0; z < nz; ++z) {
          const T cr = tz_.c[f * nz + z] * scale_z[f], si = tz_.s[f * nz + z] * scale_z[f];
          T* oc = oz + z * c;
          for (std::size_t ch = 0; ch < c; ++ch) oc[ch] += qr[ch] * cr - qi[ch] * si;
        }
      }
    }
  }

  /// Scale per Hermitian-axis mode for the c2r inverse: 1/N for the DC bin, 2/N otherwise.
  std::vector<T> inverse_scale() const {
    const double total = double(n_[0]) * double(n_[1]) * double(n_[2]);
    std::vector<T> s(spec_.kept[2]);
    for (std::size_t f = 0; f < s.size(); ++f) s[f] = T((f == 0 ? 1.0 : 2.0) / total);
    return s;
  }
  std::vector<T> unit_scale() const { return std::vector<T>(spec_.kept[2], T(1)); }

 private:
  std::array<std::size_t, 3> n_;
  ModeSpec spec_;
  detail::Twiddles<T> tx_, ty_, tz_;
};

namespace detail {

/// Per-mode transposed weights [mode][c_in][c_out] from interleaved (c_in, c_out, modes, 2).
template <class T>
SplitComplex<T> transpose_weights(const Tensor<T>& w, std::size_t cin, std::size_t cout, std::size_t nmodes) {
  SplitComplex<T> t(nmodes * cin * cout);
  for (std::size_t i = 0; i < cin; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t md = 0; md < nmodes; ++md) {
        const std::size_t src = ((i * cout + o) * nmodes + md) * 2;
        const std::size_t dst = (md * cin + i) * cout + o;
        t.re[dst] = w[src];
        t.im[dst] = w[src + 1];
      }
  return t;
}

template <class T>
SplitComplex<T> mix_modes(const SplitComplex<T>& m, const SplitComplex<T>& wt, std::size_t nmodes, std::size_t cin,
                          std::size_t cout) {
  SplitComplex<T> out(nmodes * cout);
  for (std::size_t md = 0; md < nmodes; ++md) {
    T* orr = out.re.data() + md * cout;
    T* oi = out.im.data() + md * cout;
    for (std::size_t i = 0; i < cin; ++i) {
      const T ar = m.re[md * cin + i], ai = m.im[md * cin + i];
      const T* wr = wt.re.data() + (md * cin + i) * cout;
      const T* wi = wt.im.data() + (md * cin + i) * cout;
      for (std::size_t o = 0; o < cout; ++o) {
        orr[o] += ar * wr[o] - ai * wi[o];
        oi[o] += ar * wi[o] + ai * wr[o];
      }
    }
  }
  return out;
}

}  // namespace detail

template <class T>
struct SpectralConvGrads {
  Tensor<T> input;
  Tensor<T> weights;  // interleaved (c_in, c_out, 2Kx, 2Ky, Kz, 2)
};

/// Cached intermediate of a forward pass, needed by the weight gradient.
template <class T>
struct SpectralConvSaved {
  detail::SplitComplex<T> modes;
};

/// (K v)(x) = F^-1(R . T_K(F v))(x) for v[nx, ny, nz, c_in]; weights interleaved (c_in, c_out, 2Kx, 2Ky, Kz, 2).
template <class T>
Tensor<T> spectral_conv(const SpectralConvKernel<T>& kernel, const Tensor<T>& v, const Tensor<T>& weights,
                        SpectralConvSaved<T>* saved = nullptr) {
  if (v.rank() != 4) throw DataError("spectral_conv: expected [nx, ny, nz, c] input, got " + shape_str(v.shape()));
  const auto& n = kernel.extents();
  if (v.dim(0) != n[0] || v.dim(1) != n[1] || v.dim(2) != n[2])
    throw DataError("spectral_conv: input " + shape_str(v.shape()) + " does not match kernel extents");
  const std::size_t cin = v.dim(3);
  if (weights.rank() != 6 || weights.dim(0) != cin)
    throw DataError("spectral_conv: weight shape " + shape_str(weights.shape()) + " incompatible with " +
                    std::to_string(cin) + " input channels");
  const std::size_t cout = weights.dim(1);
  const std::size_t nmodes = kernel.mode_count();
  auto modes = kernel.forward_modes(v.data().data(), cin, kernel.unit_scale());
  const auto wt = detail::transpose_weights(weights, cin, cout, nmodes);
  const auto mixed = detail::mix_modes(modes, wt, nmodes, cin, cout);
  Tensor<T> out({n[0], n[1], n[2], cout});
  kernel.inverse_modes(mixed, cout, kernel.inverse_scale(), out.data().data());
  if (saved) saved->modes = std::move(modes);
  return out;
}

template <class T>
SpectralConvGrads<T> spectral_conv_vjp(const SpectralConvKernel<T>& kernel, const Tensor<T>& v,
                                       const Tensor<T>& weights, const Tensor<T>& grad_out,
                                       const SpectralConvSaved<T>* saved = nullptr, bool need_input = true,
                                       bool need_weights = true) {
  const auto& n = kernel.extents();
  const std::size_t cin = v.dim(3), cout = weights.dim(1);
  const std::size_t nmodes = kernel.mode_count();
  const auto g_mixed = kernel.forward_modes(grad_out.data().data(), cout, kernel.inverse_scale());
  SpectralConvGrads<T> g;
  if (need_weights) {
    detail::SplitComplex<T> local;
    const detail::SplitComplex<T>* modes = saved ? &saved->modes : nullptr;
    if (!modes) {
      local = kernel.forward_modes(v.data().data(), cin, kernel.unit_scale());
      modes = &local;
    }
    g.weights = Tensor<T>(weights.shape());
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t md = 0; md < nmodes; ++md) {
          const T ar = modes->re[md * cin + i], ai = -modes->im[md * cin + i];  // conj(modes)
          const T gr = g_mixed.re[md * cout + o], gi = g_mixed.im[md * cout + o];
          const std::size_t dst = ((i * cout + o) * nmodes + md) * 2;
          g.weights[dst] = ar * gr - ai * gi;
          g.weights[dst + 1] = ar * gi + ai * gr;
        }
  }
  if (need_input) {
    const auto wt = detail::transpose_weights(weights, cin, cout, nmodes);
    detail::SplitComplex<T> g_modes(nmodes * cin);
    for (std::size_t md = 0; md < nmodes; ++md)
      for (std::size_t i = 0; i < cin; ++i) {
        T accr{}, acci{};
        const T* wr = wt.re.data() + (md * cin + i) * cout;
        const T* wi = wt.im.data() + (md * cin + i) * cout;
        for (std::size_t o = 0; o < cout; ++o) {
          const T gr = g_mixed.re[md * cout + o], gi = g_mixed.im[md * cout + o];
          // g * conj(w)
          accr += gr * wr[o] + gi * wi[o];
          acci += gi * wr[o] - gr * wi[o];
        }
        g_modes.re[md * cin + i] = accr;
        g_modes.im[md * cin + i] = acci;
      }
    g.input = Tensor<T>({n[0], n[1], n[2], cin});
    kernel.inverse_modes(g_modes, cin, kernel.unit_scale(), g.input.data().data());
  }
  return g;
}

}  // namespace mfno
