#pragma once

// Mixed-radix complex FFT (decimation in time, out of place).
// Radix 4 and 2 have dedicated butterflies; any other factor goes through the
// generic O(p^2) butterfly, so lengths with large prime factors still work but
// lose the n log n bound.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "mfno/tensor.hpp"

namespace mfno::fft {

template <class T>
class Plan {
 public:
  using cpx = std::complex<T>;

  Plan(std::size_t n, bool inverse) : n_(n), inverse_(inverse) {
    if (n == 0) throw DataError("fft: zero-length transform");
    const double sign = inverse ? 1.0 : -1.0;
    twiddles_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double phase = sign * 2.0 * std::numbers::pi * double(k) / double(n);
      twiddles_[k] = cpx(T(std::cos(phase)), T(std::sin(phase)));
    }
    factorize();
  }

  std::size_t size() const noexcept { return n_; }
  bool inverse() const noexcept { return inverse_; }
  const std::vector<std::size_t>& factors() const noexcept { return factors_; }

  /// out[k] = sum_j in[j * stride] * exp(-+2 pi i j k / n); unnormalized.
  void execute(const cpx* in, std::size_t in_stride, cpx* out) const {
    if (n_ == 1) {
      out[0] = in[0];
      return;
    }
    std::vector<cpx> scratch(max_radix_);
    work(out, in, 1, in_stride, 0, scratch.data());
  }

 private:
  void factorize() {
    std::size_t n = n_;
    std::size_t p = 4;
    while (n > 1) {
      while (n % p != 0) {
        switch (p) {
          case 4: p = 2; break;
          case 2: p = 3; break;
          default: p += 2; break;
        }
        if (p * p > n) p = n;
      }
      n /= p;
      factors_.push_back(p);
      factors_.push_back(n);
      max_radix_ = std::max(max_radix_, p);
    }
  }

  void work(cpx* out, const cpx* in, std::size_t fstride, std::size_t in_stride, std::size_t level,
            cpx* scratch) const {
    const std::size_t p = factors_[2 * level];
    const std::size_t m = factors_[2 * level + 1];
    if (m == 1) {
      for (std::size_t q = 0; q < p; ++q) out[q] = in[q * fstride * in_stride];
    } else {
      for (std::size_t q = 0; q < p; ++q)
        work(out + q * m, in + q * fstride * in_stride, fstride * p, in_stride, level + 1, scratch);
    }
    switch (p) {
      case 2: butterfly2(out, fstride, m); break;
      case 4: butterfly4(out, fstride, m); break;
      default: butterfly_generic(out, fstride, m, p, scratch); break;
    }
  }

  void butterfly2(cpx* out, std::size_t fstride, std::size_t m) const {
    for (std::size_t k = 0; k < m; ++k) {
      const cpx t = out[k + m] * twiddles_[k * fstride];
      out[k + m] = out[k] - t;
      out[k] += t;
    }
  }

  void butterfly4(cpx* out, std::size_t fstride, std::size_t m) const {
    for (std::size_t k = 0; k < m; ++k) {
      const cpx s0 = out[k + m] * twiddles_[k * fstride];
      const cpx s1 = out[k + 2 * m] * twiddles_[2 * k * fstride];
      const cpx s2 = out[k + 3 * m] * twiddles_[3 * k * fstride];
      const cpx s5 = out[k] - s1;
      out[k] += s1;
      const cpx s3 = s0 + s2;
      const cpx s4 = s0 - s2;
      out[k + 2 * m] = out[k] - s3;
      out[k] += s3;
      // multiply s4 by -i (forward) or +i (inverse)
      const cpx rot = inverse_ ? cpx(-s4.imag(), s4.real()) : cpx(s4.imag(), -s4.real());
      out[k + m] = s5 + rot;
      out[k + 3 * m] = s5 - rot;
    }
  }

  void butterfly_generic(cpx* out, std::size_t fstride, std::size_t m, std::size_t p, cpx* scratch) const {
    for (std::size_t u = 0; u < m; ++u) {
      for (std::size_t q = 0, k = u; q < p; ++q, k += m) scratch[q] = out[k];
      for (std::size_t q1 = 0, k = u; q1 < p; ++q1, k += m) {
        std::size_t tw = 0;
        cpx acc = scratch[0];
        for (std::size_t q = 1; q < p; ++q) {
          tw += fstride * k;
          if (tw >= n_) tw %= n_;
          acc += scratch[q] * twiddles_[tw];
        }
        out[k] = acc;
      }
    }
  }

  std::size_t n_;
  bool inverse_;
  std::vector<cpx> twiddles_;
  std::vector<std::size_t> factors_;
  std::size_t max_radix_ = 1;
};

/// Thread-safe cache of plans keyed by (length, direction).
template <class T>
std::shared_ptr<const Plan<T>> plan_for(std::size_t n, bool inverse) {
  static std::mutex mutex;
  static std::map<std::pair<std::size_t, bool>, std::shared_ptr<const Plan<T>>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{n, inverse}];
  if (!slot) slot = std::make_shared<const Plan<T>>(n, inverse);
  return slot;
}

/// Unnormalized in-place transform of every line along `axis` of a row-major complex array.
template <class T>
void transform_axis(std::span<std::complex<T>> data, const Shape& shape, std::size_t axis, bool inverse) {
  const std::size_t n = shape.at(axis);
  if (n == 1) return;
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  const std::size_t outer = data.size() / (n * inner);
  const auto plan = plan_for<T>(n, inverse);
  std::vector<std::complex<T>> line(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::complex<T>* base = data.data() + o * n * inner + i;
      plan->execute(base, inner, line.data());
      for (std::size_t k = 0; k < n; ++k) base[k * inner] = line[k];
    }
  }
}

}  // namespace mfno::fft
