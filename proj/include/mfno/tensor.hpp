#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mfno/error.hpp"

namespace mfno {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

/// Stored precision code used by every on-disk tensor block.
template <class T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() { return 0; }
template <>
constexpr std::uint8_t dtype_code<double>() { return 1; }

/// Dense row-major N-d array of real scalars. Field tensors are channel-last.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw DataError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                      shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Dense row-major array of complex scalars (Fourier coefficients).
template <class T>
class ComplexTensor {
 public:
  using value_type = std::complex<T>;

  ComplexTensor() = default;
  explicit ComplexTensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_)) {}
  ComplexTensor(Shape shape, std::vector<std::complex<T>> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw DataError("complex tensor data length does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<std::complex<T>> data() noexcept { return data_; }
  std::span<const std::complex<T>> data() const noexcept { return data_; }

  std::complex<T>& operator[](std::size_t i) { return data_[i]; }
  const std::complex<T>& operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const ComplexTensor&) const = default;

 private:
  Shape shape_;
  std::vector<std::complex<T>> data_;
};

/// Interleaved (re, im) view of a complex tensor as a real tensor with a trailing axis of 2.
template <class T>
Tensor<T> as_real(const ComplexTensor<T>& z) {
  Shape shape = z.shape();
  shape.push_back(2);
  std::vector<T> out(2 * z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[2 * i] = z[i].real();
    out[2 * i + 1] = z[i].imag();
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

template <class T>
ComplexTensor<T> as_complex(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() != 2)
    throw DataError("as_complex expects a trailing axis of extent 2, got " + shape_str(x.shape()));
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  ComplexTensor<T> z(shape);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = {x[2 * i], x[2 * i + 1]};
  return z;
}

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DataError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Visits every spatial multi-index (all axes except the channel axis) in row-major order.
template <class F>
void for_each_spatial(const Shape& spatial, F&& f) {
  const std::size_t n = shape_size(spatial);
  std::vector<std::size_t> idx(spatial.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    f(idx);
    for (std::size_t a = spatial.size(); a-- > 0;) {
      if (++idx[a] < spatial[a]) break;
      idx[a] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise add.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise affine map over the trailing channel axis.

template <class T>
Tensor<T> channel_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || bias.rank() != 1)
    throw DataError("channel_linear: expected x[..., c_in], weight[c_in, c_out], bias[c_out]");
  const std::size_t cin = weight.dim(0), cout = weight.dim(1);
  if (x.shape().back() != cin)
    throw DataError("channel_linear: input has " + std::to_string(x.shape().back()) +
                    " channels but weight expects " + std::to_string(cin));
  if (bias.dim(0) != cout)
    throw DataError("channel_linear: bias extent " + std::to_string(bias.dim(0)) + " != c_out " +
                    std::to_string(cout));
  Shape shape = x.shape();
  shape.back() = cout;
  Tensor<T> out(shape);
  const std::size_t rows = x.size() / cin;
  const T* xs = x.data().data();
  const T* ws = weight.data().data();
  const T* bs = bias.data().data();
  T* os = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = os + r * cout;
    const T* xr = xs + r * cin;
    for (std::size_t j = 0; j < cout; ++j) o[j] = bs[j];
    for (std::size_t i = 0; i < cin; ++i) {
      const T xi = xr[i];
      const T* wr = ws + i * cout;
      for (std::size_t j = 0; j < cout; ++j) o[j] += xi * wr[j];
    }
  }
  return out;
}

template <class T>
struct ChannelLinearGrads {
  Tensor<T> x, weight, bias;
};

template <class T>
ChannelLinearGrads<T> channel_linear_vjp(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                                         bool need_x = true, bool need_params = true) {
  const std::size_t cin = weight.dim(0), cout = weight.dim(1);
  const std::size_t rows = x.size() / cin;
  ChannelLinearGrads<T> g;
  const T* gs = grad_out.data().data();
  const T* xs = x.data().data();
  const T* ws = weight.data().data();
  if (need_x) {
    g.x = Tensor<T>(x.shape());
    T* gx = g.x.data().data();
    std::vector<T> wt(cin * cout);  // [c_out][c_in]
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t j = 0; j < cout; ++j) wt[j * cin + i] = ws[i * cout + j];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = gs + r * cout;
      T* gxr = gx + r * cin;
      for (std::size_t j = 0; j < cout; ++j) {
        const T gj = gr[j];
        const T* wc = wt.data() + j * cin;
        for (std::size_t i = 0; i < cin; ++i) gxr[i] += gj * wc[i];
      }
    }
  }
  if (need_params) {
    g.weight = Tensor<T>(weight.shape());
    g.bias = Tensor<T>(Shape{cout});
    T* gw = g.weight.data().data();
    T* gb = g.bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = gs + r * cout;
      const T* xr = xs + r * cin;
      for (std::size_t j = 0; j < cout; ++j) gb[j] += gr[j];
      for (std::size_t i = 0; i < cin; ++i) {
        const T xi = xr[i];
        T* gwr = gw + i * cout;
        for (std::size_t j = 0; j < cout; ++j) gwr[j] += xi * gr[j];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// GELU, exact erf form.

template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

template <class T>
Tensor<T> gelu_vjp(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = grad_out[i] * gelu_derivative(x[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Zero padding on both sides of every spatial axis (all axes but the last).

template <class T>
Tensor<T> pad_spatial(const Tensor<T>& x, std::span<const std::size_t> pads) {
  if (x.rank() < 2) throw DataError("pad_spatial: need at least one spatial axis and a channel axis");
  const std::size_t ns = x.rank() - 1;
  if (pads.size() != ns)
    throw DataError("pad_spatial: " + std::to_string(pads.size()) + " pad values for " + std::to_string(ns) +
                    " spatial axes");
  Shape out_shape = x.shape();
  for (std::size_t a = 0; a < ns; ++a) out_shape[a] += 2 * pads[a];
  Tensor<T> out(out_shape);
  const std::size_t c = x.shape().back();
  Shape spatial(x.shape().begin(), x.shape().end() - 1);
  std::size_t src = 0;
  detail::for_each_spatial(spatial, [&](const std::vector<std::size_t>& idx) {
    std::size_t dst = 0;
    for (std::size_t a = 0; a < ns; ++a) dst = dst * out_shape[a] + idx[a] + pads[a];
    std::copy_n(x.data().data() + src, c, out.data().data() + dst * c);
    src += c;
  });
  return out;
}

/// Signed-pad convenience overload; negative pads are rejected.
template <class T>
Tensor<T> pad_spatial(const Tensor<T>& x, const std::vector<long>& pads) {
  std::vector<std::size_t> p;
  for (long v : pads) {
    if (v < 0) throw DataError("pad_spatial: negative pad " + std::to_string(v));
    p.push_back(static_cast<std::size_t>(v));
  }
  return pad_spatial(x, std::span<const std::size_t>(p));
}

/// Inverse of pad_spatial: extracts the interior region.
template <class T>
Tensor<T> depad_spatial(const Tensor<T>& x, std::span<const std::size_t> pads) {
  const std::size_t ns = x.rank() - 1;
  if (pads.size() != ns) throw DataError("depad_spatial: pad count does not match spatial rank");
  Shape out_shape = x.shape();
  for (std::size_t a = 0; a < ns; ++a) {
    if (out_shape[a] < 2 * pads[a])
      throw DataError("depad_spatial: axis " + std::to_string(a) + " too small for pad " + std::to_string(pads[a]));
    out_shape[a] -= 2 * pads[a];
  }
  Tensor<T> out(out_shape);
  const std::size_t c = x.shape().back();
  Shape spatial(out_shape.begin(), out_shape.end() - 1);
  std::size_t dst = 0;
  detail::for_each_spatial(spatial, [&](const std::vector<std::size_t>& idx) {
    std::size_t src = 0;
    for (std::size_t a = 0; a < ns; ++a) src = src * x.shape()[a] + idx[a] + pads[a];
    std::copy_n(x.data().data() + src * c, c, out.data().data() + dst);
    dst += c;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Coordinate channels: appends one channel per spatial axis holding i/(n-1).

template <class T>
Tensor<T> concat_coordinates(const Tensor<T>& x) {
  const std::size_t ns = x.rank() - 1;
  const std::size_t c = x.shape().back();
  Shape out_shape = x.shape();
  out_shape.back() = c + ns;
  Tensor<T> out(out_shape);
  Shape spatial(x.shape().begin(), x.shape().end() - 1);
  std::size_t cell = 0;
  detail::for_each_spatial(spatial, [&](const std::vector<std::size_t>& idx) {
    T* o = out.data().data() + cell * (c + ns);
    std::copy_n(x.data().data() + cell * c, c, o);
    for (std::size_t a = 0; a < ns; ++a)
      o[c + a] = spatial[a] > 1 ? T(idx[a]) / T(spatial[a] - 1) : T(0);
    ++cell;
  });
  return out;
}

template <class T>
Tensor<T> concat_coordinates_vjp(const Tensor<T>& grad_out, std::size_t in_channels) {
  const std::size_t ns = grad_out.rank() - 1;
  const std::size_t cout = grad_out.shape().back();
  Shape shape = grad_out.shape();
  shape.back() = in_channels;
  Tensor<T> g(shape);
  const std::size_t cells = grad_out.size() / cout;
  (void)ns;
  for (std::size_t r = 0; r < cells; ++r)
    std::copy_n(grad_out.data().data() + r * cout, in_channels, g.data().data() + r * in_channels);
  return g;
}

// ---------------------------------------------------------------------------
// l_p norm.

template <class T>
T lp_norm(std::span<const T> x, double p) {
  if (p < 1.0) throw DataError("lp_norm: p must be >= 1, got " + std::to_string(p));
  double acc = 0.0;
  if (p == 2.0) {
    for (T v : x) acc += double(v) * double(v);
    return T(std::sqrt(acc));
  }
  if (p == 1.0) {
    for (T v : x) acc += std::abs(double(v));
    return T(acc);
  }
  for (T v : x) acc += std::pow(std::abs(double(v)), p);
  return T(std::pow(acc, 1.0 / p));
}

template <class T>
T lp_norm(const Tensor<T>& x, double p) {
  return lp_norm<T>(x.data(), p);
}

/// d||x||_p / dx scaled by the upstream scalar gradient; defined away from x = 0.
template <class T>
Tensor<T> lp_norm_vjp(const Tensor<T>& x, double p, T grad_out) {
  Tensor<T> g(x.shape());
  const double norm = double(lp_norm(x, p));
  if (norm == 0.0) return g;
  const double denom = std::pow(norm, p - 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double s = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
    g[i] = T(double(grad_out) * s * std::pow(std::abs(v), p - 1.0) / denom);
  }
  return g;
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace mfno
