#pragma once

// Compressed sparse rows and preconditioned conjugate gradient.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "mfno/error.hpp"

namespace mfno {

struct CsrMatrix {
  std::size_t n = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col;
  std::vector<double> val;

  void multiply(const std::vector<double>& x, std::vector<double>& y) const {
    y.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      for (std::size_t p = row_ptr[i]; p < row_ptr[i + 1]; ++p) acc += val[p] * x[col[p]];
      y[i] = acc;
    }
  }

  double diagonal(std::size_t i) const {
    for (std::size_t p = row_ptr[i]; p < row_ptr[i + 1]; ++p)
      if (col[p] == i) return val[p];
    return 0.0;
  }

  double row_sum(std::size_t i) const {
    double s = 0;
    for (std::size_t p = row_ptr[i]; p < row_ptr[i + 1]; ++p) s += val[p];
    return s;
  }

  static CsrMatrix identity(std::size_t n) {
    CsrMatrix a;
    a.n = n;
    for (std::size_t i = 0; i < n; ++i) {
      a.col.push_back(i);
      a.val.push_back(1.0);
      a.row_ptr.push_back(i + 1);
    }
    return a;
  }
};

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double relative_residual = 0;
  std::vector<double> residual_history;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

enum class Preconditioner { jacobi, incomplete_cholesky };

/// Zero-fill incomplete Cholesky factor L (A ~ L L^T) on the lower pattern of A.
class IncompleteCholesky {
 public:
  explicit IncompleteCholesky(const CsrMatrix& a) : n_(a.n), row_ptr_{0}, diag_(a.n) {
    for (std::size_t i = 0; i < n_; ++i) {
      std::vector<std::pair<std::size_t, double>> lower;
      double d = 0;
      for (std::size_t p = a.row_ptr[i]; p < a.row_ptr[i + 1]; ++p) {
        if (a.col[p] < i) lower.emplace_back(a.col[p], a.val[p]);
        if (a.col[p] == i) d += a.val[p];
      }
      std::sort(lower.begin(), lower.end());
      for (auto& [k, v] : lower) {
        // v -= sum over j < k of L(i, j) L(k, j), both in pattern
        double s = 0;
        std::size_t pi = row_ptr_[i], pk = row_ptr_[k];
        const std::size_t ei = col_.size(), ek = row_ptr_[k + 1];
        while (pi < ei && pk < ek) {
          if (col_[pi] == col_[pk]) s += val_[pi++] * val_[pk++];
          else if (col_[pi] < col_[pk]) ++pi;
          else ++pk;
        }
        const double l = (v - s) / diag_[k];
        col_.push_back(k);
        val_.push_back(l);
        d -= l * l;
      }
      if (!(d > 0) || !std::isfinite(d))
        throw NumericError("incomplete Cholesky: non-positive pivot at row " + std::to_string(i));
      diag_[i] = std::sqrt(d);
      row_ptr_.push_back(col_.size());
    }
  }

  /// z = (L L^T)^-1 r
  void apply(const std::vector<double>& r, std::vector<double>& z) const {
    z = r;
    for (std::size_t i = 0; i < n_; ++i) {
      double v = z[i];
      for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) v -= val_[p] * z[col_[p]];
      z[i] = v / diag_[i];
    }
    for (std::size_t i = n_; i-- > 0;) {
      z[i] /= diag_[i];
      for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) z[col_[p]] -= val_[p] * z[i];
    }
  }

 private:
  std::size_t n_;
  std::vector<std::size_t> row_ptr_, col_;
  std::vector<double> val_, diag_;
};

/// Solves A x = b for symmetric positive definite A until ||b - A x|| / max(||b||, ||r0||) < tol,
/// r0 being the residual of the starting guess.
inline CgResult conjugate_gradient(const CsrMatrix& a, const std::vector<double>& b, double tol = 1e-8,
                                   std::size_t max_iter = 0, std::vector<double> x0 = {},
                                   Preconditioner pc = Preconditioner::jacobi) {
  const std::size_t n = a.n;
  if (b.size() != n) throw DataError("conjugate_gradient: right-hand side length mismatch");
  if (max_iter == 0) max_iter = std::max<std::size_t>(10 * n, 1000);
  CgResult res;
  res.x = x0.empty() ? std::vector<double>(n, 0.0) : std::move(x0);
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) {
    res.x.assign(n, 0.0);
    return res;
  }
  std::vector<double> inv_diag(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.diagonal(i);
    if (!(d > 0) || !std::isfinite(d))
      throw NumericError("conjugate_gradient: non-positive or non-finite diagonal at row " + std::to_string(i));
    inv_diag[i] = 1.0 / d;
  }
  std::optional<IncompleteCholesky> ic;
  if (pc == Preconditioner::incomplete_cholesky) ic.emplace(a);
  auto precondition = [&](const std::vector<double>& r, std::vector<double>& z) {
    if (ic)
      ic->apply(r, z);
    else
      for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
  };
  std::vector<double> r(n), z(n), p(n), ap(n);
  a.multiply(res.x, ap);
  for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
  const double scale = std::max(bnorm, std::sqrt(dot(r, r)));
  precondition(r, z);
  p = z;
  double rz = dot(r, z);
  double rel = std::sqrt(dot(r, r)) / scale;
  res.residual_history.push_back(rel);
  while (rel >= tol) {
    if (res.iterations >= max_iter) {
      std::ostringstream os;
      os << "conjugate_gradient: no convergence after " << res.iterations << " iterations; residual history:";
      const std::size_t stride = std::max<std::size_t>(1, res.residual_history.size() / 10);
      for (std::size_t k = 0; k < res.residual_history.size(); k += stride)
        os << ' ' << k << ':' << res.residual_history[k];
      os << ' ' << res.residual_history.size() - 1 << ':' << res.residual_history.back();
      throw NumericError(os.str());
    }
    a.multiply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0)) throw NumericError("conjugate_gradient: matrix is not positive definite (p'Ap = " + std::to_string(pap) + ")");
    const double alpha = rz / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    ++res.iterations;
    rel = std::sqrt(dot(r, r)) / scale;
    if (rel < tol) {
      // confirm with the true residual; the recursive one drifts
      a.multiply(res.x, ap);
      for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
      rel = std::sqrt(dot(r, r)) / scale;
    }
    res.residual_history.push_back(rel);
    if (rel < tol) break;
    precondition(r, z);
    const double rz_new = dot(r, z);
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  res.relative_residual = rel;
  return res;
}

}  // namespace mfno
