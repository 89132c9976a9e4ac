#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "bt2/errors.hpp"

namespace bt2::linalg {

/// Dense row-major matrix of doubles. Column vectors are n x 1 matrices.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("DenseMatrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix column(std::span<const double> v) {
    return DenseMatrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::vector<double> column_values(std::size_t j) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  }
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "add");
  DenseMatrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "subtract");
  DenseMatrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline DenseMatrix operator*(double s, const DenseMatrix& a) {
  DenseMatrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

/// Largest absolute entry.
inline double max_abs(const DenseMatrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Induced 1-norm: maximum absolute column sum.
inline double one_norm(const DenseMatrix& a) {
  double best = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

/// Frobenius inner product <a, b>.
inline double frobenius_dot(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "frobenius_dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

// ---------------------------------------------------------------------------
// Skew-symmetric parameterization

/// Strict upper-triangular entries (row-major) of a skew-symmetric matrix.
struct SkewParams {
  std::size_t dim = 0;
  std::vector<double> theta;

  static std::size_t param_count(std::size_t dim) { return dim * (dim - (dim > 0 ? 1 : 0)) / 2; }

  static SkewParams zeros(std::size_t dim) { return {dim, std::vector<double>(param_count(dim), 0.0)}; }
};

namespace detail {

// mirror_sign is -1 for a genuine skew matrix; other values exist only for fault injection.
inline DenseMatrix build_skew_signed(const SkewParams& params, double mirror_sign) {
  if (params.dim < 1) throw ShapeError("build_skew: dim must be >= 1");
  if (params.theta.size() != SkewParams::param_count(params.dim)) {
    throw ShapeError("build_skew: expected " + std::to_string(SkewParams::param_count(params.dim)) +
                     " parameters for dim " + std::to_string(params.dim) + ", got " +
                     std::to_string(params.theta.size()));
  }
  const std::size_t m = params.dim;
  DenseMatrix a(m, m);
  std::size_t k = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      a(i, j) = params.theta[k];
      a(j, i) = mirror_sign * params.theta[k];
      ++k;
    }
  }
  return a;
}

}  // namespace detail

/// Materializes A with A[i][j] = theta for i < j and A[j][i] = -A[i][j].
inline DenseMatrix build_skew(const SkewParams& params) { return detail::build_skew_signed(params, -1.0); }

/// Inverse of build_skew's chain rule: maps a full-matrix gradient dL/dA onto theta.
inline std::vector<double> project_skew_gradient(const DenseMatrix& grad_a) {
  if (!grad_a.square()) throw ShapeError("project_skew_gradient: non-square gradient");
  const std::size_t m = grad_a.rows();
  std::vector<double> out;
  out.reserve(SkewParams::param_count(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) out.push_back(grad_a(i, j) - grad_a(j, i));
  return out;
}

// ---------------------------------------------------------------------------
// Matrix exponential

inline constexpr int kTaylorOrder = 18;
inline constexpr double kScaledNormTarget = 0.5;

/// e^A for a general square matrix by scaling and squaring: the smallest s with
/// ||A / 2^s||_1 <= 0.5, an order-18 Taylor polynomial, then s squarings.
inline DenseMatrix expm(const DenseMatrix& a) {
  if (!a.square()) throw DomainError("expm: matrix must be square");
  if (!a.all_finite()) throw DomainError("expm: non-finite input");
  const std::size_t n = a.rows();
  int s = 0;
  double norm = one_norm(a);
  while (norm > kScaledNormTarget) {
    norm *= 0.5;
    ++s;
  }
  const DenseMatrix scaled = std::ldexp(1.0, -s) * a;

  // Horner form: I + X(I + X/2(I + X/3(...)))
  DenseMatrix result = DenseMatrix::identity(n);
  for (int k = kTaylorOrder; k >= 1; --k) {
    result = DenseMatrix::identity(n) + (1.0 / k) * matmul(scaled, result);
  }
  for (int i = 0; i < s; ++i) result = matmul(result, result);
  return result;
}

inline constexpr double kSkewTolerance = 1e-12;
inline constexpr double kOrthonormalTolerance = 1e-8;

/// Square matrix known to satisfy P^T P = I; only expm_skew creates one.
class OrthonormalMatrix {
 public:
  const DenseMatrix& matrix() const noexcept { return p_; }
  std::size_t dim() const noexcept { return p_.rows(); }

 private:
  explicit OrthonormalMatrix(DenseMatrix p) : p_(std::move(p)) {}
  friend OrthonormalMatrix expm_skew(const DenseMatrix& a);

  DenseMatrix p_;
};

/// ||P^T P - I||_inf (largest absolute entry).
inline double orthonormality_defect(const DenseMatrix& p) {
  if (!p.square()) throw DomainError("orthonormality_defect: matrix must be square");
  DenseMatrix g = matmul(transpose(p), p);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return max_abs(g);
}

inline double skew_defect(const DenseMatrix& a) { return max_abs(a + transpose(a)); }

inline OrthonormalMatrix expm_skew(const DenseMatrix& a) {
  if (!a.square()) throw DomainError("expm_skew: matrix must be square");
  if (skew_defect(a) > kSkewTolerance) throw DomainError("expm_skew: matrix is not skew-symmetric");
  DenseMatrix p = expm(a);
  const double defect = orthonormality_defect(p);
  if (!(defect <= kOrthonormalTolerance)) {
    throw DomainError("expm_skew: orthonormality defect " + std::to_string(defect) + " exceeds tolerance");
  }
  return OrthonormalMatrix(std::move(p));
}

/// Adjoint of the Frechet derivative of exp at A applied to G, i.e. dL/dA for an
/// upstream gradient G = dL/dP with P = e^A. Computed as the upper-right block of
/// exp([[A^T, G], [0, A^T]]).
inline DenseMatrix expm_frechet_adjoint(const DenseMatrix& a, const DenseMatrix& g) {
  if (!a.square()) throw DomainError("expm_frechet_adjoint: A must be square");
  if (g.rows() != a.rows() || g.cols() != a.cols()) {
    throw DomainError("expm_frechet_adjoint: gradient shape does not match A");
  }
  const std::size_t n = a.rows();
  DenseMatrix block(2 * n, 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      block(i, j) = a(j, i);
      block(n + i, n + j) = a(j, i);
      block(i, n + j) = g(i, j);
    }
  }
  const DenseMatrix e = expm(block);
  DenseMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = e(i, n + j);
  return out;
}

// ---------------------------------------------------------------------------
// Vector helpers (std::vector<double> as plain column vectors)

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline std::vector<double> normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n > 0.0)) throw DegenerateVectorError("normalized: zero vector");
  std::vector<double> out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

inline std::vector<double> apply(const DenseMatrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) throw ShapeError("apply: dimension mismatch");
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i] += m(i, j) * v[j];
  return out;
}

}  // namespace bt2::linalg
