#pragma once

// Minimal dense linear algebra: row-major f64 matrices, Householder QR,
// cyclic Jacobi eigenvalues, and a reproducible xoshiro256** RNG.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subjepa/error.hpp"

namespace subjepa {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length != rows*cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require(rows_ == o.rows_ && cols_ == o.cols_, "Matrix +=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Matrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// N x B x D tensor stored as an (N*B) x D matrix; slice (n, b) is row n*B + b.
class Tensor3 {
public:
  Tensor3() = default;
  Tensor3(std::size_t n, std::size_t b, std::size_t d) : n_(n), b_(b), flat_(n * b, d) {}
  Tensor3(std::size_t n, std::size_t b, Matrix flat) : n_(n), b_(b), flat_(std::move(flat)) {
    require(flat_.rows() == n_ * b_, "Tensor3: flat rows != n*b");
  }

  std::size_t dim0() const { return n_; }
  std::size_t dim1() const { return b_; }
  std::size_t dim2() const { return flat_.cols(); }

  double& operator()(std::size_t n, std::size_t b, std::size_t d) { return flat_(n * b_ + b, d); }
  double operator()(std::size_t n, std::size_t b, std::size_t d) const { return flat_(n * b_ + b, d); }

  std::span<double> vec(std::size_t n, std::size_t b) { return flat_.row(n * b_ + b); }
  std::span<const double> vec(std::size_t n, std::size_t b) const { return flat_.row(n * b_ + b); }

  Matrix& flat() { return flat_; }
  const Matrix& flat() const { return flat_; }

  bool operator==(const Tensor3&) const = default;

private:
  std::size_t n_ = 0;
  std::size_t b_ = 0;
  Matrix flat_;
};

// ---------------------------------------------------------------------------
// Products. Inner loops are written as axpy over contiguous rows so they
// vectorize without reassociating floating-point sums.

/// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn: row count mismatch");
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* br = b.row(r).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      double* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
  return c;
}

/// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt: column count mismatch");
  return matmul(a, b.transpose());
}

inline std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  require(a.cols() == x.size(), "matvec: dimension mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

inline double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

/// max |(A A^T - I)_ij|
inline double orthonormality_error(const Matrix& a) {
  return max_abs_diff(matmul_nt(a, a), Matrix::identity(a.rows()));
}

// ---------------------------------------------------------------------------
// RNG

/// splitmix64 step; used to expand a 64-bit seed into generator state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent child seed from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x6a09e667f3bcc909ULL * (stream + 1));
  splitmix64(s);
  return splitmix64(s);
}

/// xoshiro256** seeded through splitmix64. Gaussians via Box-Muller.
class Rng {
public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  /// Raw state constructor, mainly for checking reference vectors.
  static Rng from_state(const std::array<std::uint64_t, 4>& state) {
    Rng r;
    r.s_ = state;
    return r;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  std::uint64_t seed() const { return seed_; }

  result_type operator()() { return next(); }

  std::uint64_t next() {
    const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = std::rotl(s_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    require(n > 0, "Rng::index: n must be positive");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

private:
  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  require(rows >= 1 && cols >= 1, "gaussian_matrix: rows and cols must be >= 1");
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = rng.gaussian();
  return m;
}

// ---------------------------------------------------------------------------
// Householder QR

/// Orthonormalizes the rows of `a` (d_s x D, d_s <= D) by Householder QR of
/// a^T. Signs follow R_ii >= 0, so the result spans the same row space and is
/// unique. Throws RankDeficientError when some |R_ii| < 1e-12.
inline Matrix qr_orthonormal_rows(const Matrix& a) {
  const std::size_t n = a.rows(); // number of vectors
  const std::size_t m = a.cols(); // ambient dimension
  require(n >= 1 && n <= m, "qr_orthonormal_rows: need 1 <= rows <= cols");

  // Work on columns of a^T, i.e. rows of a: w holds a^T (m x n).
  Matrix w = a.transpose();
  std::vector<std::vector<double>> reflectors(n);
  std::vector<double> diag(n, 0.0);

  for (std::size_t k = 0; k < n; ++k) {
    double tail = 0.0;
    for (std::size_t i = k + 1; i < m; ++i) tail += w(i, k) * w(i, k);
    const double head = w(k, k);
    const double normx = std::sqrt(head * head + tail);
    if (normx < 1e-12) throw RankDeficientError("qr_orthonormal_rows: rank-deficient input");
    if (tail == 0.0) {
      // Already upper-triangular in this column; identity reflector.
      diag[k] = head;
    } else {
      const double alpha = head > 0 ? -normx : normx;
      std::vector<double> v(m - k);
      v[0] = head - alpha;
      for (std::size_t i = k + 1; i < m; ++i) v[i - k] = w(i, k);
      const double vnorm2 = v[0] * v[0] + tail;
      for (std::size_t j = k; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = k; i < m; ++i) s += v[i - k] * w(i, j);
        s = 2.0 * s / vnorm2;
        for (std::size_t i = k; i < m; ++i) w(i, j) -= s * v[i - k];
      }
      diag[k] = w(k, k);
      for (auto& x : v) x /= std::sqrt(vnorm2);
      reflectors[k] = std::move(v);
    }
    if (std::abs(diag[k]) < 1e-12)
      throw RankDeficientError("qr_orthonormal_rows: rank-deficient input");
  }

  // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I_m.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t kk = n; kk-- > 0;) {
    const auto& v = reflectors[kk];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = kk; i < m; ++i) s += v[i - kk] * q(i, j);
      s *= 2.0;
      for (std::size_t i = kk; i < m; ++i) q(i, j) -= s * v[i - kk];
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    if (diag[j] < 0)
      for (std::size_t i = 0; i < m; ++i) q(i, j) = -q(i, j);
  return q.transpose();
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues (cyclic Jacobi)

inline std::vector<double> sym_eigvals(const Matrix& s) {
  require(s.rows() == s.cols(), "sym_eigvals: matrix must be square");
  const std::size_t n = s.rows();
  double scale = 0.0;
  for (double v : s.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-9 * std::max(1.0, scale))
        throw ContractError("sym_eigvals: input is not symmetric");

  Matrix a = s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= 1e-32 * std::max(diag, 1e-300) || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
      }
    }
  }

  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

// ---------------------------------------------------------------------------
// Small SPD solve

/// Solves S X = B for symmetric positive-definite S via Cholesky.
inline Matrix cholesky_solve(const Matrix& s, const Matrix& b) {
  require(s.rows() == s.cols() && s.rows() == b.rows(), "cholesky_solve: shape mismatch");
  const std::size_t n = s.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw ContractError("cholesky_solve: matrix is not positive definite");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double v = x(i, c);
      for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * x(k, c);
      x(i, c) = v / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double v = x(i, c);
      for (std::size_t k = i + 1; k < n; ++k) v -= l(k, i) * x(k, c);
      x(i, c) = v / l(i, i);
    }
  }
  return x;
}

namespace detail {

/// exp(x) for x <= 0, branch-free so that loops over it vectorize.
/// Relative error ~3e-16 down to exp(-700); arguments below -700 saturate
/// there (contributions of order 1e-304).
inline double exp_nonpos(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShifter = 6755399441055744.0; // 1.5 * 2^52
  x = x < -700.0 ? -700.0 : x;
  const double t = x * kLog2e + kShifter;
  const double n = t - kShifter;
  const double r = x - n * kLn2Hi - n * kLn2Lo;
  double p = 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const std::int64_t bits = (std::bit_cast<std::int64_t>(t) + 1023) << 52;
  return p * std::bit_cast<double>(bits);
}

} // namespace detail

} // namespace subjepa
