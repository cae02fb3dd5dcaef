#pragma once

// Epps-Pulley statistic against a fixed N(0,1) null and the multi-subspace
// sliced regularizer built on it.
//
// For a sample x_1..x_n the statistic is the standard-normal-weighted L2
// distance between the empirical characteristic function and exp(-t^2/2):
//
//   T = n * int |phi_n(t) - exp(-t^2/2)|^2 phi(t) dt
//     = (1/n) sum_{j,k} exp(-(x_j - x_k)^2 / 2)
//       - sqrt(2) sum_j exp(-x_j^2 / 4) + n / sqrt(3).
//
// Samples are not standardized by default, so a collapsed (constant or
// shrunken) sample is penalized, not just a non-Gaussian shape.

#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"
#include "subjepa/subspace.hpp"

namespace subjepa {

enum class EpVariant { ClosedForm, Quadrature };

struct EpStatConfig {
  EpVariant variant = EpVariant::ClosedForm;
  double quad_t_max = 8.0;
  std::size_t quad_points = 4001;
  std::size_t max_samples = 4096;
  bool standardize = false;

  void validate() const {
    require(quad_points >= 3 && quad_points % 2 == 1, "EpStatConfig: quad_points must be odd and >= 3");
    require(quad_t_max > 0.0, "EpStatConfig: quad_t_max must be positive");
    require(max_samples >= 2, "EpStatConfig: max_samples must be >= 2");
  }
};

namespace detail {

inline void check_sample(std::span<const double> x) {
  require(!x.empty(), "ep_statistic: need at least one sample");
  for (double v : x)
    if (!std::isfinite(v)) throw NonFiniteError("ep_statistic: non-finite sample");
}

/// Sums with eight independent accumulators in a fixed order.
inline double sum8(const double* p, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += p[i + l];
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += p[i];
  return s;
}

/// Closed-form statistic; writes dT/dx into `grad` when it is non-empty.
inline double ep_closed_form(std::span<const double> x, std::span<double> grad) {
  const std::size_t n = x.size();
  const double nd = static_cast<double>(n);
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

  std::vector<double> dbuf(n), ebuf(n), wbuf(n);
  const double c = 2.0 / nd;
  double pair_sum = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const double xj = x[j];
    const std::size_t m = n - j - 1;
    const double* xk = x.data() + j + 1;
    double* d = dbuf.data();
    double* e = ebuf.data();
    for (std::size_t k = 0; k < m; ++k) {
      const double dk = xj - xk[k];
      d[k] = dk;
      e[k] = exp_nonpos(-0.5 * dk * dk);
    }
    pair_sum += sum8(e, m);
    if (want_grad) {
      double* w = wbuf.data();
      double* gk = grad.data() + j + 1;
      for (std::size_t k = 0; k < m; ++k) {
        w[k] = d[k] * e[k];
        gk[k] += c * w[k];
      }
      grad[j] -= c * sum8(w, m);
    }
  }

  double single = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double ej = exp_nonpos(-0.25 * x[j] * x[j]);
    single += ej;
    if (want_grad) grad[j] += std::numbers::sqrt2 * 0.5 * x[j] * ej;
  }
  return (nd + 2.0 * pair_sum) / nd - std::numbers::sqrt2 * single + nd / std::sqrt(3.0);
}

/// Composite Simpson on [-t_max, t_max] of n |phi_n(t) - e^{-t^2/2}|^2 phi(t).
inline double ep_quadrature(std::span<const double> x, const EpStatConfig& cfg) {
  const std::size_t n = x.size();
  const std::size_t pts = cfg.quad_points;
  const double h = 2.0 * cfg.quad_t_max / static_cast<double>(pts - 1);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t i = 0; i < pts; ++i) {
    const double t = -cfg.quad_t_max + h * static_cast<double>(i);
    double re = 0.0, im = 0.0;
    for (double v : x) {
      re += std::cos(t * v);
      im += std::sin(t * v);
    }
    re /= static_cast<double>(n);
    im /= static_cast<double>(n);
    const double target = std::exp(-0.5 * t * t);
    const double f = ((re - target) * (re - target) + im * im) * std::exp(-0.5 * t * t) * inv_sqrt_2pi;
    const double wgt = (i == 0 || i == pts - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    acc += wgt * f;
  }
  return static_cast<double>(n) * acc * h / 3.0;
}

} // namespace detail

struct EpResult {
  double value = 0.0;
  std::vector<double> grad;
};

namespace detail {

/// Optional standardization wrapper around the closed form.
inline double ep_closed_form_cfg(std::span<const double> x, std::span<double> grad, const EpStatConfig& cfg) {
  if (!cfg.standardize || x.size() < 2) return ep_closed_form(x, grad);
  const std::size_t n = x.size();
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var + 1e-12);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) / sd;
  std::vector<double> gy(grad.empty() ? 0 : n);
  const double value = ep_closed_form(y, gy);
  if (!grad.empty()) {
    double mg = 0.0, mgy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mg += gy[i];
      mgy += gy[i] * y[i];
    }
    mg /= static_cast<double>(n);
    mgy /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) grad[i] = (gy[i] - mg - y[i] * mgy) / sd;
  }
  return value;
}

} // namespace detail

inline double ep_statistic(std::span<const double> x, const EpStatConfig& cfg = {}) {
  cfg.validate();
  detail::check_sample(x);
  if (cfg.variant == EpVariant::Quadrature) {
    if (!cfg.standardize) return detail::ep_quadrature(x, cfg);
    std::vector<double> tmp(x.begin(), x.end());
    const double mean = std::accumulate(tmp.begin(), tmp.end(), 0.0) / static_cast<double>(tmp.size());
    double var = 0.0;
    for (double v : tmp) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(tmp.size()) + 1e-12);
    for (auto& v : tmp) v = (v - mean) / sd;
    return detail::ep_quadrature(tmp, cfg);
  }
  return detail::ep_closed_form_cfg(x, {}, cfg);
}

/// Closed-form value and analytic gradient (the variant field is ignored).
inline EpResult ep_statistic_grad(std::span<const double> x, const EpStatConfig& cfg = {}) {
  cfg.validate();
  detail::check_sample(x);
  EpResult r;
  r.grad.resize(x.size());
  r.value = detail::ep_closed_form_cfg(x, r.grad, cfg);
  return r;
}

// ---------------------------------------------------------------------------

struct RegularizerOutput {
  double value = 0.0;
  /// dL_reg/dZ (empty when gradients were not requested).
  Tensor3 grad;
  /// dL_reg/dZ^(k), needed to accumulate projection gradients.
  std::vector<Tensor3> subspace_grads;
};

/// L_reg = (1/KM) sum_k sum_m T(<Z^(k)_{n,b,:}, u_k^(m)>). `dirs[k]` holds the
/// M directions used in subspace k. When N*B exceeds cfg.max_samples a random
/// subset of rows (drawn from `subsample_rng`, or a fixed seed) is used.
inline RegularizerOutput subspace_regularizer(const Tensor3& z, const ProjectionBank& bank,
                                              const std::vector<DirectionSet>& dirs, const EpStatConfig& cfg,
                                              bool want_grad = true, Rng* subsample_rng = nullptr) {
  cfg.validate();
  const std::size_t k_count = bank.num_subspaces();
  require(z.dim2() == bank.dim(), "subspace_regularizer: latent dim != bank D");
  require(dirs.size() == k_count, "subspace_regularizer: need one direction set per subspace");
  const std::size_t rows = z.flat().rows();
  require(rows >= 2, "subspace_regularizer: need N*B >= 2");
  const std::size_t m_count = dirs[0].count();
  for (const auto& d : dirs) {
    require(d.dim() == bank.sub_dim(), "subspace_regularizer: direction dim != d_s");
    require(d.count() == m_count, "subspace_regularizer: direction counts differ across subspaces");
  }

  // Row subset.
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  Matrix zs;
  const bool subsample = rows > cfg.max_samples;
  if (subsample) {
    Rng fallback(0x5eed);
    Rng& r = subsample_rng ? *subsample_rng : fallback;
    r.shuffle(idx);
    idx.resize(cfg.max_samples);
    std::sort(idx.begin(), idx.end());
    zs = Matrix(idx.size(), z.dim2());
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(z.flat().row(idx[i]).begin(), z.flat().row(idx[i]).end(), zs.row(i).begin());
  }
  const Matrix& zused = subsample ? zs : z.flat();
  const std::size_t n = zused.rows();
  const double scale = 1.0 / static_cast<double>(k_count * m_count);

  RegularizerOutput out;
  std::vector<double> g(want_grad ? n : 0);
  for (std::size_t k = 0; k < k_count; ++k) {
    const Matrix zk = matmul_nt(zused, bank.mat(k));     // n x d_s
    const Matrix slices = matmul_nt(dirs[k].dirs, zk);   // M x n
    Matrix gslices(want_grad ? m_count : 0, want_grad ? n : 0);
    for (std::size_t m = 0; m < m_count; ++m) {
      const auto sample = slices.row(m);
      detail::check_sample(sample);
      const double t = detail::ep_closed_form_cfg(sample, want_grad ? std::span<double>(g) : std::span<double>(), cfg);
      out.value += t;
      if (want_grad)
        for (std::size_t i = 0; i < n; ++i) gslices(m, i) = scale * g[i];
    }
    if (want_grad) {
      Matrix gk_used = matmul_tn(gslices, dirs[k].dirs); // n x d_s
      Tensor3 gk(z.dim0(), z.dim1(), bank.sub_dim());
      if (subsample) {
        for (std::size_t i = 0; i < n; ++i)
          std::copy(gk_used.row(i).begin(), gk_used.row(i).end(), gk.flat().row(idx[i]).begin());
      } else {
        gk.flat() = std::move(gk_used);
      }
      out.subspace_grads.push_back(std::move(gk));
    }
  }
  out.value *= scale;
  if (want_grad) out.grad = project_backward(bank, out.subspace_grads);
  return out;
}

} // namespace subjepa
