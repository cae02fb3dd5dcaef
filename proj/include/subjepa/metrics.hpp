#pragma once

// Representation diagnostics: effective rank, temporal straightness,
// supervised probes and simple collapse monitors.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"
#include "subjepa/mlp.hpp"

namespace subjepa {

/// Sample covariance (N-1 denominator) of the rows of z.
inline Matrix covariance(const Matrix& z) {
  require(z.rows() >= 2, "covariance: need at least two rows");
  const std::size_t n = z.rows(), d = z.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += z(r, c);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) centered(r, c) = z(r, c) - mean[c];
  Matrix cov = matmul_tn(centered, centered);
  cov *= 1.0 / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) cov(i, j) = cov(j, i) = 0.5 * (cov(i, j) + cov(j, i));
  return cov;
}

/// exp of the Shannon entropy of the normalized covariance spectrum.
/// Eigenvalues below 1e-12 * lambda_max are dropped; zero variance gives 1.
inline double effective_rank(const Matrix& z) {
  require(z.rows() >= 2, "effective_rank: need N >= 2");
  const auto ev = sym_eigvals(covariance(z));
  const double lmax = ev.empty() ? 0.0 : ev.front();
  if (!(lmax > 0.0)) return 1.0;
  double total = 0.0;
  for (double l : ev)
    if (l >= 1e-12 * lmax) total += l;
  double h = 0.0;
  for (double l : ev) {
    if (l < 1e-12 * lmax) continue;
    const double p = l / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

struct StraightnessResult {
  double value = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Mean cosine similarity between consecutive velocities z_{t+1} - z_t.
/// Input is B x T x D. Pairs with a velocity norm <= 1e-12 are skipped.
inline StraightnessResult straightness(const Tensor3& z) {
  const std::size_t bsz = z.dim0(), t_len = z.dim1(), d = z.dim2();
  require(t_len >= 3, "straightness: need T >= 3");
  StraightnessResult out;
  std::vector<double> v0(d), v1(d);
  double acc = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t + 2 < t_len; ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        v0[c] = z(b, t + 1, c) - z(b, t, c);
        v1[c] = z(b, t + 2, c) - z(b, t + 1, c);
      }
      const double n0 = norm2(v0), n1 = norm2(v1);
      if (n0 <= 1e-12 || n1 <= 1e-12) {
        ++out.skipped;
        continue;
      }
      acc += std::clamp(dot(v0, v1) / (n0 * n1), -1.0, 1.0);
      ++out.used;
    }
  }
  out.value = out.used ? acc / static_cast<double>(out.used) : 0.0;
  return out;
}

/// Per-dimension standard deviation (N-1 denominator) of the rows of z.
inline std::vector<double> per_dim_std(const Matrix& z) {
  require(z.rows() >= 2, "per_dim_std: need at least two rows");
  std::vector<double> mean(z.cols(), 0.0), out(z.cols(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) mean[c] += z(r, c);
  for (auto& m : mean) m /= static_cast<double>(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) out[c] += (z(r, c) - mean[c]) * (z(r, c) - mean[c]);
  for (auto& v : out) v = std::sqrt(v / static_cast<double>(z.rows() - 1));
  return out;
}

// ---------------------------------------------------------------------------
// Probes

enum class ProbeKind { Linear, Mlp };

struct ProbeReport {
  std::string target;
  ProbeKind kind = ProbeKind::Linear;
  double mse = 0.0;                     // held-out, averaged over target dims
  double pearson_r = 0.0;               // held-out, averaged over target dims
  std::vector<double> per_dim_r;
  bool degenerate = false;              // some target dim had zero variance
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

/// Deterministic 80/20 split of row indices.
struct Split {
  std::vector<std::size_t> train, test;
};

inline Split train_test_split(std::size_t n, std::uint64_t seed, double train_fraction = 0.8) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return s;
}

inline Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

/// Pearson correlation; returns 0 and sets `degenerate` if either side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr) {
  require(a.size() == b.size() && a.size() >= 2, "pearson: need equal sizes >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  // Constant up to rounding, relative to the magnitude of the values.
  const auto flat = [n](double ss, double m) { return std::sqrt(ss / n) <= 1e-12 * std::max(1.0, std::abs(m)); };
  if (flat(saa, ma) || flat(sbb, mb)) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace detail {

inline void score_probe(const Matrix& pred, const Matrix& truth, ProbeReport& rep) {
  const std::size_t q = truth.cols();
  rep.per_dim_r.assign(q, 0.0);
  double mse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred.data()[i] - truth.data()[i];
    mse += e * e;
  }
  rep.mse = mse / static_cast<double>(pred.size());
  std::vector<double> a(pred.rows()), b(pred.rows());
  double rsum = 0.0;
  for (std::size_t c = 0; c < q; ++c) {
    for (std::size_t r = 0; r < pred.rows(); ++r) {
      a[r] = pred(r, c);
      b[r] = truth(r, c);
    }
    bool degen = false;
    rep.per_dim_r[c] = pearson(a, b, &degen);
    rep.degenerate = rep.degenerate || degen;
    rsum += rep.per_dim_r[c];
  }
  rep.pearson_r = rsum / static_cast<double>(q);
}

inline Matrix with_bias(const Matrix& x) {
  Matrix out(x.rows(), x.cols() + 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::copy(x.row(r).begin(), x.row(r).end(), out.row(r).begin());
    out(r, x.cols()) = 1.0;
  }
  return out;
}

} // namespace detail

/// Closed-form ridge regression (with intercept) on an 80/20 split.
inline ProbeReport linear_probe(const Matrix& latents, const Matrix& targets, std::uint64_t seed = 0,
                                double ridge = 1e-4, std::string target_name = "target") {
  require(latents.rows() == targets.rows(), "linear_probe: row count mismatch");
  require(latents.rows() > latents.cols(), "linear_probe: need N > D");
  require(ridge > 0.0, "linear_probe: ridge must be positive");
  const Split split = train_test_split(latents.rows(), seed);
  require(split.test.size() >= 2, "linear_probe: held-out split too small");
  const Matrix xtr = detail::with_bias(take_rows(latents, split.train));
  const Matrix ytr = take_rows(targets, split.train);
  Matrix gram = matmul_tn(xtr, xtr);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += ridge;
  const Matrix w = cholesky_solve(gram, matmul_tn(xtr, ytr));
  const Matrix pred = matmul(detail::with_bias(take_rows(latents, split.test)), w);

  ProbeReport rep;
  rep.target = std::move(target_name);
  rep.kind = ProbeKind::Linear;
  rep.train_size = split.train.size();
  rep.test_size = split.test.size();
  detail::score_probe(pred, take_rows(targets, split.test), rep);
  return rep;
}

struct MlpProbeConfig {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t steps = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Tanh MLP trained full-batch with Adam on standardized inputs and targets;
/// metrics are reported in the original target units.
inline ProbeReport mlp_probe(const Matrix& latents, const Matrix& targets, const MlpProbeConfig& cfg = {},
                             std::string target_name = "target") {
  require(latents.rows() == targets.rows(), "mlp_probe: row count mismatch");
  require(latents.rows() > latents.cols(), "mlp_probe: need N > D");
  const Split split = train_test_split(latents.rows(), cfg.seed);
  require(split.test.size() >= 2, "mlp_probe: held-out split too small");

  Matrix xtr = take_rows(latents, split.train), xte = take_rows(latents, split.test);
  Matrix ytr = take_rows(targets, split.train);
  const Matrix yte = take_rows(targets, split.test);

  const auto standardize = [](Matrix& fit, std::vector<Matrix*> apply) {
    const std::size_t d = fit.cols();
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (std::size_t r = 0; r < fit.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += fit(r, c);
    for (auto& m : mean) m /= static_cast<double>(fit.rows());
    for (std::size_t r = 0; r < fit.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) sd[c] += (fit(r, c) - mean[c]) * (fit(r, c) - mean[c]);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(fit.rows()));
    for (auto& s : sd) s = s > 1e-12 ? s : 1.0;
    apply.push_back(&fit);
    for (Matrix* m : apply)
      for (std::size_t r = 0; r < m->rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*m)(r, c) = ((*m)(r, c) - mean[c]) / sd[c];
    return std::make_pair(mean, sd);
  };
  standardize(xtr, {&xte});
  const auto [ymean, ysd] = standardize(ytr, {});

  std::vector<std::size_t> sizes{latents.cols()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(targets.cols());
  Mlp net(sizes, Activation::Tanh);
  Rng rng(derive_seed(cfg.seed, 17));
  net.init_random(rng);
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<ParamRef> params;
  collect_params(net, params);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    net.zero_grads();
    MlpCache cache;
    const Matrix out = net.forward(xtr, &cache);
    Matrix grad(out.rows(), out.cols());
    double loss = 0.0;
    const double denom = static_cast<double>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double e = out.data()[i] - ytr.data()[i];
      loss += e * e;
      grad.data()[i] = 2.0 * e / denom;
    }
    if (!std::isfinite(loss))
      throw NonFiniteError("mlp_probe: loss diverged at step " + std::to_string(step));
    net.backward(cache, grad);
    opt.step(params);
  }

  Matrix pred = net.forward(xte);
  for (std::size_t r = 0; r < pred.rows(); ++r)
    for (std::size_t c = 0; c < pred.cols(); ++c) pred(r, c) = pred(r, c) * ysd[c] + ymean[c];

  ProbeReport rep;
  rep.target = std::move(target_name);
  rep.kind = ProbeKind::Mlp;
  rep.train_size = split.train.size();
  rep.test_size = split.test.size();
  detail::score_probe(pred, yte, rep);
  return rep;
}

/// One row per latent: optional label columns, then z_0..z_{D-1}.
inline void write_latents_csv(const std::filesystem::path& path, const Matrix& z, const Matrix* labels = nullptr,
                              const std::vector<std::string>& label_names = {}) {
  std::ofstream f(path);
  if (!f) throw IoError("write_latents_csv: cannot open " + path.string());
  f.precision(10);
  bool first = true;
  const auto sep = [&] {
    if (!first) f << ',';
    first = false;
  };
  if (labels)
    for (const auto& n : label_names) {
      sep();
      f << n;
    }
  for (std::size_t c = 0; c < z.cols(); ++c) {
    sep();
    f << "z" << c;
  }
  f << '\n';
  for (std::size_t r = 0; r < z.rows(); ++r) {
    first = true;
    if (labels)
      for (std::size_t c = 0; c < labels->cols(); ++c) {
        sep();
        f << (*labels)(r, c);
      }
    for (std::size_t c = 0; c < z.cols(); ++c) {
      sep();
      f << z(r, c);
    }
    f << '\n';
  }
}

} // namespace subjepa
