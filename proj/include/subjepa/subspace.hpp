#pragma once

// Bank of K projections R^D -> R^{d_s} and random slicing directions.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"

namespace subjepa {

enum class ProjectionMode { OrthoFrozen, RandFrozen, TrainableOrthoReg };

inline std::string to_string(ProjectionMode m) {
  switch (m) {
    case ProjectionMode::OrthoFrozen: return "ortho_frozen";
    case ProjectionMode::RandFrozen: return "rand_frozen";
    case ProjectionMode::TrainableOrthoReg: return "trainable_ortho_reg";
  }
  return "?";
}

inline ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "ortho_frozen") return ProjectionMode::OrthoFrozen;
  if (s == "rand_frozen") return ProjectionMode::RandFrozen;
  if (s == "trainable_ortho_reg") return ProjectionMode::TrainableOrthoReg;
  throw ContractError("unknown projection mode: " + s);
}

/// round(D / K) with ties to even.
inline std::size_t default_subspace_dim(std::size_t dim, std::size_t k) {
  require(k >= 1, "default_subspace_dim: K must be >= 1");
  require(k <= dim, "default_subspace_dim: K must not exceed D");
  const std::size_t q = dim / k;
  const std::size_t r = dim % k;
  std::size_t out = q;
  if (2 * r > k || (2 * r == k && q % 2 == 1)) out = q + 1;
  return out;
}

class ProjectionBank {
public:
  ProjectionBank() = default;
  ProjectionBank(std::size_t dim, std::size_t sub_dim, ProjectionMode mode, std::vector<Matrix> mats,
                 std::uint64_t seed = 0)
      : dim_(dim), sub_dim_(sub_dim), mode_(mode), seed_(seed), mats_(std::move(mats)) {
    require(!mats_.empty(), "ProjectionBank: need at least one matrix");
    for (const auto& m : mats_)
      require(m.rows() == sub_dim_ && m.cols() == dim_, "ProjectionBank: matrix shape != d_s x D");
    if (trainable())
      for (const auto& m : mats_) grads_.emplace_back(m.rows(), m.cols());
  }

  std::size_t num_subspaces() const { return mats_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t sub_dim() const { return sub_dim_; }
  ProjectionMode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }
  bool trainable() const { return mode_ == ProjectionMode::TrainableOrthoReg; }

  const Matrix& mat(std::size_t k) const { return mats_.at(k); }
  const std::vector<Matrix>& mats() const { return mats_; }

  /// Parameter access for the optimizer; only legal in trainable mode.
  std::vector<Matrix>& mutable_mats() {
    if (!trainable()) throw ContractError("ProjectionBank: frozen projections are immutable");
    return mats_;
  }
  std::vector<Matrix>& grads() {
    if (!trainable()) throw ContractError("ProjectionBank: frozen banks carry no gradients");
    return grads_;
  }
  const std::vector<Matrix>& grads() const { return grads_; }
  bool has_grads() const { return !grads_.empty(); }

  void zero_grads() {
    for (auto& g : grads_) g.fill(0.0);
  }

  bool operator==(const ProjectionBank&) const = default;

private:
  std::size_t dim_ = 0;
  std::size_t sub_dim_ = 0;
  ProjectionMode mode_ = ProjectionMode::OrthoFrozen;
  std::uint64_t seed_ = 0;
  std::vector<Matrix> mats_;
  std::vector<Matrix> grads_;
};

namespace detail {

inline Matrix orthonormal_rows_with_retry(Rng& rng, std::size_t rows, std::size_t cols) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    try {
      return qr_orthonormal_rows(gaussian_matrix(rng, rows, cols));
    } catch (const RankDeficientError&) {
    }
  }
  throw RankDeficientError("build_bank: QR failed on 8 consecutive Gaussian draws");
}

} // namespace detail

/// Builds K projections. Orthonormal modes use one QR of a (K*d_s) x D draw
/// when it fits (so the K subspaces are mutually orthogonal) unless
/// `block_qr` is false; otherwise each matrix gets its own QR.
inline ProjectionBank build_bank(Rng& rng, std::size_t dim, std::size_t k, std::size_t sub_dim,
                                 ProjectionMode mode, bool block_qr = true) {
  require(k >= 1, "build_bank: K must be >= 1");
  require(sub_dim >= 1 && sub_dim <= dim, "build_bank: need 1 <= d_s <= D");
  std::vector<Matrix> mats;
  mats.reserve(k);
  if (mode == ProjectionMode::RandFrozen) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 0; i < k; ++i) {
      Matrix g = gaussian_matrix(rng, sub_dim, dim);
      g *= scale;
      mats.push_back(std::move(g));
    }
  } else if (block_qr && k * sub_dim <= dim) {
    const Matrix q = detail::orthonormal_rows_with_retry(rng, k * sub_dim, dim);
    for (std::size_t i = 0; i < k; ++i) {
      Matrix p(sub_dim, dim);
      for (std::size_t r = 0; r < sub_dim; ++r)
        for (std::size_t c = 0; c < dim; ++c) p(r, c) = q(i * sub_dim + r, c);
      mats.push_back(std::move(p));
    }
  } else {
    for (std::size_t i = 0; i < k; ++i)
      mats.push_back(detail::orthonormal_rows_with_retry(rng, sub_dim, dim));
  }
  return ProjectionBank(dim, sub_dim, mode, std::move(mats), rng.seed());
}

/// Z^(k) = Z P_k^T for every k.
inline std::vector<Tensor3> project(const ProjectionBank& bank, const Tensor3& z) {
  require(z.dim2() == bank.dim(), "project: latent dim != bank D");
  std::vector<Tensor3> out;
  out.reserve(bank.num_subspaces());
  for (const auto& p : bank.mats()) out.emplace_back(z.dim0(), z.dim1(), matmul_nt(z.flat(), p));
  return out;
}

/// Adjoint of project: dL/dZ = sum_k G_k P_k.
inline Tensor3 project_backward(const ProjectionBank& bank, const std::vector<Tensor3>& upstream) {
  require(upstream.size() == bank.num_subspaces(), "project_backward: need one gradient per subspace");
  require(!upstream.empty(), "project_backward: empty upstream");
  const std::size_t n = upstream[0].dim0(), b = upstream[0].dim1();
  Tensor3 dz(n, b, bank.dim());
  for (std::size_t k = 0; k < upstream.size(); ++k) {
    const auto& g = upstream[k];
    require(g.dim0() == n && g.dim1() == b && g.dim2() == bank.sub_dim(),
            "project_backward: gradient shape mismatch");
    dz.flat() += matmul(g.flat(), bank.mat(k));
  }
  return dz;
}

/// As above; in trainable mode also accumulates dL/dP_k = G_k^T Z.
inline Tensor3 project_backward(ProjectionBank& bank, const std::vector<Tensor3>& upstream,
                                const Tensor3& z) {
  Tensor3 dz = project_backward(static_cast<const ProjectionBank&>(bank), upstream);
  if (bank.trainable()) {
    require(z.dim2() == bank.dim() && z.flat().rows() == upstream[0].flat().rows(),
            "project_backward: latent shape mismatch");
    for (std::size_t k = 0; k < upstream.size(); ++k)
      bank.grads()[k] += matmul_tn(upstream[k].flat(), z.flat());
  }
  return dz;
}

/// M unit vectors in R^{d_s}, stored as rows.
struct DirectionSet {
  Matrix dirs;
  std::size_t count() const { return dirs.rows(); }
  std::size_t dim() const { return dirs.cols(); }
};

inline DirectionSet sample_directions(Rng& rng, std::size_t m, std::size_t sub_dim) {
  require(m >= 1 && sub_dim >= 1, "sample_directions: M and d_s must be >= 1");
  Matrix d(m, sub_dim);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = d.row(i);
    double nrm = 0.0;
    do {
      for (auto& v : row) v = rng.gaussian();
      nrm = norm2(row);
    } while (!(nrm > 1e-150));
    for (auto& v : row) v /= nrm;
  }
  return {std::move(d)};
}

/// sum_k ||P_k P_k^T - I||_F^2; adds 4 (P_k P_k^T - I) P_k to the bank gradients
/// scaled by `weight`.
inline double ortho_penalty(ProjectionBank& bank, double weight = 1.0) {
  if (!bank.trainable()) throw ContractError("ortho_penalty: bank is frozen");
  double total = 0.0;
  for (std::size_t k = 0; k < bank.num_subspaces(); ++k) {
    const Matrix& p = bank.mat(k);
    Matrix e = matmul_nt(p, p);
    for (std::size_t i = 0; i < e.rows(); ++i) e(i, i) -= 1.0;
    for (double v : e.data()) total += v * v;
    Matrix g = matmul(e, p);
    g *= 4.0 * weight;
    bank.grads()[k] += g;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Serialization: <stem>.bin holds K*d_s*D little-endian f64 values,
// <stem>.json holds {K, D, d_s, mode, seed}.

inline void save_bank(const ProjectionBank& bank, const std::filesystem::path& stem) {
  nlohmann::json side = {{"K", bank.num_subspaces()},
                         {"D", bank.dim()},
                         {"d_s", bank.sub_dim()},
                         {"mode", to_string(bank.mode())},
                         {"seed", bank.seed()}};
  std::ofstream js(stem.string() + ".json");
  if (!js) throw IoError("save_bank: cannot open " + stem.string() + ".json");
  js << side.dump(2) << '\n';
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw IoError("save_bank: cannot open " + stem.string() + ".bin");
  for (const auto& m : bank.mats())
    bin.write(reinterpret_cast<const char*>(m.data().data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline ProjectionBank load_bank(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  if (!js) throw IoError("load_bank: cannot open " + stem.string() + ".json");
  const auto side = nlohmann::json::parse(js);
  const std::size_t k = side.at("K"), dim = side.at("D"), sub = side.at("d_s");
  const auto mode = projection_mode_from_string(side.at("mode"));
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw IoError("load_bank: cannot open " + stem.string() + ".bin");
  std::vector<Matrix> mats;
  for (std::size_t i = 0; i < k; ++i) {
    Matrix m(sub, dim);
    bin.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!bin) throw IoError("load_bank: truncated blob");
    mats.push_back(std::move(m));
  }
  return ProjectionBank(dim, sub, mode, std::move(mats), side.at("seed").get<std::uint64_t>());
}

} // namespace subjepa
