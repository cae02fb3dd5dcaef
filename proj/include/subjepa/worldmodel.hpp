#pragma once

// Encoder f, residual predictor P, losses, one training step, checkpoints.
//
// Z is laid out as an N x B x D tensor whose flat row n*B + b is the latent
// of time step n in batch element b.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjepa/envs.hpp"
#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"
#include "subjepa/mlp.hpp"
#include "subjepa/normality.hpp"
#include "subjepa/subspace.hpp"

namespace subjepa {

using Latent = std::vector<double>;

struct ModelShape {
  std::size_t obs_dim = kObsDim;
  std::size_t action_dim = kActionDim;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> encoder_hidden{128, 64};
  std::vector<std::size_t> predictor_hidden{64, 64};
  Activation encoder_activation = Activation::Tanh;
  Activation predictor_activation = Activation::Tanh;
  bool residual = true;
};

class WorldModel {
public:
  WorldModel() = default;

  explicit WorldModel(const ModelShape& shape) : shape_(shape) {
    std::vector<std::size_t> enc{shape.obs_dim};
    enc.insert(enc.end(), shape.encoder_hidden.begin(), shape.encoder_hidden.end());
    enc.push_back(shape.latent_dim);
    encoder_ = Mlp(enc, shape.encoder_activation);
    std::vector<std::size_t> pred{shape.latent_dim + shape.action_dim};
    pred.insert(pred.end(), shape.predictor_hidden.begin(), shape.predictor_hidden.end());
    pred.push_back(shape.latent_dim);
    predictor_ = Mlp(pred, shape.predictor_activation);
  }

  /// Random encoder; predictor with a zero output layer, i.e. identity
  /// dynamics at initialization when residual.
  void init_random(Rng& rng) {
    encoder_.init_random(rng);
    predictor_.init_random(rng, shape_.residual);
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t latent_dim() const { return shape_.latent_dim; }
  std::size_t action_dim() const { return shape_.action_dim; }
  Mlp& encoder() { return encoder_; }
  const Mlp& encoder() const { return encoder_; }
  Mlp& predictor() { return predictor_; }
  const Mlp& predictor() const { return predictor_; }

  Latent encode(std::span<const double> obs) const {
    require(obs.size() == shape_.obs_dim, "encode: observation size mismatch");
    return encoder_.forward(obs);
  }

  Matrix encode_batch(const Matrix& obs, MlpCache* cache = nullptr) const {
    require(obs.cols() == shape_.obs_dim, "encode_batch: observation width mismatch");
    return encoder_.forward(obs, cache);
  }

  /// Renders the state and encodes it (planner interface).
  Latent encode_state(EnvId env, const State& s) const { return encode(render(env, s)); }

  /// zhat = z + MLP([z; a]) (or MLP([z; a]) without the residual).
  Matrix predict_batch(const Matrix& z, const Matrix& a, MlpCache* cache = nullptr) const {
    require(z.cols() == shape_.latent_dim && a.cols() == shape_.action_dim && z.rows() == a.rows(),
            "predict: shape mismatch");
    Matrix in(z.rows(), z.cols() + a.cols());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto dst = in.row(r);
      std::copy(z.row(r).begin(), z.row(r).end(), dst.begin());
      std::copy(a.row(r).begin(), a.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(z.cols()));
    }
    Matrix out = predictor_.forward(in, cache);
    if (shape_.residual) out += z;
    return out;
  }

  Latent predict(std::span<const double> z, std::span<const double> a) const {
    Matrix zm(1, z.size(), std::vector<double>(z.begin(), z.end()));
    Matrix am(1, a.size(), std::vector<double>(a.begin(), a.end()));
    return predict_batch(zm, am).data();
  }

  void zero_grads() {
    encoder_.zero_grads();
    predictor_.zero_grads();
  }

  bool same_params(const WorldModel& o) const {
    return encoder_.same_params(o.encoder_) && predictor_.same_params(o.predictor_);
  }

private:
  ModelShape shape_;
  Mlp encoder_;
  Mlp predictor_;
};

// ---------------------------------------------------------------------------
// Losses

struct PredLoss {
  double value = 0.0;
  Matrix d_pred;
  Matrix d_target;
};

/// Mean over rows of the per-row mean squared error; gradients flow into both
/// the prediction and the target.
inline PredLoss pred_loss(const Matrix& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols() && !pred.empty(),
          "pred_loss: shape mismatch");
  PredLoss out;
  out.d_pred = Matrix(pred.rows(), pred.cols());
  out.d_target = Matrix(pred.rows(), pred.cols());
  const double denom = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    out.value += d * d;
    out.d_pred.data()[i] = 2.0 * d / denom;
    out.d_target.data()[i] = -2.0 * d / denom;
  }
  out.value /= denom;
  return out;
}

inline PredLoss pred_loss(std::span<const double> pred, std::span<const double> target) {
  return pred_loss(Matrix(1, pred.size(), std::vector<double>(pred.begin(), pred.end())),
                   Matrix(1, target.size(), std::vector<double>(target.begin(), target.end())));
}

struct LossBreakdown {
  double l_pred = 0.0;
  double l_reg = 0.0;
  double l_ortho = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;
  double mu_ortho = 0.0;
};

struct TrainConfig {
  double lambda = 1.0;
  double mu_ortho = 1.0;
  std::size_t directions = 64; // M
  EpStatConfig ep;
  AdamConfig adam;
};

/// Observations (N x B x obs_dim) and actions ((N-1) x B x action_dim).
struct WindowBatch {
  Tensor3 obs;
  Tensor3 actions;
};

struct ObjectiveResult {
  LossBreakdown losses;
  Tensor3 latents; // Z
};

/// Forward pass of L_total for fixed slicing directions; when `accumulate`
/// is set, gradients land in the model (and trainable bank) buffers.
/// Buffers are not zeroed here.
inline ObjectiveResult evaluate_objective(WorldModel& model, ProjectionBank& bank, const WindowBatch& batch,
                                          const std::vector<DirectionSet>& dirs, const TrainConfig& cfg,
                                          bool accumulate) {
  const std::size_t n = batch.obs.dim0(), b = batch.obs.dim1(), dim = model.latent_dim();
  require(n >= 2, "training window must hold at least two observations");
  require(batch.actions.dim0() == n - 1 && batch.actions.dim1() == b, "window actions shape mismatch");
  require(bank.dim() == dim, "bank D != latent dim");

  MlpCache enc_cache, pred_cache;
  Tensor3 z(n, b, model.encode_batch(batch.obs.flat(), accumulate ? &enc_cache : nullptr));

  const std::size_t pairs = (n - 1) * b;
  Matrix z_in(pairs, dim), z_tgt(pairs, dim);
  std::copy(z.flat().data().begin(), z.flat().data().begin() + static_cast<std::ptrdiff_t>(pairs * dim),
            z_in.data().begin());
  std::copy(z.flat().data().begin() + static_cast<std::ptrdiff_t>(b * dim), z.flat().data().end(),
            z_tgt.data().begin());
  const Matrix z_hat = model.predict_batch(z_in, batch.actions.flat(), accumulate ? &pred_cache : nullptr);
  PredLoss lp = pred_loss(z_hat, z_tgt);

  const bool reg_grad = accumulate && cfg.lambda != 0.0;
  RegularizerOutput reg = subspace_regularizer(z, bank, dirs, cfg.ep, reg_grad);

  ObjectiveResult out;
  auto& L = out.losses;
  L.l_pred = lp.value;
  L.l_reg = reg.value;
  L.lambda = cfg.lambda;
  L.mu_ortho = bank.trainable() ? cfg.mu_ortho : 0.0;
  if (bank.trainable()) {
    if (accumulate) {
      L.l_ortho = ortho_penalty(bank, cfg.mu_ortho);
    } else {
      // Value only; keep the gradient buffers untouched.
      for (const auto& p : bank.mats()) {
        Matrix e = matmul_nt(p, p);
        for (std::size_t i = 0; i < e.rows(); ++i) e(i, i) -= 1.0;
        for (double v : e.data()) L.l_ortho += v * v;
      }
    }
  }
  L.l_total = L.l_pred + L.lambda * L.l_reg + L.mu_ortho * L.l_ortho;
  if (!std::isfinite(L.l_total))
    throw NonFiniteError("non-finite loss (l_pred=" + std::to_string(L.l_pred) + ", l_reg=" +
                         std::to_string(L.l_reg) + ")");

  if (accumulate) {
    Matrix dz(n * b, dim);
    // Predictor: residual path plus the MLP input slice for z.
    const Matrix d_in = model.predictor().backward(pred_cache, lp.d_pred);
    for (std::size_t r = 0; r < pairs; ++r) {
      auto dst = dz.row(r);
      const auto src = d_in.row(r);
      const auto dp = lp.d_pred.row(r);
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c] + (model.shape().residual ? dp[c] : 0.0);
    }
    for (std::size_t r = 0; r < pairs; ++r) {
      auto dst = dz.row(r + b);
      const auto dt = lp.d_target.row(r);
      for (std::size_t c = 0; c < dim; ++c) dst[c] += dt[c];
    }
    if (reg_grad) {
      for (std::size_t i = 0; i < dz.size(); ++i) dz.data()[i] += cfg.lambda * reg.grad.flat().data()[i];
      if (bank.trainable()) {
        std::vector<Tensor3> scaled = reg.subspace_grads;
        for (auto& g : scaled) g.flat() *= cfg.lambda;
        for (std::size_t k = 0; k < scaled.size(); ++k) bank.grads()[k] += matmul_tn(scaled[k].flat(), z.flat());
      }
    }
    model.encoder().backward(enc_cache, dz);
  }
  out.latents = std::move(z);
  return out;
}

/// Collects the parameter list optimized by the training step.
inline std::vector<ParamRef> trainable_params(WorldModel& model, ProjectionBank& bank) {
  std::vector<ParamRef> ps;
  collect_params(model.encoder(), ps);
  collect_params(model.predictor(), ps);
  if (bank.trainable()) {
    auto& mats = bank.mutable_mats();
    auto& grads = bank.grads();
    for (std::size_t k = 0; k < mats.size(); ++k) ps.push_back({mats[k].data(), grads[k].data()});
  }
  return ps;
}

/// Fresh directions for every subspace.
inline std::vector<DirectionSet> sample_direction_sets(Rng& rng, const ProjectionBank& bank, std::size_t m) {
  std::vector<DirectionSet> dirs;
  dirs.reserve(bank.num_subspaces());
  for (std::size_t k = 0; k < bank.num_subspaces(); ++k) dirs.push_back(sample_directions(rng, m, bank.sub_dim()));
  return dirs;
}

/// One optimization step on L_total with freshly sampled directions. Throws
/// NonFiniteError before touching the parameters if the loss is not finite.
inline LossBreakdown training_step(const WindowBatch& batch, WorldModel& model, ProjectionBank& bank,
                                   const TrainConfig& cfg, Rng& rng, Adam& opt, Tensor3* latents_out = nullptr) {
  model.zero_grads();
  bank.zero_grads();
  const auto dirs = sample_direction_sets(rng, bank, cfg.directions);
  ObjectiveResult res = evaluate_objective(model, bank, batch, dirs, cfg, true);
  opt.step(trainable_params(model, bank));
  if (latents_out) *latents_out = std::move(res.latents);
  return res.losses;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, '\n', then little-endian f64 parameters
// (encoder layers W,b ..., predictor layers W,b ..., bank matrices).

struct CheckpointMeta {
  std::string config_hash;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json train_summary; // optional, stored verbatim in the header
};

namespace detail {

inline nlohmann::json mlp_header(const Mlp& m) {
  return {{"sizes", m.sizes()}, {"hidden_activation", to_string(m.hidden_activation())}};
}

template <class Fn>
void for_each_model_block(const WorldModel& model, Fn&& fn) {
  for (const auto* net : {&model.encoder(), &model.predictor()})
    for (const auto& l : net->layers()) {
      fn(l.w.data());
      fn(l.b);
    }
}

inline void read_block(std::istream& f, std::vector<double>& v) {
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const WorldModel& model,
                            const ProjectionBank& bank, const CheckpointMeta& meta) {
  const auto& sh = model.shape();
  std::size_t count = 0;
  detail::for_each_model_block(model, [&](const std::vector<double>& v) { count += v.size(); });
  for (const auto& m : bank.mats()) count += m.size();
  nlohmann::json header = {{"format", "subjepa-ckpt-1"},
                           {"config_hash", meta.config_hash},
                           {"step", meta.step},
                           {"seed", meta.seed},
                           {"latent_dim", sh.latent_dim},
                           {"obs_dim", sh.obs_dim},
                           {"action_dim", sh.action_dim},
                           {"residual", sh.residual},
                           {"encoder", detail::mlp_header(model.encoder())},
                           {"predictor", detail::mlp_header(model.predictor())},
                           {"bank",
                            {{"K", bank.num_subspaces()},
                             {"D", bank.dim()},
                             {"d_s", bank.sub_dim()},
                             {"mode", to_string(bank.mode())},
                             {"seed", bank.seed()}}},
                           {"param_count", count}};
  if (!meta.train_summary.is_null()) header["train_summary"] = meta.train_summary;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open " + path.string());
  f << header.dump() << '\n';
  const auto write = [&](const std::vector<double>& v) {
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  detail::for_each_model_block(model, write);
  for (const auto& m : bank.mats()) write(m.data());
  if (!f) throw IoError("save_checkpoint: write failed");
}

struct LoadedCheckpoint {
  WorldModel model;
  ProjectionBank bank;
  CheckpointMeta meta;
  nlohmann::json header;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  LoadedCheckpoint out;
  try {
    out.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: bad header: ") + e.what());
  }
  const auto& h = out.header;
  if (h.value("format", "") != "subjepa-ckpt-1") throw IoError("load_checkpoint: unknown format");
  ModelShape sh;
  sh.latent_dim = h.at("latent_dim");
  sh.obs_dim = h.at("obs_dim");
  sh.action_dim = h.at("action_dim");
  sh.residual = h.at("residual");
  const auto enc_sizes = h.at("encoder").at("sizes").get<std::vector<std::size_t>>();
  const auto pred_sizes = h.at("predictor").at("sizes").get<std::vector<std::size_t>>();
  sh.encoder_hidden.assign(enc_sizes.begin() + 1, enc_sizes.end() - 1);
  sh.predictor_hidden.assign(pred_sizes.begin() + 1, pred_sizes.end() - 1);
  sh.encoder_activation = activation_from_string(h.at("encoder").at("hidden_activation"));
  sh.predictor_activation = activation_from_string(h.at("predictor").at("hidden_activation"));
  out.model = WorldModel(sh);

  const auto& bh = h.at("bank");
  const std::size_t k = bh.at("K"), dim = bh.at("D"), sub = bh.at("d_s");
  std::size_t count = 0;
  for (auto* net : {&out.model.encoder(), &out.model.predictor()})
    for (auto& l : net->layers()) {
      detail::read_block(f, l.w.data());
      detail::read_block(f, l.b);
      count += l.w.size() + l.b.size();
    }
  std::vector<Matrix> mats(k, Matrix(sub, dim));
  for (auto& m : mats) {
    detail::read_block(f, m.data());
    count += m.size();
  }
  out.bank = ProjectionBank(dim, sub, projection_mode_from_string(bh.at("mode")), std::move(mats),
                            bh.at("seed").get<std::uint64_t>());
  if (!f || count != h.at("param_count").get<std::size_t>()) throw IoError("load_checkpoint: truncated blob");
  out.meta.config_hash = h.at("config_hash");
  out.meta.step = h.at("step");
  out.meta.seed = h.at("seed");
  if (h.contains("train_summary")) out.meta.train_summary = h.at("train_summary");
  return out;
}

} // namespace subjepa
