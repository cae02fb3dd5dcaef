#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "subjepa/worldmodel.hpp"

using namespace subjepa;

namespace {

ModelShape tiny_shape() {
  ModelShape s;
  s.obs_dim = 10;
  s.latent_dim = 8;
  s.encoder_hidden = {12, 9};
  s.predictor_hidden = {11, 7};
  return s;
}

WindowBatch random_batch(Rng& r, std::size_t n, std::size_t b, std::size_t obs, std::size_t adim = 2) {
  return {Tensor3(n, b, gaussian_matrix(r, n * b, obs)), Tensor3(n - 1, b, gaussian_matrix(r, (n - 1) * b, adim))};
}

void perturb_all(WorldModel& m, Rng& r, double scale) {
  for (auto* net : {&m.encoder(), &m.predictor()})
    for (auto& l : net->layers()) {
      for (auto& v : l.w.data()) v += scale * r.gaussian();
      for (auto& v : l.b) v += scale * r.gaussian();
    }
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

} // namespace

TEST(WorldModel, ZeroWeightsEncodeToZero) {
  WorldModel m(tiny_shape());
  for (double v : m.encode(std::vector<double>(10, 0.7))) EXPECT_EQ(v, 0.0);
}

TEST(WorldModel, SingleLinearEncoder) {
  ModelShape s = tiny_shape();
  s.encoder_hidden.clear();
  WorldModel m(s);
  Rng r(1);
  m.init_random(r);
  const std::vector<double> obs{1, 0, 2, 0, 0, -1, 0, 0, 0.5, 0};
  const auto z = m.encode(obs);
  const auto ref = matvec(m.encoder().layers()[0].w, obs);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(z[i], ref[i], 1e-14);
  EXPECT_THROW(m.encode(std::vector<double>(9)), ContractError);
}

TEST(WorldModel, ResidualPredictorIsIdentityAtInit) {
  WorldModel m(tiny_shape());
  Rng r(2);
  m.init_random(r);
  const std::vector<double> z{1, -2, 3, 0.5, 0, 0, 1, 2};
  const auto zh = m.predict(z, std::vector<double>{0.05, -0.03});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(zh[i], z[i]);
}

TEST(WorldModel, ZeroWeightsPredictLastBias) {
  ModelShape s = tiny_shape();
  s.residual = false;
  WorldModel m(s);
  for (std::size_t i = 0; i < 8; ++i) m.predictor().layers().back().b[i] = 0.1 * static_cast<double>(i);
  const auto zh = m.predict(std::vector<double>(8, 3.0), std::vector<double>{1.0, 1.0});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(zh[i], 0.1 * static_cast<double>(i));
}

TEST(WorldModel, PredictMatchesNaiveConcatenation) {
  WorldModel m(tiny_shape());
  Rng r(3);
  m.init_random(r);
  perturb_all(m, r, 0.2);
  const Matrix z = gaussian_matrix(r, 3, 8), a = gaussian_matrix(r, 3, 2);
  const Matrix zh = m.predict_batch(z, a);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> in(z.row(i).begin(), z.row(i).end());
    in.insert(in.end(), a.row(i).begin(), a.row(i).end());
    const auto delta = m.predictor().forward(in);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(zh(i, c), z(i, c) + delta[c], 1e-12);
  }
  EXPECT_THROW(m.predict_batch(z, Matrix(3, 3)), ContractError);
}

TEST(PredLoss, ValuesAndGradients) {
  const auto zero = pred_loss(std::vector<double>{1, 2}, std::vector<double>{1, 2});
  EXPECT_EQ(zero.value, 0.0);
  for (double v : zero.d_pred.data()) EXPECT_EQ(v, 0.0);
  const auto half = pred_loss(std::vector<double>{1, 0}, std::vector<double>{0, 0});
  EXPECT_DOUBLE_EQ(half.value, 0.5);
  EXPECT_DOUBLE_EQ(half.d_pred(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(half.d_target(0, 0), -1.0);
  EXPECT_THROW(pred_loss(Matrix(2, 3), Matrix(2, 2)), ContractError);

  Rng r(4);
  Matrix p = gaussian_matrix(r, 3, 5), t = gaussian_matrix(r, 3, 5);
  const auto l = pred_loss(p, t);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = p.data()[i];
    p.data()[i] = v + h;
    const double fp = pred_loss(p, t).value;
    p.data()[i] = v - h;
    const double fm = pred_loss(p, t).value;
    p.data()[i] = v;
    EXPECT_NEAR(l.d_pred.data()[i], (fp - fm) / (2 * h), 1e-5 * std::max(1.0, std::abs(l.d_pred.data()[i])));
    EXPECT_EQ(l.d_target.data()[i], -l.d_pred.data()[i]);
  }
}

// Gradient of L_total with respect to every parameter, fixed directions.
TEST(Objective, TotalGradientMatchesFiniteDifferences) {
  for (auto mode : {ProjectionMode::OrthoFrozen, ProjectionMode::TrainableOrthoReg}) {
    for (double lambda : {0.0, 0.7}) {
      Rng r(5);
      WorldModel m(tiny_shape());
      m.init_random(r);
      perturb_all(m, r, 0.1); // leave the zero output layer
      auto bank = build_bank(r, 8, 2, 4, mode);
      if (bank.trainable())
        for (auto& p : bank.mutable_mats()) p.data()[0] += 0.05;
      const WindowBatch batch = random_batch(r, 3, 4, 10);
      TrainConfig cfg;
      cfg.lambda = lambda;
      cfg.mu_ortho = 0.3;
      cfg.directions = 5;
      const auto dirs = sample_direction_sets(r, bank, cfg.directions);

      m.zero_grads();
      bank.zero_grads();
      const auto res = evaluate_objective(m, bank, batch, dirs, cfg, true);
      const auto& L = res.losses;
      EXPECT_EQ(L.l_total, L.l_pred + L.lambda * L.l_reg + L.mu_ortho * L.l_ortho);
      if (!bank.trainable()) {
        EXPECT_EQ(L.l_ortho, 0.0);
      }

      const double h = 1e-6;
      double worst = 0.0;
      const auto loss = [&] { return evaluate_objective(m, bank, batch, dirs, cfg, false).losses.l_total; };
      const auto check = [&](double& param, double analytic) {
        const double v = param;
        param = v + h;
        const double fp = loss();
        param = v - h;
        const double fm = loss();
        param = v;
        const double fd = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic - fd) / std::max(1e-3, std::abs(fd)));
      };
      for (auto* net : {&m.encoder(), &m.predictor()})
        for (auto& l : net->layers()) {
          for (std::size_t i = 0; i < l.w.size(); ++i) check(l.w.data()[i], l.dw.data()[i]);
          for (std::size_t i = 0; i < l.b.size(); ++i) check(l.b[i], l.db[i]);
        }
      if (bank.trainable()) {
        const auto grads = bank.grads();
        for (std::size_t k = 0; k < bank.num_subspaces(); ++k)
          for (std::size_t i = 0; i < bank.mat(k).size(); ++i) check(bank.mutable_mats()[k].data()[i], grads[k].data()[i]);
      }
      EXPECT_LT(worst, 1e-4) << to_string(mode) << " lambda " << lambda;
    }
  }
}

TEST(Objective, LambdaZeroComputesButDoesNotApplyRegularizer) {
  Rng r(6);
  WorldModel a(tiny_shape());
  a.init_random(r);
  perturb_all(a, r, 0.1);
  WorldModel b = a;
  auto bank = build_bank(r, 8, 2, 4, ProjectionMode::OrthoFrozen);
  const WindowBatch batch = random_batch(r, 3, 4, 10);
  TrainConfig with_reg, no_reg;
  no_reg.lambda = 0.0;
  const auto dirs = sample_direction_sets(r, bank, 8);

  a.zero_grads();
  const auto la = evaluate_objective(a, bank, batch, dirs, no_reg, true).losses;
  EXPECT_GT(la.l_reg, 0.0);
  EXPECT_EQ(la.l_total, la.l_pred);

  // The same step with lambda > 0 changes the encoder gradient.
  b.zero_grads();
  evaluate_objective(b, bank, batch, dirs, with_reg, true);
  EXPECT_NE(a.encoder().layers()[0].dw, b.encoder().layers()[0].dw);
}

TEST(Objective, RejectsShortWindow) {
  Rng r(7);
  WorldModel m(tiny_shape());
  auto bank = build_bank(r, 8, 1, 8, ProjectionMode::OrthoFrozen);
  WindowBatch one{Tensor3(1, 2, 10), Tensor3(0, 2, 2)};
  EXPECT_THROW(evaluate_objective(m, bank, one, sample_direction_sets(r, bank, 2), {}, false), ContractError);
}

TEST(TrainingStep, NonFiniteLossAbortsBeforeUpdate) {
  Rng r(8);
  WorldModel m(tiny_shape());
  m.init_random(r);
  auto bank = build_bank(r, 8, 2, 4, ProjectionMode::OrthoFrozen);
  const WindowBatch batch = random_batch(r, 2, 3, 10);
  m.predictor().layers().back().b[0] = std::numeric_limits<double>::quiet_NaN();
  const WorldModel before = m;
  Adam opt;
  TrainConfig cfg;
  EXPECT_THROW(training_step(batch, m, bank, cfg, r, opt), NonFiniteError);
  EXPECT_TRUE(m.encoder().same_params(before.encoder()));
  EXPECT_EQ(m.predictor().layers()[0].w, before.predictor().layers()[0].w);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(TrainingStep, DeterministicAndFrozenBankUntouched) {
  const auto run = [](std::uint64_t seed) {
    Rng r(seed);
    WorldModel m(tiny_shape());
    m.init_random(r);
    auto bank = build_bank(r, 8, 2, 4, ProjectionMode::OrthoFrozen);
    const auto bank0 = bank.mats();
    Adam opt;
    TrainConfig cfg;
    cfg.directions = 4;
    for (int step = 0; step < 100; ++step) training_step(random_batch(r, 3, 4, 10), m, bank, cfg, r, opt);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(bank.mat(k), bank0[k]);
    return m;
  };
  const WorldModel a = run(11), b = run(11), c = run(12);
  EXPECT_TRUE(a.same_params(b));
  EXPECT_FALSE(a.same_params(c));
}

TEST(TrainingStep, TrainableBankMoves) {
  Rng r(9);
  WorldModel m(tiny_shape());
  m.init_random(r);
  auto bank = build_bank(r, 8, 2, 4, ProjectionMode::TrainableOrthoReg);
  const auto bank0 = bank.mats();
  Adam opt;
  TrainConfig cfg;
  const auto l = training_step(random_batch(r, 3, 4, 10), m, bank, cfg, r, opt);
  EXPECT_NE(bank.mat(0), bank0[0]);
  EXPECT_EQ(l.mu_ortho, cfg.mu_ortho);
}

TEST(TrainingStep, PredictorLearnsActionEffects) {
  // Observations are a fixed linear map of a 2-D point moved by the actions.
  // After training, the predictor must beat identity dynamics on fresh data.
  Rng r(10);
  WorldModel m(tiny_shape());
  m.init_random(r);
  auto bank = build_bank(r, 8, 2, 4, ProjectionMode::OrthoFrozen);
  const Matrix mix = gaussian_matrix(r, 10, 2);
  Adam opt({3e-3, 0.9, 0.999, 1e-8});
  TrainConfig cfg;
  cfg.directions = 8;
  const auto make = [&] {
    WindowBatch b{Tensor3(3, 32, 10), Tensor3(2, 32, 2)};
    for (std::size_t j = 0; j < 32; ++j) {
      std::array<double, 2> p{r.uniform(-1, 1), r.uniform(-1, 1)};
      for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t o = 0; o < 10; ++o) b.obs(t, j, o) = mix(o, 0) * p[0] + mix(o, 1) * p[1];
        if (t < 2) {
          const double a0 = r.uniform(-0.3, 0.3), a1 = r.uniform(-0.3, 0.3);
          b.actions(t, j, 0) = a0;
          b.actions(t, j, 1) = a1;
          p[0] += a0;
          p[1] += a1;
        }
      }
    }
    return b;
  };
  for (int step = 0; step < 800; ++step) training_step(make(), m, bank, cfg, r, opt);

  WorldModel identity = m;
  auto& last = identity.predictor().layers().back();
  last.w.fill(0.0);
  std::fill(last.b.begin(), last.b.end(), 0.0);
  const WindowBatch test = make();
  const auto dirs = sample_direction_sets(r, bank, 8);
  const double trained = evaluate_objective(m, bank, test, dirs, cfg, false).losses.l_pred;
  const double baseline = evaluate_objective(identity, bank, test, dirs, cfg, false).losses.l_pred;
  EXPECT_LT(trained, 0.5 * baseline);
}

TEST(Checkpoint, RoundTripAndDeterministicBytes) {
  Rng r(12);
  WorldModel m(tiny_shape());
  m.init_random(r);
  perturb_all(m, r, 0.1);
  const auto bank = build_bank(r, 8, 2, 4, ProjectionMode::OrthoFrozen);
  CheckpointMeta meta{"abc123", 42, 7, {{"l_pred", 0.5}}};
  save_checkpoint(tmp("subjepa_ck_a.bin"), m, bank, meta);
  save_checkpoint(tmp("subjepa_ck_b.bin"), m, bank, meta);
  EXPECT_EQ(slurp(tmp("subjepa_ck_a.bin")), slurp(tmp("subjepa_ck_b.bin")));

  const auto back = load_checkpoint(tmp("subjepa_ck_a.bin"));
  EXPECT_TRUE(back.model.same_params(m));
  EXPECT_EQ(back.meta.config_hash, "abc123");
  EXPECT_EQ(back.meta.step, 42u);
  EXPECT_EQ(back.meta.seed, 7u);
  EXPECT_EQ(back.meta.train_summary["l_pred"], 0.5);
  EXPECT_EQ(back.bank.mat(1), bank.mat(1));
  EXPECT_EQ(back.bank.mode(), ProjectionMode::OrthoFrozen);
  EXPECT_EQ(back.model.shape().encoder_hidden, tiny_shape().encoder_hidden);
}

TEST(Checkpoint, TruncatedOrMissingRejected) {
  Rng r(13);
  WorldModel m(tiny_shape());
  m.init_random(r);
  const auto bank = build_bank(r, 8, 1, 8, ProjectionMode::OrthoFrozen);
  save_checkpoint(tmp("subjepa_ck_full.bin"), m, bank, {"h", 0, 0, {}});
  const std::string bytes = slurp(tmp("subjepa_ck_full.bin"));
  std::ofstream(tmp("subjepa_ck_cut.bin"), std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  EXPECT_THROW(load_checkpoint(tmp("subjepa_ck_cut.bin")), IoError);
  EXPECT_THROW(load_checkpoint(tmp("subjepa_ck_none.bin")), IoError);
  std::ofstream(tmp("subjepa_ck_junk.bin")) << "not json\n";
  EXPECT_THROW(load_checkpoint(tmp("subjepa_ck_junk.bin")), IoError);
}
