#include <cmath>

#include <gtest/gtest.h>

#include "subjepa/planner.hpp"
#include "subjepa/worldmodel.hpp"

using namespace subjepa;

namespace {

// z' = z + W a, with W of shape D x A.
struct LinearModel {
  Matrix w;
  std::size_t latent_dim() const { return w.rows(); }
  std::size_t action_dim() const { return w.cols(); }
  std::vector<double> encode_state(EnvId, const State& s) const {
    std::vector<double> z(w.rows(), 0.0);
    z[0] = s[0];
    z[1] = s[1];
    return z;
  }
  Matrix predict_batch(const Matrix& z, const Matrix& a) const {
    Matrix out = z;
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t d = 0; d < w.rows(); ++d)
        for (std::size_t j = 0; j < w.cols(); ++j) out(r, d) += w(d, j) * a(r, j);
    return out;
  }
};

// Least-squares action for z + W a ~ g when A = 2, via the 2x2 normal equations.
std::array<double, 2> least_squares_action(const Matrix& w, const std::vector<double>& r) {
  double g00 = 0, g01 = 0, g11 = 0, b0 = 0, b1 = 0;
  for (std::size_t d = 0; d < w.rows(); ++d) {
    g00 += w(d, 0) * w(d, 0);
    g01 += w(d, 0) * w(d, 1);
    g11 += w(d, 1) * w(d, 1);
    b0 += w(d, 0) * r[d];
    b1 += w(d, 1) * r[d];
  }
  const double det = g00 * g11 - g01 * g01;
  return {(g11 * b0 - g01 * b1) / det, (g00 * b1 - g01 * b0) / det};
}

CemConfig small_cem() {
  CemConfig c;
  c.horizon = 4;
  c.population = 64;
  c.elites = 8;
  c.iterations = 4;
  return c;
}

} // namespace

static_assert(LatentDynamicsModel<WorldModel>);
static_assert(LatentDynamicsModel<OracleModel>);

TEST(Rollout, EmptyHorizonAndIdentity) {
  OracleModel m;
  const std::vector<double> z0{0.3, 0.7};
  EXPECT_EQ(rollout_latent(m, z0, Matrix(0, 2)).rows(), 0u);
  const Matrix r = rollout_latent(m, z0, Matrix(3, 2));
  for (std::size_t h = 0; h < 3; ++h) {
    EXPECT_EQ(r(h, 0), 0.3);
    EXPECT_EQ(r(h, 1), 0.7);
  }
  EXPECT_THROW(rollout_latent(m, std::vector<double>{1.0}, Matrix(1, 2)), ContractError);
}

TEST(Rollout, MatchesRepeatedPredictCalls) {
  Rng r(1);
  ModelShape s;
  s.latent_dim = 6;
  s.encoder_hidden = {8};
  s.predictor_hidden = {7};
  WorldModel m(s);
  m.init_random(r);
  for (auto& l : m.predictor().layers())
    for (double& v : l.w.data()) v = 0.3 * r.gaussian();
  const std::vector<double> z0{0.1, -0.2, 0.3, 0.0, 0.5, -0.4};
  const Matrix a = gaussian_matrix(r, 3, 2);
  const Matrix out = rollout_latent(m, z0, a);
  std::vector<double> z = z0;
  for (std::size_t h = 0; h < 3; ++h) {
    z = m.predict(z, std::vector<double>(a.row(h).begin(), a.row(h).end()));
    for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(out(h, d), z[d]);
  }
}

TEST(Cem, GoalEqualToStartCostsNothing) {
  OracleModel m;
  Rng r(2);
  const std::vector<double> z{0.25, 0.25};
  const auto plan = cem_plan(m, z, z, small_cem(), 0.08, r);
  EXPECT_EQ(plan.objective, 0.0);
  EXPECT_EQ(plan.initial_objective, 0.0);
}

TEST(Cem, LinearDynamicsReachesLeastSquaresOptimum) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(seed);
    LinearModel m{gaussian_matrix(r, 5, 2)};
    std::vector<double> z(5), goal(5);
    for (auto& v : z) v = r.gaussian();
    const std::array<double, 2> target{r.uniform(-0.04, 0.04), r.uniform(-0.04, 0.04)};
    for (std::size_t d = 0; d < 5; ++d) goal[d] = z[d] + m.w(d, 0) * target[0] + m.w(d, 1) * target[1] + 0.01 * r.gaussian();
    std::vector<double> resid(5);
    for (std::size_t d = 0; d < 5; ++d) resid[d] = goal[d] - z[d];
    const auto a = least_squares_action(m.w, resid);
    ASSERT_LT(std::max(std::abs(a[0]), std::abs(a[1])), 0.08);
    double opt = 0.0;
    for (std::size_t d = 0; d < 5; ++d) {
      const double e = z[d] + m.w(d, 0) * a[0] + m.w(d, 1) * a[1] - goal[d];
      opt += e * e;
    }
    CemConfig c;
    c.horizon = 1;
    c.population = 128;
    c.elites = 16;
    c.iterations = 8;
    const auto plan = cem_plan(m, z, goal, c, 0.08, r);
    EXPECT_LE(plan.objective, 1.05 * opt + 1e-12) << "seed " << seed << " opt " << opt;
  }
}

TEST(Cem, EliteMeanNeverIncreasesAndBeatsInitialMean) {
  OracleModel m;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(seed);
    const State s = sample_state(EnvId::TwoRoom, r), g = sample_state(EnvId::TwoRoom, r);
    const auto plan = cem_plan(m, std::vector<double>{s[0], s[1]}, std::vector<double>{g[0], g[1]}, small_cem(), 0.08, r);
    ASSERT_EQ(plan.elite_mean_objective.size(), 4u);
    for (std::size_t i = 1; i < 4; ++i) EXPECT_LE(plan.elite_mean_objective[i], plan.elite_mean_objective[i - 1]);
    EXPECT_LE(plan.objective, plan.initial_objective);
    for (double v : plan.actions.data()) {
      EXPECT_GE(v, -0.08);
      EXPECT_LE(v, 0.08);
    }
    ASSERT_EQ(plan.latents.rows(), 4u);
    const Matrix check = rollout_latent(m, std::vector<double>{s[0], s[1]}, plan.actions);
    EXPECT_EQ(check.data(), plan.latents.data());
  }
}

TEST(Cem, ConfigValidation) {
  OracleModel m;
  Rng r(0);
  CemConfig c = small_cem();
  c.elites = c.population + 1;
  EXPECT_THROW(cem_plan(m, std::vector<double>{0.2, 0.2}, std::vector<double>{0.3, 0.3}, c, 0.08, r), ContractError);
  c = small_cem();
  c.horizon = 0;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_THROW(cem_plan(m, std::vector<double>{0.2}, std::vector<double>{0.3, 0.3}, small_cem(), 0.08, r), ContractError);
}

TEST(Planning, OracleSolvesTwoRoom) {
  OracleModel m{EnvId::TwoRoom};
  Rng r(7);
  const auto ev = evaluate_planning(m, EnvId::TwoRoom, 100, CemConfig{}, r);
  EXPECT_GT(ev.success_rate, 0.95);
  EXPECT_EQ(ev.goals, 100u);
  EXPECT_EQ(ev.steps_taken.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_LE(ev.steps_taken[i], 60u);
}

TEST(Planning, OracleSolvesReacher) {
  OracleModel m{EnvId::Reacher2};
  Rng r(8);
  const auto ev = evaluate_planning(m, EnvId::Reacher2, 30, CemConfig{}, r);
  EXPECT_GT(ev.success_rate, 0.9);
}

TEST(Planning, UntrainedModelWorseThanOracle) {
  ModelShape s;
  s.latent_dim = 16;
  s.encoder_hidden = {32};
  s.predictor_hidden = {16};
  WorldModel m(s);
  Rng init(3);
  m.init_random(init);
  CemConfig c = small_cem();
  Rng r1(9), r2(9);
  const auto untrained = evaluate_planning(m, EnvId::TwoRoom, 20, c, r1);
  const auto oracle = evaluate_planning(OracleModel{}, EnvId::TwoRoom, 20, c, r2);
  EXPECT_LT(untrained.success_rate, oracle.success_rate);
}

TEST(Planning, DeterministicForSeedAndRejectsZeroGoals) {
  OracleModel m;
  Rng a(11), b(11), c(0);
  const auto x = evaluate_planning(m, EnvId::TwoRoom, 10, small_cem(), a);
  const auto y = evaluate_planning(m, EnvId::TwoRoom, 10, small_cem(), b);
  EXPECT_EQ(x.successes, y.successes);
  EXPECT_EQ(x.final_distance, y.final_distance);
  EXPECT_THROW(evaluate_planning(m, EnvId::TwoRoom, 0, small_cem(), c), ContractError);
}
