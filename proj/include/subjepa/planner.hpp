#pragma once

// Cross-entropy-method planning in latent space and closed-loop goal
// reaching evaluation.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numeric>
#include <optional>
#include <vector>

#include "subjepa/envs.hpp"
#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"

namespace subjepa {

/// Anything that can embed an environment state and roll latents forward.
template <class M>
concept LatentDynamicsModel = requires(const M& m, const Matrix& z, const Matrix& a, EnvId env, const State& s) {
  { m.latent_dim() } -> std::convertible_to<std::size_t>;
  { m.action_dim() } -> std::convertible_to<std::size_t>;
  { m.predict_batch(z, a) } -> std::same_as<Matrix>;
  { m.encode_state(env, s) } -> std::same_as<std::vector<double>>;
};

struct CemConfig {
  std::size_t horizon = 12;
  std::size_t population = 256;
  std::size_t elites = 32;
  std::size_t iterations = 6;
  double init_std = -1.0; // < 0: half the action bound
  std::size_t replan_every = 1;
  std::size_t max_steps = 60;
  double success_threshold = 0.1;

  void validate() const {
    require(horizon >= 1 && population >= 1 && elites >= 1 && iterations >= 1 && replan_every >= 1 &&
                max_steps >= 1,
            "CemConfig: counts must be >= 1");
    require(elites <= population, "CemConfig: elites must not exceed population");
    require(success_threshold > 0.0, "CemConfig: success threshold must be positive");
  }
};

struct PlanResult {
  Matrix actions;  // H x action_dim
  Matrix latents;  // H x D, predicted
  double objective = 0.0;
  double initial_objective = 0.0;               // objective of the iteration-0 mean
  std::vector<double> elite_mean_objective;     // per iteration
};

/// Open-loop rollout; row i is the latent after applying actions 0..i.
template <LatentDynamicsModel M>
Matrix rollout_latent(const M& model, std::span<const double> z0, const Matrix& actions) {
  require(z0.size() == model.latent_dim(), "rollout_latent: latent size mismatch");
  require(actions.rows() == 0 || actions.cols() == model.action_dim(), "rollout_latent: action width mismatch");
  Matrix out(actions.rows(), model.latent_dim());
  Matrix z(1, z0.size(), std::vector<double>(z0.begin(), z0.end()));
  for (std::size_t h = 0; h < actions.rows(); ++h) {
    Matrix a(1, actions.cols(), std::vector<double>(actions.row(h).begin(), actions.row(h).end()));
    z = model.predict_batch(z, a);
    if (!z.all_finite()) throw NonFiniteError("rollout_latent: non-finite latent");
    std::copy(z.data().begin(), z.data().end(), out.row(h).begin());
  }
  return out;
}

namespace detail {

/// Terminal cost ||z_H - goal||^2 for each candidate; candidates[c] is H x A.
template <LatentDynamicsModel M>
std::vector<double> terminal_costs(const M& model, std::span<const double> z0, std::span<const double> goal,
                                   const std::vector<Matrix>& candidates) {
  const std::size_t p = candidates.size(), dim = model.latent_dim();
  std::vector<double> costs(p, 0.0);
  if (p == 0) return costs;
  const std::size_t horizon = candidates[0].rows(), adim = candidates[0].cols();
  Matrix z(p, dim);
  for (std::size_t c = 0; c < p; ++c) std::copy(z0.begin(), z0.end(), z.row(c).begin());
  Matrix a(p, adim);
  for (std::size_t h = 0; h < horizon; ++h) {
    for (std::size_t c = 0; c < p; ++c)
      std::copy(candidates[c].row(h).begin(), candidates[c].row(h).end(), a.row(c).begin());
    z = model.predict_batch(z, a);
  }
  if (!z.all_finite()) throw NonFiniteError("cem_plan: non-finite latent in rollout");
  for (std::size_t c = 0; c < p; ++c) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double e = z(c, d) - goal[d];
      s += e * e;
    }
    costs[c] = s;
  }
  return costs;
}

} // namespace detail

/// Minimizes the terminal latent distance ||zhat_H - z_goal||^2. Elites are
/// carried into the next iteration's pool, so the elite-mean objective never
/// increases; the best sequence seen (including the initial mean) is returned.
template <LatentDynamicsModel M>
PlanResult cem_plan(const M& model, std::span<const double> z_current, std::span<const double> z_goal,
                    const CemConfig& cfg, double bound, Rng& rng, const Matrix* warm_start = nullptr) {
  cfg.validate();
  require(z_current.size() == model.latent_dim() && z_goal.size() == model.latent_dim(),
          "cem_plan: latent size mismatch");
  const std::size_t horizon = cfg.horizon, adim = model.action_dim();
  Matrix mean(horizon, adim);
  if (warm_start) {
    require(warm_start->rows() == horizon && warm_start->cols() == adim, "cem_plan: warm start shape mismatch");
    mean = *warm_start;
  }
  Matrix sd(horizon, adim, cfg.init_std < 0 ? 0.5 * bound : cfg.init_std);

  PlanResult res;
  Matrix best = mean;
  double best_cost = detail::terminal_costs(model, z_current, z_goal, {mean})[0];
  res.initial_objective = best_cost;

  std::vector<Matrix> elites;
  std::vector<double> elite_costs;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<Matrix> pool;
    pool.reserve(cfg.population + elites.size());
    for (std::size_t c = 0; c < cfg.population; ++c) {
      Matrix cand(horizon, adim);
      for (std::size_t i = 0; i < cand.size(); ++i)
        cand.data()[i] = clamp(mean.data()[i] + sd.data()[i] * rng.gaussian(), -bound, bound);
      pool.push_back(std::move(cand));
    }
    std::vector<double> costs = detail::terminal_costs(model, z_current, z_goal, pool);
    for (std::size_t e = 0; e < elites.size(); ++e) {
      pool.push_back(elites[e]);
      costs.push_back(elite_costs[e]);
    }
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return costs[a] < costs[b]; });

    const std::size_t ne = std::min(cfg.elites, pool.size());
    std::vector<Matrix> next;
    std::vector<double> next_costs;
    double mean_cost = 0.0;
    for (std::size_t e = 0; e < ne; ++e) {
      next.push_back(pool[order[e]]);
      next_costs.push_back(costs[order[e]]);
      mean_cost += costs[order[e]];
    }
    res.elite_mean_objective.push_back(mean_cost / static_cast<double>(ne));
    elites = std::move(next);
    elite_costs = std::move(next_costs);

    if (elite_costs[0] < best_cost) {
      best_cost = elite_costs[0];
      best = elites[0];
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      double m = 0.0;
      for (const auto& e : elites) m += e.data()[i];
      m /= static_cast<double>(ne);
      double v = 0.0;
      for (const auto& e : elites) v += (e.data()[i] - m) * (e.data()[i] - m);
      mean.data()[i] = m;
      sd.data()[i] = std::sqrt(v / static_cast<double>(ne));
    }
  }
  res.actions = best;
  res.objective = best_cost;
  res.latents = rollout_latent(model, z_current, best);
  return res;
}

struct PlanningEval {
  double success_rate = 0.0;
  std::size_t goals = 0;
  std::size_t successes = 0;
  std::vector<std::size_t> steps_taken; // per goal episode
  std::vector<double> final_distance;
};

/// Closed-loop MPC from uniform random start states to uniform random goal
/// states. Success when the true state is within cfg.success_threshold of the
/// goal (goal_distance) within cfg.max_steps environment steps.
template <LatentDynamicsModel M>
PlanningEval evaluate_planning(const M& model, EnvId env, std::size_t goals, const CemConfig& cfg, Rng& rng) {
  cfg.validate();
  require(goals >= 1, "evaluate_planning: need at least one goal");
  const double bound = action_bound(env);
  PlanningEval out;
  out.goals = goals;
  for (std::size_t g = 0; g < goals; ++g) {
    State s = sample_state(env, rng);
    const State goal = sample_state(env, rng);
    const auto z_goal = model.encode_state(env, goal);
    std::optional<Matrix> warm;
    std::size_t steps = 0;
    bool success = goal_distance(env, s, goal) < cfg.success_threshold;
    while (!success && steps < cfg.max_steps) {
      const auto z = model.encode_state(env, s);
      PlanResult plan = cem_plan(model, z, z_goal, cfg, bound, rng, warm ? &*warm : nullptr);
      const std::size_t exec = std::min(cfg.replan_every, cfg.horizon);
      for (std::size_t i = 0; i < exec && !success && steps < cfg.max_steps; ++i) {
        const Action a = clamp_action({plan.actions(i, 0), plan.actions(i, 1)}, bound);
        s = env_step(env, s, a);
        ++steps;
        success = goal_distance(env, s, goal) < cfg.success_threshold;
      }
      Matrix shifted(cfg.horizon, plan.actions.cols());
      for (std::size_t h = 0; h + exec < cfg.horizon; ++h)
        std::copy(plan.actions.row(h + exec).begin(), plan.actions.row(h + exec).end(), shifted.row(h).begin());
      warm = std::move(shifted);
    }
    if (success) ++out.successes;
    out.steps_taken.push_back(steps);
    out.final_distance.push_back(goal_distance(env, s, goal));
  }
  out.success_rate = static_cast<double>(out.successes) / static_cast<double>(goals);
  return out;
}

/// Ground-truth "model": latent = state, dynamics = the environment.
struct OracleModel {
  EnvId env = EnvId::TwoRoom;

  std::size_t latent_dim() const { return kStateDim; }
  std::size_t action_dim() const { return kActionDim; }
  std::vector<double> encode_state(EnvId, const State& s) const { return {s[0], s[1]}; }
  Matrix predict_batch(const Matrix& z, const Matrix& a) const {
    Matrix out(z.rows(), kStateDim);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const State n = env_step(env, {z(r, 0), z(r, 1)}, {a(r, 0), a(r, 1)});
      out(r, 0) = n[0];
      out(r, 1) = n[1];
    }
    return out;
  }
};

} // namespace subjepa
