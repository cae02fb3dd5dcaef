// Command-line front end: gen-data, train, eval, sweep, plan-eval.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "subjepa/subjepa.hpp"

using namespace subjepa;

namespace {

struct Overrides {
  std::string env, dataset, mode, out;
  std::optional<std::size_t> d, k, ds, m, steps, batch, window, goals;
  std::optional<double> lambda, mu, lr;
  std::vector<std::uint64_t> seeds;
  bool no_planning = false;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--env", o.env, "tworoom | reacher2");
  app->add_option("--dataset", o.dataset, "dataset directory (default: generate in memory)");
  app->add_option("--D", o.d, "latent dimension");
  app->add_option("--K", o.k, "number of subspaces");
  app->add_option("--ds", o.ds, "subspace dimension override");
  app->add_option("--M", o.m, "slicing directions per subspace");
  app->add_option("--lambda", o.lambda, "regularizer weight");
  app->add_option("--mu-ortho", o.mu, "orthogonality penalty weight");
  app->add_option("--mode", o.mode, "ortho_frozen | rand_frozen | trainable_ortho_reg");
  app->add_option("--lr", o.lr, "Adam learning rate");
  app->add_option("--steps", o.steps, "training steps");
  app->add_option("--batch", o.batch, "batch size B");
  app->add_option("--window", o.window, "window length N");
  app->add_option("--seeds", o.seeds, "seed list")->delimiter(',');
  app->add_option("--goals", o.goals, "planning goals per seed");
  app->add_flag("--no-planning", o.no_planning, "skip planning evaluation");
  app->add_option("--out", o.out, "output directory");
}

ExperimentConfig apply(ExperimentConfig c, const Overrides& o) {
  if (!o.env.empty()) c.env = env_from_string(o.env);
  if (!o.dataset.empty()) c.dataset = o.dataset;
  if (o.d) c.latent_dim = *o.d;
  if (o.k) c.subspaces = *o.k;
  if (o.ds) c.sub_dim = *o.ds;
  if (o.m) c.directions = *o.m;
  if (o.lambda) c.lambda = *o.lambda;
  if (o.mu) c.mu_ortho = *o.mu;
  if (!o.mode.empty()) c.mode = projection_mode_from_string(o.mode);
  if (o.lr) c.optimizer.lr = *o.lr;
  if (o.steps) c.steps = *o.steps;
  if (o.batch) c.batch = *o.batch;
  if (o.window) c.window = *o.window;
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.goals) c.eval.goals = *o.goals;
  if (o.no_planning) c.eval.planning = false;
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  return c;
}

ExperimentConfig base_config(const std::string& path) { return path.empty() ? ExperimentConfig{} : load_config(path); }

// "8x4" -> {8, 4}; "8" -> {8, derived}
SweepCell parse_cell(const std::string& s) {
  const auto x = s.find('x');
  SweepCell c;
  c.k = std::stoul(s.substr(0, x));
  if (x != std::string::npos) c.sub_dim = std::stoul(s.substr(x + 1));
  return c;
}

void print_summary(const RunReport& r) {
  const json agg = to_json(r)["aggregate"];
  std::cout << "config_hash " << r.config_hash << '\n';
  for (const auto& [k, v] : agg.items())
    std::printf("%-28s %.6g +- %.3g\n", k.c_str(), v["mean"].get<double>(), v["std"].get<double>());
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"subspace-regularized latent world model toolkit"};
  app.require_subcommand(1);

  // gen-data
  std::string g_env = "tworoom", g_out;
  std::size_t g_episodes = 500, g_len = 50;
  std::uint64_t g_seed = 1234;
  auto* gen = app.add_subcommand("gen-data", "generate an offline random-policy dataset");
  gen->add_option("--env", g_env, "tworoom | reacher2");
  gen->add_option("--episodes", g_episodes, "episode count");
  gen->add_option("--len", g_len, "episode length T");
  gen->add_option("--seed", g_seed, "generation seed");
  gen->add_option("--out", g_out, "output directory")->required();

  // train
  std::string t_config;
  Overrides t_over;
  auto* train = app.add_subcommand("train", "train (and evaluate) every configured seed");
  train->add_option("--config", t_config, "JSON experiment config");
  add_overrides(train, t_over);

  // eval
  std::string e_config, e_ckpt, e_out = "report.json";
  Overrides e_over;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against its config");
  eval->add_option("--config", e_config, "JSON experiment config");
  eval->add_option("--ckpt", e_ckpt, "checkpoint file")->required();
  eval->add_option("--report", e_out, "report path");
  add_overrides(eval, e_over);

  // sweep
  std::string s_config;
  Overrides s_over;
  std::vector<std::string> s_values;
  auto* sweep = app.add_subcommand("sweep", "train+eval over K values or a KxD_s grid");
  sweep->add_option("--config", s_config, "JSON experiment config");
  sweep->add_option("--values", s_values, "K values, or KxDS cells (e.g. 8x4)")->delimiter(',')->required();
  add_overrides(sweep, s_over);

  // plan-eval
  std::string p_ckpt, p_env = "tworoom", p_out = "report.json";
  std::size_t p_goals = 100, p_seeds = 6;
  bool p_oracle = false;
  CemConfig p_cem;
  auto* plan = app.add_subcommand("plan-eval", "closed-loop CEM planning success of a checkpoint");
  plan->add_option("--ckpt", p_ckpt, "checkpoint file");
  plan->add_flag("--oracle", p_oracle, "use the true-dynamics oracle instead of a checkpoint");
  plan->add_option("--env", p_env, "tworoom | reacher2");
  plan->add_option("--goals", p_goals, "goals per seed");
  plan->add_option("--seeds", p_seeds, "number of planning seeds");
  plan->add_option("--horizon", p_cem.horizon, "CEM horizon");
  plan->add_option("--population", p_cem.population, "CEM population");
  plan->add_option("--iterations", p_cem.iterations, "CEM iterations");
  plan->add_option("--out", p_out, "report path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto ds = generate_dataset(env_from_string(g_env), g_episodes, g_len, g_seed);
      write_dataset(ds, output_root(g_out));
      std::cout << "wrote " << ds.episodes << " episodes x " << ds.length << " to " << output_root(g_out) << '\n';
      return 0;
    }
    if (*train) {
      const auto cfg = apply(base_config(t_config), t_over);
      std::filesystem::create_directories(output_root(cfg.output_dir));
      std::ofstream(output_root(cfg.output_dir) / "config.json") << to_json(cfg).dump(2) << '\n';
      print_summary(run_experiment(cfg));
      return 0;
    }
    if (*eval) {
      const auto cfg = apply(base_config(e_config), e_over);
      print_summary(run_eval(e_ckpt, cfg, output_root(e_out)));
      return 0;
    }
    if (*sweep) {
      const auto cfg = apply(base_config(s_config), s_over);
      std::vector<SweepCell> cells;
      for (const auto& v : s_values) cells.push_back(parse_cell(v));
      const auto res = run_sweep(cfg, cells);
      std::cout << res.rows.size() << " rows, " << res.failures.size() << " failed cells\n";
      for (const auto& f : res.failures) std::cerr << "failed: " << f << '\n';
      return res.failures.empty() ? 0 : 1;
    }
    if (*plan) {
      const EnvId env = env_from_string(p_env);
      if (!p_oracle && p_ckpt.empty()) throw ContractError("plan-eval: --ckpt or --oracle required");
      std::optional<LoadedCheckpoint> ck;
      if (!p_oracle) ck = load_checkpoint(p_ckpt);
      json per = json::array();
      std::vector<double> rates;
      for (std::size_t s = 0; s < p_seeds; ++s) {
        Rng rng(derive_seed(s, 13));
        const double rate = p_oracle ? evaluate_planning(OracleModel{env}, env, p_goals, p_cem, rng).success_rate
                                     : evaluate_planning(ck->model, env, p_goals, p_cem, rng).success_rate;
        rates.push_back(rate);
        per.push_back({{"seed", s}, {"success_rate", rate}});
        std::cout << "seed " << s << " success " << rate << '\n';
      }
      const auto ms = mean_std(rates);
      json rep = {{"config_hash", ck ? ck->meta.config_hash : "oracle"},
                  {"env", p_env},
                  {"goals", p_goals},
                  {"planner", to_json(p_cem)},
                  {"per_seed", per},
                  {"aggregate", {{"success_rate", {{"mean", ms.mean}, {"std", ms.std}}}}}};
      const auto out = output_root(p_out);
      if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
      std::ofstream(out) << rep.dump(2) << '\n';
      std::printf("success %.4f +- %.4f\n", ms.mean, ms.std);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
