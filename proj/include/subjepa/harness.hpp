#pragma once

// Experiment configuration, training/evaluation/sweep orchestration and
// on-disk reports.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjepa/envs.hpp"
#include "subjepa/error.hpp"
#include "subjepa/metrics.hpp"
#include "subjepa/planner.hpp"
#include "subjepa/subspace.hpp"
#include "subjepa/worldmodel.hpp"

namespace subjepa {

using nlohmann::json;

struct EvalConfig {
  std::size_t rank_samples = 2000;
  std::size_t heldout_episodes = 100;
  std::size_t heldout_length = 32;
  std::size_t straightness_episodes = 64;
  std::uint64_t heldout_seed = 0x5eed0001;
  std::size_t probe_steps = 2000;
  std::size_t goals = 100;
  bool planning = true;
  bool write_latents = true;
};

struct ExperimentConfig {
  EnvId env = EnvId::TwoRoom;
  std::string dataset;                 // empty: generate in memory
  std::size_t dataset_episodes = 500;
  std::size_t dataset_length = 50;
  std::uint64_t dataset_seed = 1234;

  std::size_t latent_dim = 32;         // D
  std::size_t subspaces = 8;           // K
  std::optional<std::size_t> sub_dim;  // d_s override
  std::size_t directions = 64;         // M
  double lambda = 1.0;
  double mu_ortho = 1.0;
  ProjectionMode mode = ProjectionMode::OrthoFrozen;
  bool block_qr = true;
  bool standardize = false;
  std::size_t max_samples = 4096;

  AdamConfig optimizer;
  std::size_t steps = 20000;
  std::size_t batch = 64;              // B
  std::size_t window = 4;              // N
  std::vector<std::size_t> encoder_hidden{128, 64};
  std::vector<std::size_t> predictor_hidden{64, 64};
  Activation encoder_activation = Activation::Tanh;
  Activation predictor_activation = Activation::Tanh;
  std::vector<std::uint64_t> seeds{0};
  std::size_t log_every = 100;

  CemConfig planner;
  EvalConfig eval;
  std::string output_dir = "runs/default";

  std::size_t resolved_sub_dim() const { return sub_dim ? *sub_dim : default_subspace_dim(latent_dim, subspaces); }

  void validate() const {
    require(subspaces >= 1, "config: K must be >= 1");
    require(latent_dim >= 1, "config: D must be >= 1");
    if (!sub_dim) require(subspaces <= latent_dim, "config: K must not exceed D when d_s is derived");
    const std::size_t ds = resolved_sub_dim();
    require(ds >= 1 && ds <= latent_dim, "config: need 1 <= d_s <= D");
    require(lambda >= 0.0, "config: lambda must be >= 0");
    require(mu_ortho >= 0.0, "config: mu_ortho must be >= 0");
    require(!seeds.empty(), "config: seeds must be nonempty");
    require(directions >= 1, "config: M must be >= 1");
    require(window >= 2, "config: window N must be >= 2");
    require(batch >= 1, "config: batch B must be >= 1");
    require(max_samples >= 2, "config: max_samples must be >= 2");
    require(log_every >= 1, "config: log_every must be >= 1");
    require(dataset_length >= window, "config: dataset episodes shorter than the training window");
    planner.validate();
    require(eval.goals >= 1, "config: eval.goals must be >= 1");
    require(eval.heldout_length >= 3, "config: eval.heldout_length must be >= 3");
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lambda = lambda;
    t.mu_ortho = mu_ortho;
    t.directions = directions;
    t.ep.standardize = standardize;
    t.ep.max_samples = max_samples;
    t.adam = optimizer;
    return t;
  }

  ModelShape model_shape() const {
    ModelShape s;
    s.latent_dim = latent_dim;
    s.encoder_hidden = encoder_hidden;
    s.predictor_hidden = predictor_hidden;
    s.encoder_activation = encoder_activation;
    s.predictor_activation = predictor_activation;
    return s;
  }
};

// ---------------------------------------------------------------------------
// JSON (strict: unknown keys are rejected)

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ContractError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ContractError(where + ": unknown key '" + k + "'");
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline json to_json(const CemConfig& c) {
  return {{"horizon", c.horizon},       {"population", c.population}, {"elites", c.elites},
          {"iterations", c.iterations}, {"init_std", c.init_std},     {"replan_every", c.replan_every},
          {"max_steps", c.max_steps},   {"success_threshold", c.success_threshold}};
}

inline CemConfig cem_config_from_json(const json& j) {
  detail::check_keys(j, {"horizon", "population", "elites", "iterations", "init_std", "replan_every", "max_steps",
                         "success_threshold"},
                     "planner");
  CemConfig c;
  detail::read_opt(j, "horizon", c.horizon);
  detail::read_opt(j, "population", c.population);
  detail::read_opt(j, "elites", c.elites);
  detail::read_opt(j, "iterations", c.iterations);
  detail::read_opt(j, "init_std", c.init_std);
  detail::read_opt(j, "replan_every", c.replan_every);
  detail::read_opt(j, "max_steps", c.max_steps);
  detail::read_opt(j, "success_threshold", c.success_threshold);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json j = {{"env", to_string(c.env)},
            {"dataset", c.dataset},
            {"dataset_episodes", c.dataset_episodes},
            {"dataset_length", c.dataset_length},
            {"dataset_seed", c.dataset_seed},
            {"D", c.latent_dim},
            {"K", c.subspaces},
            {"d_s", c.sub_dim ? json(*c.sub_dim) : json(nullptr)},
            {"M", c.directions},
            {"lambda", c.lambda},
            {"mu_ortho", c.mu_ortho},
            {"projection_mode", to_string(c.mode)},
            {"block_qr", c.block_qr},
            {"standardize", c.standardize},
            {"max_samples", c.max_samples},
            {"optimizer",
             {{"lr", c.optimizer.lr}, {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
            {"steps", c.steps},
            {"batch", c.batch},
            {"window", c.window},
            {"encoder_hidden", c.encoder_hidden},
            {"predictor_hidden", c.predictor_hidden},
            {"encoder_activation", to_string(c.encoder_activation)},
            {"predictor_activation", to_string(c.predictor_activation)},
            {"seeds", c.seeds},
            {"log_every", c.log_every},
            {"planner", to_json(c.planner)},
            {"eval",
             {{"rank_samples", c.eval.rank_samples},
              {"heldout_episodes", c.eval.heldout_episodes},
              {"heldout_length", c.eval.heldout_length},
              {"straightness_episodes", c.eval.straightness_episodes},
              {"heldout_seed", c.eval.heldout_seed},
              {"probe_steps", c.eval.probe_steps},
              {"goals", c.eval.goals},
              {"planning", c.eval.planning},
              {"write_latents", c.eval.write_latents}}},
            {"output_dir", c.output_dir}};
  return j;
}

inline ExperimentConfig config_from_json(const json& j) {
  detail::check_keys(j,
                     {"env", "dataset", "dataset_episodes", "dataset_length", "dataset_seed", "D", "K", "d_s", "M",
                      "lambda", "mu_ortho", "projection_mode", "block_qr", "standardize", "max_samples", "optimizer",
                      "steps", "batch", "window", "encoder_hidden", "predictor_hidden", "encoder_activation",
                      "predictor_activation", "seeds", "log_every",
                      "planner", "eval", "output_dir"},
                     "config");
  ExperimentConfig c;
  try {
    if (j.contains("env")) c.env = env_from_string(j.at("env"));
    detail::read_opt(j, "dataset", c.dataset);
    detail::read_opt(j, "dataset_episodes", c.dataset_episodes);
    detail::read_opt(j, "dataset_length", c.dataset_length);
    detail::read_opt(j, "dataset_seed", c.dataset_seed);
    detail::read_opt(j, "D", c.latent_dim);
    detail::read_opt(j, "K", c.subspaces);
    if (j.contains("d_s") && !j.at("d_s").is_null()) c.sub_dim = j.at("d_s").get<std::size_t>();
    detail::read_opt(j, "M", c.directions);
    detail::read_opt(j, "lambda", c.lambda);
    detail::read_opt(j, "mu_ortho", c.mu_ortho);
    if (j.contains("projection_mode")) c.mode = projection_mode_from_string(j.at("projection_mode"));
    detail::read_opt(j, "block_qr", c.block_qr);
    detail::read_opt(j, "standardize", c.standardize);
    detail::read_opt(j, "max_samples", c.max_samples);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      detail::check_keys(o, {"lr", "beta1", "beta2", "eps"}, "optimizer");
      detail::read_opt(o, "lr", c.optimizer.lr);
      detail::read_opt(o, "beta1", c.optimizer.beta1);
      detail::read_opt(o, "beta2", c.optimizer.beta2);
      detail::read_opt(o, "eps", c.optimizer.eps);
    }
    detail::read_opt(j, "steps", c.steps);
    detail::read_opt(j, "batch", c.batch);
    detail::read_opt(j, "window", c.window);
    detail::read_opt(j, "encoder_hidden", c.encoder_hidden);
    detail::read_opt(j, "predictor_hidden", c.predictor_hidden);
    if (j.contains("encoder_activation")) c.encoder_activation = activation_from_string(j.at("encoder_activation"));
    if (j.contains("predictor_activation"))
      c.predictor_activation = activation_from_string(j.at("predictor_activation"));
    detail::read_opt(j, "seeds", c.seeds);
    detail::read_opt(j, "log_every", c.log_every);
    if (j.contains("planner")) c.planner = cem_config_from_json(j.at("planner"));
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::check_keys(e, {"rank_samples", "heldout_episodes", "heldout_length", "straightness_episodes",
                             "heldout_seed", "probe_steps", "goals", "planning", "write_latents"},
                         "eval");
      detail::read_opt(e, "rank_samples", c.eval.rank_samples);
      detail::read_opt(e, "heldout_episodes", c.eval.heldout_episodes);
      detail::read_opt(e, "heldout_length", c.eval.heldout_length);
      detail::read_opt(e, "straightness_episodes", c.eval.straightness_episodes);
      detail::read_opt(e, "heldout_seed", c.eval.heldout_seed);
      detail::read_opt(e, "probe_steps", c.eval.probe_steps);
      detail::read_opt(e, "goals", c.eval.goals);
      detail::read_opt(e, "planning", c.eval.planning);
      detail::read_opt(e, "write_latents", c.eval.write_latents);
    }
    detail::read_opt(j, "output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot open config " + p.string());
  try {
    return config_from_json(json::parse(f));
  } catch (const json::parse_error& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
}

/// FNV-1a over the canonical JSON of everything that determines the trained
/// weights (training data, model, objective, optimizer, schedule).
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  for (const char* k : {"seeds", "planner", "eval", "output_dir", "log_every"}) j.erase(k);
  j["d_s"] = c.resolved_sub_dim();
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Resolves a relative output path under $SUBJEPA_OUTPUT_ROOT when set.
inline std::filesystem::path output_root(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_relative())
    if (const char* root = std::getenv("SUBJEPA_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// Training

/// Samples B windows of N consecutive steps from uniformly chosen episodes.
inline WindowBatch sample_windows(const TrajectoryDataset& ds, std::size_t n, std::size_t b, Rng& rng) {
  require(ds.length >= n, "sample_windows: episodes shorter than window");
  WindowBatch batch{Tensor3(n, b, kObsDim), Tensor3(n - 1, b, kActionDim)};
  for (std::size_t j = 0; j < b; ++j) {
    const std::size_t e = rng.index(ds.episodes);
    const std::size_t t0 = rng.index(ds.length - n + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = ds.observation(e, t0 + i);
      auto dst = batch.obs.vec(i, j);
      for (std::size_t p = 0; p < kObsDim; ++p) dst[p] = o[p];
      if (i + 1 < n) {
        const Action a = ds.action(e, t0 + i);
        batch.actions(i, j, 0) = a[0];
        batch.actions(i, j, 1) = a[1];
      }
    }
  }
  return batch;
}

inline TrajectoryDataset load_or_generate_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) {
    auto ds = read_dataset(cfg.dataset);
    if (ds.env != cfg.env) throw ContractError("dataset env does not match config env");
    if (ds.length < cfg.window) throw ContractError("dataset episodes shorter than the training window");
    return ds;
  }
  return generate_dataset(cfg.env, cfg.dataset_episodes, cfg.dataset_length, cfg.dataset_seed);
}

struct TrainingResult {
  WorldModel model;
  ProjectionBank bank;
  ProjectionBank initial_bank;
  LossBreakdown final_losses;
  std::size_t steps_done = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

inline json to_json(const LossBreakdown& l) {
  return {{"l_pred", l.l_pred}, {"l_reg", l.l_reg},   {"l_ortho", l.l_ortho},
          {"l_total", l.l_total}, {"lambda", l.lambda}, {"mu_ortho", l.mu_ortho}};
}

inline std::filesystem::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return output_root(cfg.output_dir) / ("seed_" + std::to_string(seed));
}

/// Trains one seed. Writes <out>/seed_<s>/checkpoint.bin and train_log.jsonl
/// (one JSON object every log_every steps). On a non-finite loss the last
/// good parameters are checkpointed and NonFiniteError is rethrown.
inline TrainingResult run_training(const ExperimentConfig& cfg, std::uint64_t seed, const TrajectoryDataset& data,
                                   std::optional<std::filesystem::path> out_dir = std::nullopt) {
  cfg.validate();
  const auto dir = out_dir ? *out_dir : seed_dir(cfg, seed);
  std::filesystem::create_directories(dir);

  TrainingResult res;
  Rng init_rng(derive_seed(seed, 1));
  Rng bank_rng(derive_seed(seed, 2));
  Rng batch_rng(derive_seed(seed, 3));
  Rng dir_rng(derive_seed(seed, 4));

  res.model = WorldModel(cfg.model_shape());
  res.model.init_random(init_rng);
  res.bank = build_bank(bank_rng, cfg.latent_dim, cfg.subspaces, cfg.resolved_sub_dim(), cfg.mode, cfg.block_qr);
  res.initial_bank = res.bank;
  const TrainConfig tc = cfg.train_config();
  Adam opt(tc.adam);

  res.checkpoint = dir / "checkpoint.bin";
  res.log = dir / "train_log.jsonl";
  std::ofstream log(res.log);
  if (!log) throw IoError("cannot open training log " + res.log.string());

  CheckpointMeta meta{config_hash(cfg), 0, seed, {}};
  const auto save = [&](bool aborted) {
    meta.step = res.steps_done;
    meta.train_summary = to_json(res.final_losses);
    meta.train_summary["aborted"] = aborted;
    save_checkpoint(res.checkpoint, res.model, res.bank, meta);
    if (aborted) {
      std::ofstream(dir / "ABORTED") << "non-finite loss after step " << res.steps_done << '\n';
    }
  };

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const WindowBatch batch = sample_windows(data, cfg.window, cfg.batch, batch_rng);
    Tensor3 z;
    try {
      res.final_losses = training_step(batch, res.model, res.bank, tc, dir_rng, opt, &z);
    } catch (const NonFiniteError&) {
      save(true);
      throw;
    }
    res.steps_done = step;
    if (step % cfg.log_every == 0) {
      const auto sd = per_dim_std(z.flat());
      json line = to_json(res.final_losses);
      line["step"] = step;
      line["config_hash"] = meta.config_hash;
      line["latent_std"] = sd;
      line["latent_std_min"] = *std::min_element(sd.begin(), sd.end());
      line["latent_std_mean"] = std::accumulate(sd.begin(), sd.end(), 0.0) / static_cast<double>(sd.size());
      log << line.dump() << '\n';
    }
  }
  save(false);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SeedReport {
  std::uint64_t seed = 0;
  json final_losses;
  double success_rate = -1.0; // < 0: planning not evaluated
  double effective_rank = 0.0;
  double straightness = 0.0;
  double latent_std_min = 0.0;
  double latent_std_mean = 0.0;
  std::vector<ProbeReport> probes;
};

struct RunReport {
  std::string config_hash;
  std::vector<SeedReport> per_seed;
  double wall_time_s = 0.0;
};

inline json to_json(const ProbeReport& p) {
  return {{"target", p.target},
          {"kind", p.kind == ProbeKind::Linear ? "linear" : "mlp"},
          {"mse", p.mse},
          {"pearson_r", p.pearson_r},
          {"per_dim_r", p.per_dim_r},
          {"degenerate", p.degenerate},
          {"train_size", p.train_size},
          {"test_size", p.test_size}};
}

inline json to_json(const SeedReport& s) {
  json probes = json::array();
  for (const auto& p : s.probes) probes.push_back(to_json(p));
  return {{"seed", s.seed},
          {"final_losses", s.final_losses},
          {"success_rate", s.success_rate},
          {"effective_rank", s.effective_rank},
          {"straightness", s.straightness},
          {"latent_std_min", s.latent_std_min},
          {"latent_std_mean", s.latent_std_mean},
          {"probes", probes}};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation (0 for a single value).
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

inline json aggregate(const std::vector<SeedReport>& seeds) {
  const auto field = [&](auto getter) {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(getter(s));
    const auto ms = mean_std(v);
    return json{{"mean", ms.mean}, {"std", ms.std}};
  };
  json agg = {{"success_rate", field([](const SeedReport& s) { return s.success_rate; })},
              {"effective_rank", field([](const SeedReport& s) { return s.effective_rank; })},
              {"straightness", field([](const SeedReport& s) { return s.straightness; })},
              {"latent_std_min", field([](const SeedReport& s) { return s.latent_std_min; })}};
  if (!seeds.empty())
    for (std::size_t i = 0; i < seeds[0].probes.size(); ++i) {
      const auto& p0 = seeds[0].probes[i];
      const std::string key = "probe_" + p0.target + (p0.kind == ProbeKind::Linear ? "_linear" : "_mlp");
      agg[key + "_r"] = field([i](const SeedReport& s) { return s.probes.at(i).pearson_r; });
      agg[key + "_mse"] = field([i](const SeedReport& s) { return s.probes.at(i).mse; });
    }
  return agg;
}

/// Report JSON; wall time is kept out so that reports are reproducible byte
/// for byte (see write_report).
inline json to_json(const RunReport& r) {
  json per = json::array();
  for (const auto& s : r.per_seed) per.push_back(to_json(s));
  return {{"config_hash", r.config_hash}, {"per_seed", per}, {"aggregate", aggregate(r.per_seed)}};
}

/// Writes report.json and, next to it, timing.json with the wall time.
inline void write_report(const RunReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write report " + path.string());
  f << to_json(r).dump(2) << '\n';
  std::ofstream t(path.parent_path() / (path.stem().string() + ".timing.json"));
  t << json{{"wall_time_s", r.wall_time_s}}.dump(2) << '\n';
}

struct HeldOut {
  TrajectoryDataset data;
  Matrix rank_obs;     // rank_samples x 256
  Matrix rank_states;  // rank_samples x 2
};

inline HeldOut make_heldout(const ExperimentConfig& cfg) {
  HeldOut h;
  h.data = generate_dataset(cfg.env, cfg.eval.heldout_episodes, cfg.eval.heldout_length, cfg.eval.heldout_seed);
  const std::size_t total = h.data.episodes * h.data.length;
  const std::size_t n = std::min(cfg.eval.rank_samples, total);
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(cfg.eval.heldout_seed, 7));
  rng.shuffle(idx);
  idx.resize(n);
  h.rank_obs = Matrix(n, kObsDim);
  h.rank_states = Matrix(n, kStateDim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = idx[i] / h.data.length, t = idx[i] % h.data.length;
    const auto o = h.data.observation(e, t);
    std::copy(o.begin(), o.end(), h.rank_obs.row(i).begin());
    const State s = h.data.hidden_state(e, t);
    h.rank_states(i, 0) = s[0];
    h.rank_states(i, 1) = s[1];
  }
  return h;
}

/// Encodes stored held-out episodes as a B x T x D tensor.
inline Tensor3 encode_episodes(const WorldModel& model, const TrajectoryDataset& ds, std::size_t episodes) {
  const std::size_t b = std::min(episodes, ds.episodes), t_len = ds.length;
  Matrix obs(b * t_len, kObsDim);
  for (std::size_t e = 0; e < b; ++e)
    for (std::size_t t = 0; t < t_len; ++t) {
      const auto o = ds.observation(e, t);
      std::copy(o.begin(), o.end(), obs.row(e * t_len + t).begin());
    }
  return Tensor3(b, t_len, model.encode_batch(obs));
}

/// Planning success, effective rank, straightness, latent spread and
/// linear/MLP probes of the hidden state for one trained model.
inline SeedReport evaluate_model(const WorldModel& model, const ExperimentConfig& cfg, std::uint64_t seed,
                                 const HeldOut& held, const std::filesystem::path* latents_csv = nullptr) {
  SeedReport rep;
  rep.seed = seed;
  const Matrix z = model.encode_batch(held.rank_obs);
  if (!z.all_finite()) throw NonFiniteError("evaluate_model: non-finite latents");
  rep.effective_rank = effective_rank(z);
  const auto sd = per_dim_std(z);
  rep.latent_std_min = *std::min_element(sd.begin(), sd.end());
  rep.latent_std_mean = std::accumulate(sd.begin(), sd.end(), 0.0) / static_cast<double>(sd.size());
  rep.straightness = straightness(encode_episodes(model, held.data, cfg.eval.straightness_episodes)).value;

  const std::string target = cfg.env == EnvId::TwoRoom ? "agent_xy" : "joint_angles";
  if (z.rows() > z.cols() + 1) {
    rep.probes.push_back(linear_probe(z, held.rank_states, derive_seed(seed, 11), 1e-4, target));
    MlpProbeConfig mc;
    mc.steps = cfg.eval.probe_steps;
    mc.seed = derive_seed(seed, 12);
    rep.probes.push_back(mlp_probe(z, held.rank_states, mc, target));
  }
  if (latents_csv) {
    std::vector<std::string> names{"s0", "s1"};
    write_latents_csv(*latents_csv, z, &held.rank_states, names);
  }
  if (cfg.eval.planning) {
    Rng prng(derive_seed(seed, 13));
    rep.success_rate = evaluate_planning(model, cfg.env, cfg.eval.goals, cfg.planner, prng).success_rate;
  }
  return rep;
}

/// Loads a checkpoint, refuses it if its config hash differs from `cfg`, and
/// evaluates it. Writes report.json (+ metrics.json, latents.csv) next to `out`.
inline RunReport run_eval(const std::filesystem::path& checkpoint, const ExperimentConfig& cfg,
                          const std::filesystem::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const std::string hash = config_hash(cfg);
  if (ck.meta.config_hash != hash)
    throw ContractError("run_eval: checkpoint config hash " + ck.meta.config_hash + " != config hash " + hash);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  const HeldOut held = make_heldout(cfg);
  RunReport rep;
  rep.config_hash = hash;
  const auto csv = out.parent_path() / "latents.csv";
  rep.per_seed.push_back(evaluate_model(ck.model, cfg, ck.meta.seed, held, cfg.eval.write_latents ? &csv : nullptr));
  rep.per_seed.back().final_losses = ck.meta.train_summary;
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_report(rep, out);
  std::ofstream(out.parent_path() / "metrics.json") << to_json(rep.per_seed.back()).dump(2) << '\n';
  return rep;
}

/// Train + evaluate every seed of cfg. Returns the combined report and
/// writes <out>/report.json.
inline RunReport run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrajectoryDataset data = load_or_generate_dataset(cfg);
  const HeldOut held = make_heldout(cfg);
  RunReport rep;
  rep.config_hash = config_hash(cfg);
  for (auto seed : cfg.seeds) {
    TrainingResult tr = run_training(cfg, seed, data);
    const auto csv = seed_dir(cfg, seed) / "latents.csv";
    SeedReport sr = evaluate_model(tr.model, cfg, seed, held, cfg.eval.write_latents ? &csv : nullptr);
    sr.final_losses = to_json(tr.final_losses);
    rep.per_seed.push_back(std::move(sr));
  }
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_report(rep, output_root(cfg.output_dir) / "report.json");
  return rep;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  std::size_t k = 1;
  std::optional<std::size_t> sub_dim;
};

struct SweepRow {
  std::size_t k = 0;
  std::size_t sub_dim = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  double success = 0.0;
  double effective_rank = 0.0;
  double straightness = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> failures;
  std::vector<RunReport> reports;
};

/// Full train + eval per (cell, seed). Failed cells are recorded and skipped.
/// Writes <out>/sweep.csv with columns K,d_s,seed,success,r_eff,straightness,config_hash.
inline SweepResult run_sweep(const ExperimentConfig& base, const std::vector<SweepCell>& cells,
                             const std::function<SeedReport(const ExperimentConfig&, std::uint64_t)>& runner = {}) {
  require(!cells.empty(), "run_sweep: no sweep values");
  SweepResult out;
  const TrajectoryDataset data = runner ? TrajectoryDataset{} : load_or_generate_dataset(base);
  std::optional<HeldOut> held;
  for (const auto& cell : cells) {
    ExperimentConfig cfg = base;
    cfg.subspaces = cell.k;
    cfg.sub_dim = cell.sub_dim;
    const std::string tag = "K" + std::to_string(cell.k) + (cell.sub_dim ? "_ds" + std::to_string(*cell.sub_dim) : "");
    cfg.output_dir = (std::filesystem::path(base.output_dir) / tag).string();
    RunReport rep;
    try {
      cfg.validate();
      rep.config_hash = config_hash(cfg);
    } catch (const std::exception& e) {
      for (auto seed : base.seeds) out.failures.push_back(tag + "/seed_" + std::to_string(seed) + ": " + e.what());
      continue;
    }
    for (auto seed : cfg.seeds) {
      try {
        SeedReport sr;
        if (runner) {
          sr = runner(cfg, seed);
        } else {
          if (!held) held = make_heldout(base);
          TrainingResult tr = run_training(cfg, seed, data);
          sr = evaluate_model(tr.model, cfg, seed, *held);
          sr.final_losses = to_json(tr.final_losses);
        }
        out.rows.push_back({cfg.subspaces, cfg.resolved_sub_dim(), seed, rep.config_hash, sr.success_rate, sr.effective_rank,
                            sr.straightness});
        rep.per_seed.push_back(std::move(sr));
      } catch (const std::exception& e) {
        out.failures.push_back(tag + "/seed_" + std::to_string(seed) + ": " + e.what());
      }
    }
    if (!runner) write_report(rep, output_root(cfg.output_dir) / "report.json");
    out.reports.push_back(std::move(rep));
  }
  const auto root = output_root(base.output_dir);
  std::filesystem::create_directories(root);
  std::ofstream csv(root / "sweep.csv");
  csv << "K,d_s,seed,success,r_eff,straightness,config_hash\n";
  csv.precision(10);
  for (const auto& r : out.rows)
    csv << r.k << ',' << r.sub_dim << ',' << r.seed << ',' << r.success << ',' << r.effective_rank << ','
        << r.straightness << ',' << r.config_hash << '\n';
  if (!out.failures.empty()) {
    std::ofstream f(root / "sweep_failures.txt");
    for (const auto& s : out.failures) f << s << '\n';
  }
  return out;
}

} // namespace subjepa
