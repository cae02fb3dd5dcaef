// Minimal end-to-end use of the library: generate TwoRoom data, train a small
// world model for a few hundred steps, inspect its latents and plan with it.

#include <iostream>

#include "subjepa/subjepa.hpp"

using namespace subjepa;

int main() {
  ExperimentConfig cfg;
  cfg.dataset_episodes = 200;
  cfg.steps = 300;
  cfg.log_every = 100;
  cfg.eval.rank_samples = 500;
  cfg.eval.probe_steps = 300;
  cfg.eval.goals = 5;
  cfg.planner.population = 64;
  cfg.planner.elites = 8;
  cfg.planner.iterations = 3;
  cfg.output_dir = "runs/quickstart";

  const TrajectoryDataset data = load_or_generate_dataset(cfg);
  std::cout << "dataset: " << data.episodes << " episodes of " << data.length << " frames\n";

  TrainingResult tr = run_training(cfg, /*seed=*/0, data);
  std::cout << "after " << tr.steps_done << " steps: l_pred " << tr.final_losses.l_pred << ", l_reg "
            << tr.final_losses.l_reg << "\n";

  // Latent of a single state, and a one-step prediction from it.
  const State s{0.25, 0.5};
  const Latent z = tr.model.encode_state(EnvId::TwoRoom, s);
  const Latent next = tr.model.predict(z, std::vector<double>{0.05, 0.0});
  Latent step(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) step[i] = next[i] - z[i];
  std::cout << "|z| = " << norm2(z) << ", |z' - z| = " << norm2(step) << "\n";

  const SeedReport rep = evaluate_model(tr.model, cfg, 0, make_heldout(cfg));
  std::cout << "effective rank " << rep.effective_rank << ", straightness " << rep.straightness << ", min latent std "
            << rep.latent_std_min << "\n";
  for (const auto& p : rep.probes)
    std::cout << (p.kind == ProbeKind::Linear ? "linear" : "mlp") << " probe of " << p.target << ": r = " << p.pearson_r
              << "\n";
  std::cout << "planning success " << rep.success_rate << " on " << cfg.eval.goals << " goals\n";
  std::cout << "checkpoint: " << tr.checkpoint << "\n";
}
