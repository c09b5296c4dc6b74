#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "q2rl/envs.hpp"
#include "q2rl/policy.hpp"

namespace q2rl {

// One episode: obs has one more entry than actions (the final observation is
// kept so transitions (s, a, r, s') can be reconstructed), rewards pair with
// actions, `terminated` marks success at the last step.
struct Trajectory {
  std::vector<Eigen::VectorXd> obs;
  std::vector<Eigen::VectorXd> actions;
  std::vector<double> rewards;
  bool terminated = false;

  int length() const { return static_cast<int>(actions.size()); }
  void validate() const;
};

struct DemoDataset {
  std::vector<Trajectory> trajectories;

  bool empty() const { return trajectories.empty(); }
  int obs_dim() const;
  int action_dim() const;
  int total_steps() const;
  void validate() const;
};

// One JSON object per line:
// {"obs": [[...]], "actions": [[...]], "rewards": [...], "terminated": bool}
void save_demos(const DemoDataset& data, const std::string& path);
DemoDataset load_demos(const std::string& path);

using BcPolicy = MlpPolicy;

struct BcConfig {
  HeadKind head = HeadKind::kGaussian;
  int n_components = 5;  // used by the gmm head
  std::vector<int> hidden = {64, 64};
  bool layer_norm = false;
  double learning_rate = 1e-3;
  int epochs = 150;
  int batch_size = 256;
  double holdout_fraction = 0.1;
  int checkpoint_every = 25;  // epochs between saved snapshots; 0 disables
  double log_sigma_bias_init = -1.0;

  void validate() const;
};

struct BcTrainResult {
  BcPolicy policy;  // checkpoint with the best held-out NLL (final if no holdout)
  std::vector<double> train_nll;    // per epoch
  std::vector<double> holdout_nll;  // per epoch; empty when no holdout
  int best_epoch = 0;
  std::vector<std::pair<int, BcPolicy>> checkpoints;  // (epoch, snapshot)
};

// Minimizes mean negative log-likelihood of demo actions with mini-batch
// Adam over full-shuffle epochs. Deterministic given the rng seed.
BcTrainResult train_bc(const DemoDataset& data, const BcConfig& cfg, Rng& rng);

// Delegation helpers matching the estimation-facing vocabulary.
double policy_log_prob(const StochasticPolicy& p, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& a);
double policy_entropy(const StochasticPolicy& p, const Eigen::VectorXd& s);

// Deterministic scripted teacher plus additive noise, exposed as a policy
// with a synthetic Gaussian likelihood of scale = noise scale. Supports the
// robustness study on non-soft-optimal BC policies.
class TeacherPolicy final : public StochasticPolicy {
 public:
  TeacherPolicy(EnvSpec spec, TeacherNoise noise);

  int obs_dim() const override { return spec_.obs_dim; }
  int action_dim() const override { return spec_.action_dim; }
  double log_prob(const Eigen::VectorXd& obs, const Eigen::VectorXd& action) const override;
  double entropy(const Eigen::VectorXd& obs) const override;
  Eigen::VectorXd sample(const Eigen::VectorXd& obs, Rng& rng, bool use_mode) const override;

 private:
  DiagGaussianParams params_at(const Eigen::VectorXd& obs) const;

  EnvSpec spec_;
  TeacherNoise noise_;
  double log_sigma_ = 0.0;
};

}  // namespace q2rl
