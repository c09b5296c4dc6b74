#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <vector>

#include "json.hpp"
#include "q2rl/approximator.hpp"
#include "q2rl/policy.hpp"
#include "q2rl/replay.hpp"

namespace q2rl {

// Affine sparse-reward shaping: r~ = scale * r + bias.
struct RewardShaper {
  double scale = 1.0;
  double bias = 0.0;
};

double shape_reward(const RewardShaper& sh, double r);

enum class CriticAggregate { kMean, kMin };
enum class BcLossTarget { kBcSamples, kDemoActions };

struct RLConfig {
  double gamma = 0.99;
  double tau = 0.005;
  int utd = 4;
  int subsample = 2;
  int ensemble_size = 10;
  int batch_size = 256;
  double bc_loss_weight = 0.3;
  BcLossTarget bc_loss_target = BcLossTarget::kBcSamples;
  double reward_scale = 5.0;
  double reward_bias = -1.0;
  double learning_rate = 3e-4;
  std::vector<int> hidden = {512, 512, 512};
  bool layer_norm = true;
  size_t replay_capacity = 2000000;
  bool auto_entropy = true;
  double entropy_coef_fixed = 0.1;
  double entropy_lr = 3e-4;
  double target_entropy = 0.0;  // resolved; default is -action_dim
  bool target_entropy_is_default = true;
  double log_sigma_bias_init = -2.5;

  RewardShaper shaper() const { return {reward_scale, reward_bias}; }
  double resolved_target_entropy(int action_dim) const {
    return target_entropy_is_default ? -static_cast<double>(action_dim) : target_entropy;
  }
  void validate() const;
};

// E online critics plus target copies, each an Mlp over [s, a].
class CriticEnsemble {
 public:
  CriticEnsemble() = default;
  static CriticEnsemble make(int obs_dim, int action_dim, int n_members,
                             const std::vector<int>& hidden, bool layer_norm, Rng& rng);

  int size() const { return static_cast<int>(members_.size()); }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  std::vector<Mlp>& members() { return members_; }
  const std::vector<Mlp>& members() const { return members_; }
  std::vector<Mlp>& targets() { return targets_; }
  const std::vector<Mlp>& targets() const { return targets_; }

  // Batched prediction by one online member.
  Eigen::VectorXd predict(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a, int member) const;
  Eigen::VectorXd predict_target(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                                 int member) const;

  // Scalar score over the online members for gating/evaluation.
  double aggregate_score(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                         CriticAggregate agg) const;

  void sync_targets();  // targets <- members (hard copy)
  void soft_update_targets(double tau);

  nlohmann::json to_json() const;
  static CriticEnsemble from_json(const nlohmann::json& j);

 private:
  int obs_dim_ = 0;
  int action_dim_ = 0;
  std::vector<Mlp> members_;
  std::vector<Mlp> targets_;
};

// Soft TD targets: y = r~ + gamma * (1 - terminal) * (min over a random
// subsample of target members at (s', a') - ent_coef * log pi(a'|s')), with
// a' = mu(s') + sigma(s') * eps. Truncated-but-not-terminal transitions
// bootstrap. The `_given` form takes the stochastic choices explicitly and is
// the deterministic per-transition core.
Eigen::VectorXd critic_targets_given(const TransitionBatch& batch, const CriticEnsemble& ens,
                                     const MlpPolicy& actor, double ent_coef, double gamma,
                                     const std::vector<int>& subset, const Eigen::MatrixXd& eps);
Eigen::VectorXd critic_targets(const TransitionBatch& batch, const CriticEnsemble& ens,
                               const MlpPolicy& actor, double ent_coef, const RLConfig& cfg,
                               Rng& rng);

// One Adam step per member on mean squared (Q(s,a) - y)^2; returns the
// member-mean loss (evaluated before the step).
double critic_update(CriticEnsemble& ens, const TransitionBatch& batch,
                     const Eigen::VectorXd& targets, std::vector<OptimizerState>& opt,
                     const AdamConfig& adam);

struct ActorStats {
  double loss = 0.0;
  double mean_q = 0.0;
  double mean_log_prob = 0.0;  // batch entropy estimate is its negation
  double bc_nll = 0.0;
};

// Actor objective with the stochastic choices supplied explicitly: eps
// reparameterizes a~ = mu + sigma * eps row by row, and bc_rows lists the
// batch rows whose auxiliary-likelihood action sits in the matching row of
// bc_actions (pass lambda = 0 with empty rows to drop the term). Accumulates
// d(loss)/d(trunk params) into grads when non-null. The deterministic core of
// actor_update.
ActorStats actor_loss_and_grad(const MlpPolicy& actor, const CriticEnsemble& ens,
                               const TransitionBatch& batch, const Eigen::MatrixXd& eps,
                               const Eigen::MatrixXd& bc_actions, const std::vector<int>& bc_rows,
                               double ent_coef, double lambda, MlpGrads* grads);

// One Adam step on L = mean_s[ ent_coef * log pi(a~|s) - mean-over-ensemble
// Q(s, a~) ] + lambda * L_BC with a~ the reparameterized sample. L_BC is the
// NLL of BC actions: fresh pi_BC samples at the batch states, or the stored
// demo actions of demo-tagged rows (skipped when the batch has none).
ActorStats actor_update(MlpPolicy& actor, const CriticEnsemble& ens, const TransitionBatch& batch,
                        const StochasticPolicy* bc, double ent_coef, const RLConfig& cfg,
                        OptimizerState& opt, Rng& rng);

// Learnable log entropy coefficient driven toward a target entropy.
struct EntropyTuner {
  bool enabled = true;
  double log_coef = std::log(0.1);
  double fixed = 0.1;
  double target = -2.0;
  OptimizerState opt;
  AdamConfig adam;

  static EntropyTuner make(const RLConfig& cfg, int action_dim);
  double coef() const { return enabled ? std::exp(log_coef) : fixed; }
  void update(double mean_log_prob);
};

struct StepMetrics {
  long learner_step = 0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double mean_q = 0.0;
  double batch_entropy = 0.0;
  double entropy_coef = 0.0;
};

// Owns the actor, critics, optimizers, and entropy coefficient; one
// train_step = `utd` critic updates on fresh batches + 1 actor update on the
// last batch's states + one soft target update. Returns nullopt (retryable)
// while the replay is underfull.
class Learner {
 public:
  Learner(MlpPolicy actor, CriticEnsemble critics, std::shared_ptr<const StochasticPolicy> bc,
          const RLConfig& cfg, std::uint64_t seed);

  std::optional<StepMetrics> train_step(const ReplayBuffer& replay);

  const MlpPolicy& actor() const { return actor_; }
  const CriticEnsemble& critics() const { return critics_; }
  CriticEnsemble& critics() { return critics_; }
  double entropy_coef() const { return tuner_.coef(); }
  long learner_step() const { return step_; }
  const RLConfig& config() const { return cfg_; }

 private:
  MlpPolicy actor_;
  CriticEnsemble critics_;
  std::shared_ptr<const StochasticPolicy> bc_;
  RLConfig cfg_;
  AdamConfig adam_;
  std::vector<OptimizerState> critic_opt_;
  OptimizerState actor_opt_;
  EntropyTuner tuner_;
  Rng rng_;
  long step_ = 0;
};

}  // namespace q2rl
