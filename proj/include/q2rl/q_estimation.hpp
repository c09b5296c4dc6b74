#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "q2rl/bc.hpp"
#include "q2rl/envs.hpp"
#include "q2rl/sac.hpp"

namespace q2rl {

// Episodes collected under the BC policy with already-shaped rewards.
struct RolloutSet {
  std::vector<Trajectory> episodes;
  std::uint64_t seed = 0;
  std::string policy_id;
  RewardShaper shaper;

  int total_steps() const;
};

// Rolls out `n_episodes` full episodes (terminate on success or truncate at
// the length cap). Deterministic given the rng seed. Stochastic draws by
// default; use_mode exists for reproducibility tests.
RolloutSet collect_rollouts(Env& env, const StochasticPolicy& policy, int n_episodes,
                            const RewardShaper& shaper, Rng& rng, bool use_mode = false);

// Discounted return per step: G_t = sum_k gamma^k r_{t+k}, computed by the
// backward recursion G_t = r_t + gamma * G_{t+1}, G_T = 0. Truncated episodes
// get no bootstrap term (biased low; logged upstream).
Eigen::VectorXd monte_carlo_returns(const Trajectory& episode, double gamma);

struct ValueEstimator {
  Mlp net;

  double predict(const Eigen::VectorXd& s) const { return net.forward_one(s)[0]; }
  Eigen::VectorXd predict_batch(const Eigen::MatrixXd& s) const { return net.forward(s).col(0); }
};

struct ValueFitConfig {
  int train_steps = 20000;
  int batch_size = 256;
  double learning_rate = 3e-4;
  std::vector<int> hidden = {512, 512, 512};
  bool layer_norm = true;
};

struct ValueFitResult {
  ValueEstimator value;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  int truncated_episodes = 0;  // episodes whose returns are biased low
};

// Pools all (state, return) pairs across episodes into one squared-error
// regression dataset.
ValueFitResult fit_value(const RolloutSet& rollouts, double gamma, const ValueFitConfig& cfg,
                         Rng& rng);

// Frozen Boltzmann-style Q of the BC policy:
//   q(s, a) = V(s) + alpha * log pi_BC(a|s) + alpha * H[pi_BC(.|s)].
// Immutable after construction; serves as the stable gating reference.
class QBCEstimate {
 public:
  QBCEstimate(ValueEstimator value, std::shared_ptr<const StochasticPolicy> bc, double alpha);

  double q(const Eigen::VectorXd& s, const Eigen::VectorXd& a) const;
  double alpha() const { return alpha_; }
  const ValueEstimator& value() const { return value_; }
  const StochasticPolicy& bc() const { return *bc_; }
  std::shared_ptr<const StochasticPolicy> bc_ptr() const { return bc_; }

 private:
  ValueEstimator value_;
  std::shared_ptr<const StochasticPolicy> bc_;
  double alpha_ = 1.0;
};

double q_bc(const QBCEstimate& est, const Eigen::VectorXd& s, const Eigen::VectorXd& a);

struct QInitResult {
  double initial_mse = 0.0;
  double final_mse = 0.0;
  double fraction_within_half = 0.0;  // mean-over-ensemble residuals <= 0.5
};

// Supervised warm start: regresses every ensemble member onto q_bc(s, a)
// over the rollout state-action pairs, then hard-syncs the target copies.
// n_steps = 0 leaves the ensemble untouched.
QInitResult init_q_rl(const QBCEstimate& targets, const RolloutSet& rollouts,
                      CriticEnsemble& ensemble, int n_steps, int batch_size, double learning_rate,
                      Rng& rng);

// Persists rollouts as demo JSONL plus a sidecar JSON describing provenance.
void save_rollouts(const RolloutSet& rollouts, const std::string& jsonl_path,
                   const std::string& sidecar_path);

}  // namespace q2rl
