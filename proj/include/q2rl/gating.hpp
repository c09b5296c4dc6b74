#pragma once

#include <Eigen/Dense>

#include "q2rl/policy.hpp"
#include "q2rl/q_estimation.hpp"
#include "q2rl/sac.hpp"

namespace q2rl {

struct GateDecision {
  Eigen::VectorXd chosen_action;
  ActionSource source = ActionSource::kRl;
  double q_bc_value = 0.0;
  double q_rl_value = 0.0;
  Eigen::VectorXd a_bc;
  Eigen::VectorXd a_rl;
};

struct GateConfig {
  bool bc_use_mode = false;
  bool rl_use_mode = true;            // simulation-style: evaluate RL at the mode
  CriticAggregate aggregate = CriticAggregate::kMean;
  bool score_bc_with_critic = false;  // ablations: same trainable Q scores both
};

// The comparison law alone: BC wins iff q_bc_value > q_rl_value (ties to RL).
// Accepts infinities (useful as forcing sentinels); rejects NaN.
GateDecision gate_from_values(const Eigen::VectorXd& a_bc, const Eigen::VectorXd& a_rl,
                              double q_bc_value, double q_rl_value);

// Draws both proposals, scores a_BC with the frozen estimate (or the critic
// when score_bc_with_critic) and a_RL with the critic aggregate, then applies
// the comparison law. q_bc may be null only when score_bc_with_critic.
GateDecision gate(const Eigen::VectorXd& s, const StochasticPolicy& bc, const MlpPolicy& rl_actor,
                  const QBCEstimate* q_bc, const CriticEnsemble& critic, Rng& rng,
                  const GateConfig& cfg);

}  // namespace q2rl
