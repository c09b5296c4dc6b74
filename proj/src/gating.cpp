#include "q2rl/gating.hpp"

#include <cmath>
#include <sstream>

namespace q2rl {

GateDecision gate_from_values(const Eigen::VectorXd& a_bc, const Eigen::VectorXd& a_rl,
                              double q_bc_value, double q_rl_value) {
  if (a_bc.size() != a_rl.size()) throw ShapeError("gate_from_values: action dims differ");
  if (std::isnan(q_bc_value) || std::isnan(q_rl_value))
    throw NumericError("gate_from_values: NaN Q-value");
  GateDecision d;
  d.a_bc = a_bc;
  d.a_rl = a_rl;
  d.q_bc_value = q_bc_value;
  d.q_rl_value = q_rl_value;
  d.source = q_bc_value > q_rl_value ? ActionSource::kBc : ActionSource::kRl;
  d.chosen_action = d.source == ActionSource::kBc ? a_bc : a_rl;
  return d;
}

GateDecision gate(const Eigen::VectorXd& s, const StochasticPolicy& bc, const MlpPolicy& rl_actor,
                  const QBCEstimate* q_bc, const CriticEnsemble& critic, Rng& rng,
                  const GateConfig& cfg) {
  if (!cfg.score_bc_with_critic && !q_bc)
    throw InputError("gate: frozen estimate required unless score_bc_with_critic");
  if (bc.action_dim() != rl_actor.action_dim() || bc.obs_dim() != rl_actor.obs_dim())
    throw ShapeError("gate: policies disagree on dimensions");

  const Eigen::VectorXd a_bc = bc.sample(s, rng, cfg.bc_use_mode);
  const Eigen::VectorXd a_rl = rl_actor.sample(s, rng, cfg.rl_use_mode);
  const double v_bc = cfg.score_bc_with_critic ? critic.aggregate_score(s, a_bc, cfg.aggregate)
                                               : q_bc->q(s, a_bc);
  const double v_rl = critic.aggregate_score(s, a_rl, cfg.aggregate);
  if (!std::isfinite(v_bc) || !std::isfinite(v_rl)) {
    std::ostringstream msg;
    msg << "gate: non-finite Q-value (q_bc=" << v_bc << ", q_rl=" << v_rl << ", |s|=" << s.norm()
        << ")";
    throw NumericError(msg.str());
  }
  return gate_from_values(a_bc, a_rl, v_bc, v_rl);
}

}  // namespace q2rl
