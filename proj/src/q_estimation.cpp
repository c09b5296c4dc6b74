#include "q2rl/q_estimation.hpp"

#include <cmath>
#include <fstream>

namespace q2rl {

int RolloutSet::total_steps() const {
  int n = 0;
  for (const auto& e : episodes) n += e.length();
  return n;
}

RolloutSet collect_rollouts(Env& env, const StochasticPolicy& policy, int n_episodes,
                            const RewardShaper& shaper, Rng& rng, bool use_mode) {
  if (n_episodes < 0) throw InputError("collect_rollouts: n_episodes must be >= 0");
  RolloutSet out;
  out.shaper = shaper;
  for (int e = 0; e < n_episodes; ++e) {
    Trajectory traj;
    Eigen::VectorXd obs = env.reset(rng);
    traj.obs.push_back(obs);
    while (true) {
      const Eigen::VectorXd action = policy.sample(obs, rng, use_mode);
      const StepResult res = env.step(action);
      traj.actions.push_back(action);
      traj.rewards.push_back(shape_reward(shaper, res.reward));
      traj.obs.push_back(res.next_obs);
      obs = res.next_obs;
      if (res.terminated || res.truncated) {
        traj.terminated = res.terminated;
        break;
      }
    }
    out.episodes.push_back(std::move(traj));
  }
  return out;
}

Eigen::VectorXd monte_carlo_returns(const Trajectory& episode, double gamma) {
  if (episode.actions.empty()) throw InputError("monte_carlo_returns: empty episode");
  if (gamma < 0.0 || gamma >= 1.0) throw InputError("monte_carlo_returns: gamma must be in [0,1)");
  const int t_len = episode.length();
  Eigen::VectorXd returns(t_len);
  double g = 0.0;
  for (int t = t_len - 1; t >= 0; --t) {
    g = episode.rewards[t] + gamma * g;
    returns[t] = g;
  }
  return returns;
}

ValueFitResult fit_value(const RolloutSet& rollouts, double gamma, const ValueFitConfig& cfg,
                         Rng& rng) {
  if (rollouts.episodes.empty()) throw InputError("fit_value: empty rollout set");
  if (cfg.train_steps < 0) throw InputError("fit_value: train_steps must be >= 0");

  const int n = rollouts.total_steps();
  const int obs_dim = static_cast<int>(rollouts.episodes.front().obs.front().size());
  Eigen::MatrixXd states(n, obs_dim);
  Eigen::VectorXd targets(n);
  int row = 0;
  ValueFitResult result;
  for (const auto& e : rollouts.episodes) {
    if (!e.terminated) result.truncated_episodes += 1;
    const Eigen::VectorXd g = monte_carlo_returns(e, gamma);
    for (int t = 0; t < e.length(); ++t) {
      states.row(row) = e.obs[t].transpose();
      targets[row] = g[t];
      ++row;
    }
  }

  std::vector<int> sizes;
  sizes.push_back(obs_dim);
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(1);
  result.value.net = Mlp::make(sizes, Activation::kRelu, cfg.layer_norm, rng);
  OptimizerState opt = make_optimizer_state(result.value.net.param_count());
  AdamConfig adam;
  adam.lr = cfg.learning_rate;

  result.initial_mse = (result.value.predict_batch(states) - targets).squaredNorm() / n;
  const int bsz = std::min(cfg.batch_size, n);
  for (int step = 0; step < cfg.train_steps; ++step) {
    Eigen::MatrixXd bs(bsz, obs_dim);
    Eigen::VectorXd bt(bsz);
    for (int i = 0; i < bsz; ++i) {
      const int idx = rng.uniform_int(n);
      bs.row(i) = states.row(idx);
      bt[i] = targets[idx];
    }
    MlpGrads grads = result.value.net.zero_grads();
    mse_loss_and_grad(result.value.net, bs, bt, &grads);
    apply_gradients(result.value.net, grads, opt, adam);
  }
  result.final_mse = (result.value.predict_batch(states) - targets).squaredNorm() / n;
  if (!std::isfinite(result.final_mse)) throw NumericError("fit_value: non-finite loss");
  return result;
}

QBCEstimate::QBCEstimate(ValueEstimator value, std::shared_ptr<const StochasticPolicy> bc,
                         double alpha)
    : value_(std::move(value)), bc_(std::move(bc)), alpha_(alpha) {
  if (!bc_) throw InputError("QBCEstimate: null BC policy");
  if (alpha_ <= 0.0) throw InputError("QBCEstimate: alpha must be positive");
  if (value_.net.input_dim() != bc_->obs_dim())
    throw ShapeError("QBCEstimate: value net and policy disagree on obs dim");
}

double QBCEstimate::q(const Eigen::VectorXd& s, const Eigen::VectorXd& a) const {
  if (s.size() != bc_->obs_dim() || a.size() != bc_->action_dim())
    throw ShapeError("QBCEstimate::q: dimension mismatch");
  return value_.predict(s) + alpha_ * bc_->log_prob(s, a) + alpha_ * bc_->entropy(s);
}

double q_bc(const QBCEstimate& est, const Eigen::VectorXd& s, const Eigen::VectorXd& a) {
  return est.q(s, a);
}

QInitResult init_q_rl(const QBCEstimate& targets, const RolloutSet& rollouts,
                      CriticEnsemble& ensemble, int n_steps, int batch_size, double learning_rate,
                      Rng& rng) {
  if (rollouts.episodes.empty()) throw InputError("init_q_rl: empty rollout set");
  if (n_steps < 0) throw InputError("init_q_rl: n_steps must be >= 0");
  QInitResult result;
  if (n_steps == 0) return result;

  const int n = rollouts.total_steps();
  const int obs_dim = ensemble.obs_dim();
  const int act_dim = ensemble.action_dim();
  Eigen::MatrixXd x(n, obs_dim + act_dim);
  Eigen::VectorXd y(n);
  int row = 0;
  for (const auto& e : rollouts.episodes) {
    for (int t = 0; t < e.length(); ++t) {
      x.row(row) << e.obs[t].transpose(), e.actions[t].transpose();
      y[row] = targets.q(e.obs[t], e.actions[t]);
      ++row;
    }
  }

  AdamConfig adam;
  adam.lr = learning_rate;
  std::vector<OptimizerState> opt;
  for (int m = 0; m < ensemble.size(); ++m)
    opt.push_back(make_optimizer_state(ensemble.members()[m].param_count()));

  auto ensemble_mse = [&]() {
    Eigen::VectorXd mean_pred = Eigen::VectorXd::Zero(n);
    for (int m = 0; m < ensemble.size(); ++m)
      mean_pred += ensemble.members()[m].forward(x).col(0);
    mean_pred /= ensemble.size();
    return std::pair(mean_pred, (mean_pred - y).squaredNorm() / n);
  };
  result.initial_mse = ensemble_mse().second;

  const int bsz = std::min(batch_size, n);
  for (int step = 0; step < n_steps; ++step) {
    Eigen::MatrixXd bx(bsz, x.cols());
    Eigen::VectorXd by(bsz);
    for (int i = 0; i < bsz; ++i) {
      const int idx = rng.uniform_int(n);
      bx.row(i) = x.row(idx);
      by[i] = y[idx];
    }
    for (int m = 0; m < ensemble.size(); ++m) {
      MlpGrads grads = ensemble.members()[m].zero_grads();
      mse_loss_and_grad(ensemble.members()[m], bx, by, &grads);
      apply_gradients(ensemble.members()[m], grads, opt[m], adam);
    }
  }

  const auto [mean_pred, final_mse] = ensemble_mse();
  result.final_mse = final_mse;
  if (!std::isfinite(final_mse)) throw NumericError("init_q_rl: non-finite loss");
  int within = 0;
  for (int i = 0; i < n; ++i)
    if (std::abs(mean_pred[i] - y[i]) <= 0.5) ++within;
  result.fraction_within_half = static_cast<double>(within) / n;
  ensemble.sync_targets();
  return result;
}

void save_rollouts(const RolloutSet& rollouts, const std::string& jsonl_path,
                   const std::string& sidecar_path) {
  DemoDataset data;
  data.trajectories = rollouts.episodes;
  save_demos(data, jsonl_path);
  nlohmann::json j;
  j["seed"] = rollouts.seed;
  j["policy_id"] = rollouts.policy_id;
  j["reward_scale"] = rollouts.shaper.scale;
  j["reward_bias"] = rollouts.shaper.bias;
  std::ofstream out(sidecar_path);
  if (!out) throw PathError("save_rollouts: cannot write " + sidecar_path);
  out << j.dump(2) << "\n";
}

}  // namespace q2rl
