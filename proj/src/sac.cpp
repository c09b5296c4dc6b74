#include "q2rl/sac.hpp"

#include <cmath>

namespace q2rl {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::MatrixXd join_sa(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a) {
  Eigen::MatrixXd x(s.rows(), s.cols() + a.cols());
  x << s, a;
  return x;
}

double clamp_ls(double raw) {
  return std::min(std::max(raw, MlpPolicy::kLogSigmaMin), MlpPolicy::kLogSigmaMax);
}

double clamp_mask(double raw) {
  return (raw > MlpPolicy::kLogSigmaMin && raw < MlpPolicy::kLogSigmaMax) ? 1.0 : 0.0;
}

}  // namespace

double shape_reward(const RewardShaper& sh, double r) { return sh.scale * r + sh.bias; }

void RLConfig::validate() const {
  if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("rl.gamma must be in [0, 1)");
  if (tau <= 0.0 || tau > 1.0) throw ConfigError("rl.tau must be in (0, 1]");
  if (utd < 1) throw ConfigError("rl.utd must be >= 1");
  if (ensemble_size < 1) throw ConfigError("rl.ensemble_size must be >= 1");
  if (subsample < 1 || subsample > ensemble_size)
    throw ConfigError("rl.subsample must be in [1, ensemble_size]");
  if (batch_size < 1) throw ConfigError("rl.batch_size must be >= 1");
  if (bc_loss_weight < 0.0) throw ConfigError("rl.bc_loss_weight must be >= 0");
  if (learning_rate <= 0.0) throw ConfigError("rl.learning_rate must be positive");
  if (replay_capacity < 1) throw ConfigError("rl.replay_capacity must be >= 1");
  if (entropy_lr <= 0.0) throw ConfigError("rl.entropy_lr must be positive");
  if (entropy_coef_fixed <= 0.0) throw ConfigError("rl.entropy_coef must be positive");
}

CriticEnsemble CriticEnsemble::make(int obs_dim, int action_dim, int n_members,
                                    const std::vector<int>& hidden, bool layer_norm, Rng& rng) {
  if (n_members < 1) throw InputError("CriticEnsemble::make: need >= 1 member");
  CriticEnsemble ens;
  ens.obs_dim_ = obs_dim;
  ens.action_dim_ = action_dim;
  std::vector<int> sizes;
  sizes.push_back(obs_dim + action_dim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  for (int m = 0; m < n_members; ++m)
    ens.members_.push_back(Mlp::make(sizes, Activation::kRelu, layer_norm, rng));
  ens.targets_ = ens.members_;
  return ens;
}

Eigen::VectorXd CriticEnsemble::predict(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                                        int member) const {
  return members_.at(member).forward(join_sa(s, a)).col(0);
}

Eigen::VectorXd CriticEnsemble::predict_target(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                                               int member) const {
  return targets_.at(member).forward(join_sa(s, a)).col(0);
}

double CriticEnsemble::aggregate_score(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                                       CriticAggregate agg) const {
  Eigen::MatrixXd x(1, s.size() + a.size());
  x << s.transpose(), a.transpose();
  double mean = 0.0;
  double mn = std::numeric_limits<double>::infinity();
  for (const auto& m : members_) {
    const double q = m.forward(x)(0, 0);
    mean += q;
    mn = std::min(mn, q);
  }
  mean /= static_cast<double>(size());
  return agg == CriticAggregate::kMean ? mean : mn;
}

void CriticEnsemble::sync_targets() { targets_ = members_; }

void CriticEnsemble::soft_update_targets(double tau) {
  for (int m = 0; m < size(); ++m) soft_update(targets_[m], members_[m], tau);
}

nlohmann::json CriticEnsemble::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["obs_dim"] = obs_dim_;
  j["action_dim"] = action_dim_;
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : members_) members.push_back(m.to_json());
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : targets_) targets.push_back(t.to_json());
  j["members"] = std::move(members);
  j["targets"] = std::move(targets);
  return j;
}

CriticEnsemble CriticEnsemble::from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1)
    throw InputError("CriticEnsemble::from_json: unsupported format_version");
  CriticEnsemble ens;
  ens.obs_dim_ = j.at("obs_dim").get<int>();
  ens.action_dim_ = j.at("action_dim").get<int>();
  for (const auto& m : j.at("members")) ens.members_.push_back(Mlp::from_json(m));
  for (const auto& t : j.at("targets")) ens.targets_.push_back(Mlp::from_json(t));
  if (ens.members_.empty() || ens.members_.size() != ens.targets_.size())
    throw InputError("CriticEnsemble::from_json: member/target mismatch");
  return ens;
}

Eigen::VectorXd critic_targets_given(const TransitionBatch& batch, const CriticEnsemble& ens,
                                     const MlpPolicy& actor, double ent_coef, double gamma,
                                     const std::vector<int>& subset, const Eigen::MatrixXd& eps) {
  if (actor.head() != HeadKind::kGaussian)
    throw InputError("critic_targets: RL actor must have a gaussian head");
  if (subset.empty()) throw InputError("critic_targets: empty target subset");
  const int b = batch.size();
  const int d = actor.action_dim();
  if (eps.rows() != b || eps.cols() != d) throw ShapeError("critic_targets: eps shape mismatch");

  const Eigen::MatrixXd head = actor.trunk().forward(batch.s_next);
  Eigen::MatrixXd mu = head.leftCols(d);
  Eigen::MatrixXd ls = head.rightCols(d).unaryExpr(&clamp_ls);
  Eigen::MatrixXd sigma = ls.array().exp().matrix();
  Eigen::MatrixXd a_next = mu + sigma.cwiseProduct(eps);

  // log pi(a'|s') with z = eps by construction.
  Eigen::VectorXd log_prob =
      (-0.5 * (eps.array().square() + 2.0 * ls.array() + kLog2Pi)).rowwise().sum().matrix();

  Eigen::VectorXd min_q;
  for (size_t i = 0; i < subset.size(); ++i) {
    const Eigen::VectorXd q = ens.predict_target(batch.s_next, a_next, subset[i]);
    if (i == 0)
      min_q = q;
    else
      min_q = min_q.cwiseMin(q);
  }

  const Eigen::ArrayXd not_done = 1.0 - batch.terminal.array();
  return (batch.r.array() +
          gamma * not_done * (min_q.array() - ent_coef * log_prob.array()))
      .matrix();
}

Eigen::VectorXd critic_targets(const TransitionBatch& batch, const CriticEnsemble& ens,
                               const MlpPolicy& actor, double ent_coef, const RLConfig& cfg,
                               Rng& rng) {
  const std::vector<int> subset = rng.distinct_indices(cfg.subsample, ens.size());
  const Eigen::MatrixXd eps = rng.normal_matrix(batch.size(), actor.action_dim());
  return critic_targets_given(batch, ens, actor, ent_coef, cfg.gamma, subset, eps);
}

double critic_update(CriticEnsemble& ens, const TransitionBatch& batch,
                     const Eigen::VectorXd& targets, std::vector<OptimizerState>& opt,
                     const AdamConfig& adam) {
  if (targets.size() != batch.size()) throw ShapeError("critic_update: targets size mismatch");
  if (opt.size() != static_cast<size_t>(ens.size()))
    throw ShapeError("critic_update: optimizer state count mismatch");
  const Eigen::MatrixXd x = join_sa(batch.s, batch.a);
  double total_loss = 0.0;
  for (int m = 0; m < ens.size(); ++m) {
    MlpGrads grads = ens.members()[m].zero_grads();
    total_loss += mse_loss_and_grad(ens.members()[m], x, targets, &grads);
    apply_gradients(ens.members()[m], grads, opt[m], adam);
  }
  const double loss = total_loss / ens.size();
  if (!std::isfinite(loss)) throw NumericError("critic_update: non-finite loss");
  return loss;
}

ActorStats actor_loss_and_grad(const MlpPolicy& actor, const CriticEnsemble& ens,
                               const TransitionBatch& batch, const Eigen::MatrixXd& eps,
                               const Eigen::MatrixXd& bc_actions, const std::vector<int>& bc_rows,
                               double ent_coef, double lambda, MlpGrads* grads) {
  if (actor.head() != HeadKind::kGaussian)
    throw InputError("actor_loss_and_grad: RL actor must have a gaussian head");
  const int b = batch.size();
  const int d = actor.action_dim();
  if (eps.rows() != b || eps.cols() != d)
    throw ShapeError("actor_loss_and_grad: eps shape mismatch");
  if (!bc_rows.empty() && (bc_actions.rows() != b || bc_actions.cols() != d))
    throw ShapeError("actor_loss_and_grad: bc_actions shape mismatch");
  for (int i : bc_rows)
    if (i < 0 || i >= b) throw InputError("actor_loss_and_grad: bc row out of range");
  const double e = static_cast<double>(ens.size());

  ForwardCache cache;
  const Eigen::MatrixXd head = actor.trunk().forward_cached(batch.s, cache);
  const Eigen::MatrixXd mu = head.leftCols(d);
  const Eigen::MatrixXd raw_ls = head.rightCols(d);
  const Eigen::MatrixXd ls = raw_ls.unaryExpr(&clamp_ls);
  const Eigen::MatrixXd sigma = ls.array().exp().matrix();
  const Eigen::MatrixXd mask = raw_ls.unaryExpr(&clamp_mask);

  const Eigen::MatrixXd a_tilde = mu + sigma.cwiseProduct(eps);
  const Eigen::VectorXd log_prob =
      (-0.5 * (eps.array().square() + 2.0 * ls.array() + kLog2Pi)).rowwise().sum().matrix();

  // Q(s, a~) averaged over the ensemble; gradient reaches a~ through each
  // member's input. d/d a~ of -(1/b) mean_m Q_m arrives scaled by -1/(b*e).
  Eigen::MatrixXd d_a = Eigen::MatrixXd::Zero(b, d);
  double mean_q = 0.0;
  const Eigen::MatrixXd x = join_sa(batch.s, a_tilde);
  const Eigen::MatrixXd d_out = Eigen::MatrixXd::Constant(b, 1, -1.0 / (b * e));
  for (int m = 0; m < ens.size(); ++m) {
    if (grads) {
      ForwardCache ccache;
      const Eigen::MatrixXd q = ens.members()[m].forward_cached(x, ccache);
      mean_q += q.col(0).mean() / e;
      BackwardResult back = ens.members()[m].backward(ccache, d_out);
      d_a += back.d_input.rightCols(d);
    } else {
      mean_q += ens.members()[m].forward(x).col(0).mean() / e;
    }
  }

  Eigen::MatrixXd d_head = Eigen::MatrixXd::Zero(b, 2 * d);
  // Entropy term: (ent_coef/b) * sum_b log pi; d/d mu = 0, d/d raw_ls = -ent_coef/b.
  d_head.rightCols(d) = (-ent_coef / b) * mask;
  // Q term through the reparameterized action.
  d_head.leftCols(d) += d_a;
  d_head.rightCols(d) += d_a.cwiseProduct(sigma).cwiseProduct(eps).cwiseProduct(mask);

  // Auxiliary likelihood term on the supplied rows.
  double bc_nll = 0.0;
  if (lambda > 0.0 && !bc_rows.empty()) {
    const double denom = static_cast<double>(bc_rows.size());
    for (int i : bc_rows) {
      const Eigen::ArrayXd z =
          (bc_actions.row(i).transpose().array() - mu.row(i).transpose().array()) /
          sigma.row(i).transpose().array();
      bc_nll += 0.5 * (z.square() + 2.0 * ls.row(i).transpose().array() + kLog2Pi).sum() / denom;
      d_head.row(i).head(d) +=
          (lambda / denom) * (-z / sigma.row(i).transpose().array()).matrix().transpose();
      d_head.row(i).tail(d) += (lambda / denom) *
                               ((1.0 - z.square()) * mask.row(i).transpose().array())
                                   .matrix()
                                   .transpose();
    }
  }

  if (grads) grads->add(actor.trunk().backward(cache, d_head).grads);

  ActorStats stats;
  stats.mean_q = mean_q;
  stats.mean_log_prob = log_prob.mean();
  stats.bc_nll = bc_nll;
  stats.loss = ent_coef * stats.mean_log_prob - mean_q + lambda * bc_nll;
  if (!std::isfinite(stats.loss)) throw NumericError("actor_loss_and_grad: non-finite loss");
  return stats;
}

ActorStats actor_update(MlpPolicy& actor, const CriticEnsemble& ens, const TransitionBatch& batch,
                        const StochasticPolicy* bc, double ent_coef, const RLConfig& cfg,
                        OptimizerState& opt, Rng& rng) {
  if (actor.head() != HeadKind::kGaussian)
    throw InputError("actor_update: RL actor must have a gaussian head");
  const int b = batch.size();
  const int d = actor.action_dim();

  const Eigen::MatrixXd eps = rng.normal_matrix(b, d);

  std::vector<int> rows;
  Eigen::MatrixXd bc_actions;
  const double lambda = bc ? cfg.bc_loss_weight : 0.0;
  if (lambda > 0.0) {
    bc_actions.resize(b, d);
    if (cfg.bc_loss_target == BcLossTarget::kBcSamples) {
      for (int i = 0; i < b; ++i) {
        bc_actions.row(i) = bc->sample(batch.s.row(i).transpose(), rng, false).transpose();
        rows.push_back(i);
      }
    } else {
      for (int i = 0; i < b; ++i) {
        if (batch.source[i] == ActionSource::kDemo) {
          bc_actions.row(i) = batch.a.row(i);
          rows.push_back(i);
        }
      }
    }
  }

  MlpGrads grads = actor.trunk().zero_grads();
  const ActorStats stats =
      actor_loss_and_grad(actor, ens, batch, eps, bc_actions, rows, ent_coef, lambda, &grads);
  AdamConfig adam;
  adam.lr = cfg.learning_rate;
  apply_gradients(actor.trunk(), grads, opt, adam);
  return stats;
}

EntropyTuner EntropyTuner::make(const RLConfig& cfg, int action_dim) {
  EntropyTuner t;
  t.enabled = cfg.auto_entropy;
  t.fixed = cfg.entropy_coef_fixed;
  t.log_coef = std::log(cfg.entropy_coef_fixed);
  t.target = cfg.resolved_target_entropy(action_dim);
  t.opt = make_optimizer_state(1);
  t.adam.lr = cfg.entropy_lr;
  return t;
}

void EntropyTuner::update(double mean_log_prob) {
  if (!enabled) return;
  Eigen::VectorXd p(1), g(1);
  p[0] = log_coef;
  g[0] = -(mean_log_prob + target);
  optimizer_step(p, g, opt, adam);
  log_coef = p[0];
}

Learner::Learner(MlpPolicy actor, CriticEnsemble critics,
                 std::shared_ptr<const StochasticPolicy> bc, const RLConfig& cfg,
                 std::uint64_t seed)
    : actor_(std::move(actor)),
      critics_(std::move(critics)),
      bc_(std::move(bc)),
      cfg_(cfg),
      rng_(seed) {
  cfg_.validate();
  if (actor_.head() != HeadKind::kGaussian)
    throw InputError("Learner: RL actor must have a gaussian head");
  if (critics_.size() != cfg_.ensemble_size)
    throw InputError("Learner: ensemble size does not match config");
  adam_.lr = cfg_.learning_rate;
  for (int m = 0; m < critics_.size(); ++m)
    critic_opt_.push_back(make_optimizer_state(critics_.members()[m].param_count()));
  actor_opt_ = make_optimizer_state(actor_.trunk().param_count());
  tuner_ = EntropyTuner::make(cfg_, actor_.action_dim());
}

std::optional<StepMetrics> Learner::train_step(const ReplayBuffer& replay) {
  if (replay.size() < static_cast<size_t>(cfg_.batch_size)) return std::nullopt;
  step_ += 1;
  const double coef = tuner_.coef();
  double critic_loss = 0.0;
  TransitionBatch last;
  for (int u = 0; u < cfg_.utd; ++u) {
    TransitionBatch batch = replay.sample(cfg_.batch_size, rng_);
    const Eigen::VectorXd targets = critic_targets(batch, critics_, actor_, coef, cfg_, rng_);
    critic_loss += critic_update(critics_, batch, targets, critic_opt_, adam_) / cfg_.utd;
    last = std::move(batch);
  }
  const ActorStats as =
      actor_update(actor_, critics_, last, bc_.get(), coef, cfg_, actor_opt_, rng_);
  tuner_.update(as.mean_log_prob);
  critics_.soft_update_targets(cfg_.tau);

  StepMetrics m;
  m.learner_step = step_;
  m.critic_loss = critic_loss;
  m.actor_loss = as.loss;
  m.mean_q = as.mean_q;
  m.batch_entropy = -as.mean_log_prob;
  m.entropy_coef = coef;
  return m;
}

}  // namespace q2rl
