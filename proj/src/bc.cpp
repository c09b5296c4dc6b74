#include "q2rl/bc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace q2rl {

void Trajectory::validate() const {
  if (actions.empty()) throw InputError("Trajectory: empty episode");
  if (obs.size() != actions.size() + 1)
    throw InputError("Trajectory: obs must have one more entry than actions");
  if (rewards.size() != actions.size())
    throw InputError("Trajectory: rewards/actions length mismatch");
  const auto obs_dim = obs.front().size();
  const auto act_dim = actions.front().size();
  for (const auto& o : obs)
    if (o.size() != obs_dim) throw InputError("Trajectory: inconsistent obs dims");
  for (const auto& a : actions)
    if (a.size() != act_dim) throw InputError("Trajectory: inconsistent action dims");
}

int DemoDataset::obs_dim() const {
  if (empty()) throw InputError("DemoDataset: empty dataset");
  return static_cast<int>(trajectories.front().obs.front().size());
}

int DemoDataset::action_dim() const {
  if (empty()) throw InputError("DemoDataset: empty dataset");
  return static_cast<int>(trajectories.front().actions.front().size());
}

int DemoDataset::total_steps() const {
  int n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

void DemoDataset::validate() const {
  if (empty()) throw InputError("DemoDataset: empty dataset");
  for (const auto& t : trajectories) t.validate();
  const int od = obs_dim();
  const int ad = action_dim();
  for (const auto& t : trajectories) {
    if (t.obs.front().size() != od || t.actions.front().size() != ad)
      throw InputError("DemoDataset: trajectories disagree on dimensions");
  }
}

namespace {

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  auto vals = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

}  // namespace

void save_demos(const DemoDataset& data, const std::string& path) {
  data.validate();
  std::ofstream out(path);
  if (!out) throw PathError("save_demos: cannot write " + path);
  for (const auto& t : data.trajectories) {
    nlohmann::json j;
    nlohmann::json obs = nlohmann::json::array();
    for (const auto& o : t.obs) obs.push_back(vector_to_json(o));
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& a : t.actions) actions.push_back(vector_to_json(a));
    j["obs"] = std::move(obs);
    j["actions"] = std::move(actions);
    j["rewards"] = t.rewards;
    j["terminated"] = t.terminated;
    out << j.dump() << "\n";
  }
}

DemoDataset load_demos(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("load_demos: cannot read " + path);
  DemoDataset data;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("load_demos: bad JSON on line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    Trajectory t;
    for (const auto& o : j.at("obs")) t.obs.push_back(vector_from_json(o));
    for (const auto& a : j.at("actions")) t.actions.push_back(vector_from_json(a));
    t.rewards = j.at("rewards").get<std::vector<double>>();
    t.terminated = j.at("terminated").get<bool>();
    t.validate();
    data.trajectories.push_back(std::move(t));
  }
  data.validate();
  return data;
}

void BcConfig::validate() const {
  if (head == HeadKind::kGmm && n_components < 1)
    throw ConfigError("bc.n_components must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("bc.learning_rate must be positive");
  if (epochs < 1) throw ConfigError("bc.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("bc.batch_size must be >= 1");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ConfigError("bc.holdout_fraction must be in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("bc.checkpoint_every must be >= 0");
}

BcTrainResult train_bc(const DemoDataset& data, const BcConfig& cfg, Rng& rng) {
  data.validate();
  cfg.validate();

  const int n = data.total_steps();
  const int obs_dim = data.obs_dim();
  const int action_dim = data.action_dim();
  Eigen::MatrixXd all_obs(n, obs_dim);
  Eigen::MatrixXd all_actions(n, action_dim);
  int row = 0;
  for (const auto& t : data.trajectories) {
    for (int i = 0; i < t.length(); ++i) {
      all_obs.row(row) = t.obs[i].transpose();
      all_actions.row(row) = t.actions[i].transpose();
      ++row;
    }
  }

  std::vector<int> order = rng.distinct_indices(n, n);
  int n_holdout = static_cast<int>(std::floor(cfg.holdout_fraction * n));
  if (n - n_holdout < 1) n_holdout = 0;
  std::vector<int> holdout(order.begin(), order.begin() + n_holdout);
  std::vector<int> train(order.begin() + n_holdout, order.end());
  const int n_train = static_cast<int>(train.size());

  auto gather = [&](const std::vector<int>& idx, int lo, int hi, const Eigen::MatrixXd& src) {
    Eigen::MatrixXd out(hi - lo, src.cols());
    for (int i = lo; i < hi; ++i) out.row(i - lo) = src.row(idx[i]);
    return out;
  };
  const Eigen::MatrixXd hold_obs = gather(holdout, 0, n_holdout, all_obs);
  const Eigen::MatrixXd hold_actions = gather(holdout, 0, n_holdout, all_actions);

  BcTrainResult result;
  result.policy = MlpPolicy::make(obs_dim, action_dim, cfg.head, cfg.n_components, cfg.hidden,
                                  cfg.layer_norm, cfg.log_sigma_bias_init, rng);
  OptimizerState opt = make_optimizer_state(result.policy.trunk().param_count());
  AdamConfig adam;
  adam.lr = cfg.learning_rate;

  MlpPolicy best = result.policy;
  double best_nll = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Full-shuffle epoch over the training split.
    std::vector<int> perm = rng.distinct_indices(n_train, n_train);
    double epoch_nll = 0.0;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int stop = std::min(start + cfg.batch_size, n_train);
      Eigen::MatrixXd bx(stop - start, obs_dim), ba(stop - start, action_dim);
      for (int i = start; i < stop; ++i) {
        bx.row(i - start) = all_obs.row(train[perm[i]]);
        ba.row(i - start) = all_actions.row(train[perm[i]]);
      }
      MlpGrads grads = result.policy.trunk().zero_grads();
      const double loss = nll_loss_and_grad(result.policy, bx, ba, &grads);
      if (!std::isfinite(loss)) throw NumericError("train_bc: non-finite loss");
      apply_gradients(result.policy.trunk(), grads, opt, adam);
      epoch_nll += loss * (stop - start);
    }
    result.train_nll.push_back(epoch_nll / n_train);

    if (n_holdout > 0) {
      const double h = nll_loss_and_grad(result.policy, hold_obs, hold_actions, nullptr);
      result.holdout_nll.push_back(h);
      if (h < best_nll) {
        best_nll = h;
        best = result.policy;
        result.best_epoch = epoch + 1;
      }
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      result.checkpoints.emplace_back(epoch + 1, result.policy);
  }
  if (n_holdout > 0) {
    result.policy = std::move(best);
  } else {
    result.best_epoch = cfg.epochs;
  }
  return result;
}

double policy_log_prob(const StochasticPolicy& p, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& a) {
  return p.log_prob(s, a);
}

double policy_entropy(const StochasticPolicy& p, const Eigen::VectorXd& s) {
  return p.entropy(s);
}

TeacherPolicy::TeacherPolicy(EnvSpec spec, TeacherNoise noise)
    : spec_(std::move(spec)), noise_(noise) {
  // Synthetic Gaussian likelihood of scale = noise scale, floored at the
  // usual clamp so a noiseless teacher still has a finite density.
  log_sigma_ = std::log(std::max(noise_.scale, std::exp(MlpPolicy::kLogSigmaMin)));
}

DiagGaussianParams TeacherPolicy::params_at(const Eigen::VectorXd& obs) const {
  Rng unused(0);  // the zero-noise teacher never draws
  DiagGaussianParams p;
  p.mean = scripted_teacher(spec_, obs, TeacherNoise{}, unused);
  p.log_sigma = Eigen::VectorXd::Constant(spec_.action_dim, log_sigma_);
  return p;
}

double TeacherPolicy::log_prob(const Eigen::VectorXd& obs, const Eigen::VectorXd& action) const {
  return gaussian_log_prob(params_at(obs), action);
}

double TeacherPolicy::entropy(const Eigen::VectorXd& obs) const {
  return gaussian_entropy(params_at(obs));
}

Eigen::VectorXd TeacherPolicy::sample(const Eigen::VectorXd& obs, Rng& rng, bool use_mode) const {
  if (use_mode) return params_at(obs).mean;
  return scripted_teacher(spec_, obs, noise_, rng);
}

}  // namespace q2rl
