#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>

#include "json.hpp"
#include "q2rl/approximator.hpp"
#include "q2rl/distributions.hpp"
#include "q2rl/rng.hpp"

namespace q2rl {

// Minimal interface every action-proposing policy exposes: likelihood,
// entropy, and sampling. Implemented by MlpPolicy and the noisy-teacher
// wrapper, so downstream consumers never care which one they hold.
class StochasticPolicy {
 public:
  virtual ~StochasticPolicy() = default;
  virtual int obs_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual double log_prob(const Eigen::VectorXd& obs, const Eigen::VectorXd& action) const = 0;
  virtual double entropy(const Eigen::VectorXd& obs) const = 0;
  virtual Eigen::VectorXd sample(const Eigen::VectorXd& obs, Rng& rng, bool use_mode) const = 0;
};

enum class HeadKind { kGaussian, kGmm };

std::string head_name(HeadKind head);
HeadKind head_from_name(const std::string& name);

// MLP trunk emitting distribution parameters per observation.
// Gaussian head layout: [mu(0..d), log_sigma(d..2d)].
// GMM head layout: per component i, [mu_i, log_sigma_i] blocks of 2d, then K
// mixture logits at the tail. log_sigma is clamped to [kLogSigmaMin, kLogSigmaMax].
class MlpPolicy final : public StochasticPolicy {
 public:
  static constexpr double kLogSigmaMin = -10.0;
  static constexpr double kLogSigmaMax = 2.0;

  MlpPolicy() = default;

  // log_sigma_bias is added to the final-layer bias entries feeding log_sigma
  // outputs so an untrained policy starts at a chosen exploration scale.
  static MlpPolicy make(int obs_dim, int action_dim, HeadKind head, int n_components,
                        const std::vector<int>& hidden, bool layer_norm,
                        double log_sigma_bias, Rng& rng, double final_scale = 0.01);

  int obs_dim() const override { return trunk_.input_dim(); }
  int action_dim() const override { return action_dim_; }
  HeadKind head() const { return head_; }
  int n_components() const { return n_components_; }

  DiagGaussianParams emit_gaussian(const Eigen::VectorXd& obs) const;
  GmmParams emit_gmm(const Eigen::VectorXd& obs) const;

  // Head parameters from a raw trunk-output row (used by trainers that run
  // the trunk themselves for gradient access).
  DiagGaussianParams gaussian_from_head(const Eigen::VectorXd& head_out) const;
  GmmParams gmm_from_head(const Eigen::VectorXd& head_out) const;

  double log_prob(const Eigen::VectorXd& obs, const Eigen::VectorXd& action) const override;
  double entropy(const Eigen::VectorXd& obs) const override;
  Eigen::VectorXd sample(const Eigen::VectorXd& obs, Rng& rng, bool use_mode) const override;

  Mlp& trunk() { return trunk_; }
  const Mlp& trunk() const { return trunk_; }
  int head_dim() const;

  nlohmann::json to_json() const;
  static MlpPolicy from_json(const nlohmann::json& j);

 private:
  Mlp trunk_;
  HeadKind head_ = HeadKind::kGaussian;
  int action_dim_ = 0;
  int n_components_ = 1;
};

// Mean negative log-likelihood of `actions` under the policy at `obs`
// (rows are samples). When `grads` is non-null, accumulates dNLL/dparams
// into it (gradients of the batch mean).
double nll_loss_and_grad(const MlpPolicy& policy, const Eigen::MatrixXd& obs,
                         const Eigen::MatrixXd& actions, MlpGrads* grads);

// dNLL/d(head output) for one sample; shared by nll_loss_and_grad and the
// actor update, which needs to splice this into a larger head gradient.
Eigen::VectorXd nll_head_grad(const MlpPolicy& policy, const Eigen::VectorXd& head_out,
                              const Eigen::VectorXd& action, double* nll_out);

void save_policy(const MlpPolicy& policy, const std::string& path);
MlpPolicy load_policy(const std::string& path);

}  // namespace q2rl
