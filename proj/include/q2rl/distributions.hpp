#pragma once

#include <Eigen/Dense>
#include <vector>

#include "q2rl/errors.hpp"
#include "q2rl/rng.hpp"

namespace q2rl {

// Diagonal Gaussian over actions; sigma is stored as log_sigma.
struct DiagGaussianParams {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_sigma;

  int dim() const { return static_cast<int>(mean.size()); }
};

// Mixture of diagonal Gaussians; weights lie on the probability simplex.
struct GmmParams {
  std::vector<DiagGaussianParams> components;
  Eigen::VectorXd weights;

  int n_components() const { return static_cast<int>(components.size()); }
  int dim() const { return components.empty() ? 0 : components.front().dim(); }
};

void validate(const DiagGaussianParams& p);
void validate(const GmmParams& p);

double gaussian_log_prob(const DiagGaussianParams& p, const Eigen::VectorXd& action);

// Exact differential entropy: sum_i (0.5 * (1 + log 2*pi) + log_sigma_i).
double gaussian_entropy(const DiagGaussianParams& p);

Eigen::VectorXd gaussian_sample(const DiagGaussianParams& p, Rng& rng, bool use_mode);

// log sum_i w_i N(a; mu_i, sigma_i), computed with a max-shifted log-sum-exp.
double gmm_log_prob(const GmmParams& p, const Eigen::VectorXd& action);

// Upper bound on the mixture entropy: sum_i w_i * H(component_i) plus the
// entropy of the categorical weight distribution. Exact when the components
// do not overlap; never below the true entropy.
double gmm_entropy_upper(const GmmParams& p);

// Mode draw picks the mean of the highest-weight component (lowest index on
// ties); stochastic draws pick a component by weight, then sample from it.
Eigen::VectorXd gmm_sample(const GmmParams& p, Rng& rng, bool use_mode);

}  // namespace q2rl
