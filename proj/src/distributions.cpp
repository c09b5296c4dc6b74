#include "q2rl/distributions.hpp"

#include <cmath>
#include <limits>

namespace q2rl {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kSimplexTol = 1e-9;

}  // namespace

void validate(const DiagGaussianParams& p) {
  if (p.mean.size() == 0) throw ShapeError("DiagGaussianParams: empty mean");
  if (p.mean.size() != p.log_sigma.size())
    throw ShapeError("DiagGaussianParams: mean/log_sigma size mismatch");
  if (!p.mean.allFinite() || !p.log_sigma.allFinite())
    throw NumericError("DiagGaussianParams: non-finite parameters");
}

void validate(const GmmParams& p) {
  if (p.components.empty()) throw ShapeError("GmmParams: no components");
  if (p.weights.size() != p.n_components())
    throw ShapeError("GmmParams: weights/components size mismatch");
  const int dim = p.components.front().dim();
  for (const auto& c : p.components) {
    validate(c);
    if (c.dim() != dim) throw ShapeError("GmmParams: components disagree on dimension");
  }
  if (!p.weights.allFinite()) throw NumericError("GmmParams: non-finite weights");
  if ((p.weights.array() < 0.0).any())
    throw InputError("GmmParams: negative mixture weight");
  if (std::abs(p.weights.sum() - 1.0) > kSimplexTol)
    throw InputError("GmmParams: weights must sum to 1");
}

double gaussian_log_prob(const DiagGaussianParams& p, const Eigen::VectorXd& action) {
  if (action.size() != p.mean.size())
    throw ShapeError("gaussian_log_prob: action dimension mismatch");
  const Eigen::ArrayXd sigma = p.log_sigma.array().exp();
  const Eigen::ArrayXd z = (action.array() - p.mean.array()) / sigma;
  return -0.5 * (z.square() + 2.0 * p.log_sigma.array() + kLog2Pi).sum();
}

double gaussian_entropy(const DiagGaussianParams& p) {
  return (0.5 * (1.0 + kLog2Pi) + p.log_sigma.array()).sum();
}

Eigen::VectorXd gaussian_sample(const DiagGaussianParams& p, Rng& rng, bool use_mode) {
  if (use_mode) return p.mean;
  const Eigen::VectorXd eps = rng.normal_vector(p.dim());
  return p.mean.array() + p.log_sigma.array().exp() * eps.array();
}

double gmm_log_prob(const GmmParams& p, const Eigen::VectorXd& action) {
  const int k = p.n_components();
  Eigen::VectorXd terms(k);
  for (int i = 0; i < k; ++i) {
    terms[i] = p.weights[i] > 0.0
                   ? std::log(p.weights[i]) + gaussian_log_prob(p.components[i], action)
                   : -std::numeric_limits<double>::infinity();
  }
  const double m = terms.maxCoeff();
  if (!std::isfinite(m)) return m;  // all weights zero cannot happen on a simplex
  double s = 0.0;
  for (int i = 0; i < k; ++i)
    if (std::isfinite(terms[i])) s += std::exp(terms[i] - m);
  return m + std::log(s);
}

double gmm_entropy_upper(const GmmParams& p) {
  double h = 0.0;
  for (int i = 0; i < p.n_components(); ++i) {
    const double w = p.weights[i];
    if (w <= 0.0) continue;  // 0 * log 0 := 0
    h += w * gaussian_entropy(p.components[i]) - w * std::log(w);
  }
  return h;
}

Eigen::VectorXd gmm_sample(const GmmParams& p, Rng& rng, bool use_mode) {
  if (use_mode) {
    int best = 0;
    for (int i = 1; i < p.n_components(); ++i)
      if (p.weights[i] > p.weights[best]) best = i;
    return p.components[best].mean;
  }
  const double u = rng.uniform();
  double cum = 0.0;
  int pick = p.n_components() - 1;
  for (int i = 0; i < p.n_components(); ++i) {
    cum += p.weights[i];
    if (u < cum) {
      pick = i;
      break;
    }
  }
  return gaussian_sample(p.components[pick], rng, false);
}

}  // namespace q2rl
