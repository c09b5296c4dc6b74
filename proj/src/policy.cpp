#include "q2rl/policy.hpp"

#include <cmath>
#include <fstream>

namespace q2rl {

namespace {

double clamp_log_sigma(double raw) {
  return std::min(std::max(raw, MlpPolicy::kLogSigmaMin), MlpPolicy::kLogSigmaMax);
}

// 1 where the clamp is inactive (gradient flows), else 0.
double clamp_mask(double raw) {
  return (raw > MlpPolicy::kLogSigmaMin && raw < MlpPolicy::kLogSigmaMax) ? 1.0 : 0.0;
}

}  // namespace

std::string head_name(HeadKind head) {
  return head == HeadKind::kGaussian ? "gaussian" : "gmm";
}

HeadKind head_from_name(const std::string& name) {
  if (name == "gaussian") return HeadKind::kGaussian;
  if (name == "gmm") return HeadKind::kGmm;
  throw InputError("unknown policy head: " + name);
}

MlpPolicy MlpPolicy::make(int obs_dim, int action_dim, HeadKind head, int n_components,
                          const std::vector<int>& hidden, bool layer_norm,
                          double log_sigma_bias, Rng& rng, double final_scale) {
  if (obs_dim <= 0 || action_dim <= 0) throw InputError("MlpPolicy::make: bad dims");
  if (head == HeadKind::kGmm && n_components < 1)
    throw InputError("MlpPolicy::make: gmm needs >= 1 component");

  MlpPolicy p;
  p.head_ = head;
  p.action_dim_ = action_dim;
  p.n_components_ = head == HeadKind::kGaussian ? 1 : n_components;
  std::vector<int> sizes;
  sizes.push_back(obs_dim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(head == HeadKind::kGaussian ? 2 * action_dim
                                              : p.n_components_ * 2 * action_dim + p.n_components_);
  p.trunk_ = Mlp::make(sizes, Activation::kRelu, layer_norm, rng, final_scale);

  // Shift the bias entries feeding log_sigma outputs to the requested start.
  Eigen::VectorXd& bias = p.trunk_.biases().back();
  if (head == HeadKind::kGaussian) {
    for (int j = 0; j < action_dim; ++j) bias[action_dim + j] += log_sigma_bias;
  } else {
    for (int i = 0; i < p.n_components_; ++i)
      for (int j = 0; j < action_dim; ++j) bias[i * 2 * action_dim + action_dim + j] += log_sigma_bias;
  }
  return p;
}

int MlpPolicy::head_dim() const { return trunk_.output_dim(); }

DiagGaussianParams MlpPolicy::gaussian_from_head(const Eigen::VectorXd& head_out) const {
  if (head_ != HeadKind::kGaussian) throw ShapeError("gaussian_from_head on gmm policy");
  DiagGaussianParams p;
  p.mean = head_out.head(action_dim_);
  p.log_sigma = head_out.segment(action_dim_, action_dim_).unaryExpr(&clamp_log_sigma);
  return p;
}

GmmParams MlpPolicy::gmm_from_head(const Eigen::VectorXd& head_out) const {
  if (head_ != HeadKind::kGmm) throw ShapeError("gmm_from_head on gaussian policy");
  GmmParams p;
  const int d = action_dim_;
  const int k = n_components_;
  for (int i = 0; i < k; ++i) {
    DiagGaussianParams c;
    c.mean = head_out.segment(i * 2 * d, d);
    c.log_sigma = head_out.segment(i * 2 * d + d, d).unaryExpr(&clamp_log_sigma);
    p.components.push_back(std::move(c));
  }
  Eigen::VectorXd logits = head_out.segment(k * 2 * d, k);
  const double m = logits.maxCoeff();
  Eigen::VectorXd expd = (logits.array() - m).exp();
  p.weights = expd / expd.sum();
  return p;
}

DiagGaussianParams MlpPolicy::emit_gaussian(const Eigen::VectorXd& obs) const {
  return gaussian_from_head(trunk_.forward_one(obs));
}

GmmParams MlpPolicy::emit_gmm(const Eigen::VectorXd& obs) const {
  return gmm_from_head(trunk_.forward_one(obs));
}

double MlpPolicy::log_prob(const Eigen::VectorXd& obs, const Eigen::VectorXd& action) const {
  if (head_ == HeadKind::kGaussian) return gaussian_log_prob(emit_gaussian(obs), action);
  return gmm_log_prob(emit_gmm(obs), action);
}

double MlpPolicy::entropy(const Eigen::VectorXd& obs) const {
  if (head_ == HeadKind::kGaussian) return gaussian_entropy(emit_gaussian(obs));
  return gmm_entropy_upper(emit_gmm(obs));
}

Eigen::VectorXd MlpPolicy::sample(const Eigen::VectorXd& obs, Rng& rng, bool use_mode) const {
  if (head_ == HeadKind::kGaussian) return gaussian_sample(emit_gaussian(obs), rng, use_mode);
  return gmm_sample(emit_gmm(obs), rng, use_mode);
}

Eigen::VectorXd nll_head_grad(const MlpPolicy& policy, const Eigen::VectorXd& head_out,
                              const Eigen::VectorXd& action, double* nll_out) {
  const int d = policy.action_dim();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(head_out.size());
  if (policy.head() == HeadKind::kGaussian) {
    const DiagGaussianParams p = policy.gaussian_from_head(head_out);
    const double nll = -gaussian_log_prob(p, action);
    const Eigen::ArrayXd sigma = p.log_sigma.array().exp();
    const Eigen::ArrayXd z = (action.array() - p.mean.array()) / sigma;
    grad.head(d) = (-z / sigma).matrix();
    for (int j = 0; j < d; ++j)
      grad[d + j] = (1.0 - z[j] * z[j]) * clamp_mask(head_out[d + j]);
    if (nll_out) *nll_out = nll;
    return grad;
  }

  const GmmParams p = policy.gmm_from_head(head_out);
  const int k = p.n_components();
  Eigen::VectorXd terms(k);
  for (int i = 0; i < k; ++i)
    terms[i] = std::log(p.weights[i]) + gaussian_log_prob(p.components[i], action);
  const double m = terms.maxCoeff();
  const Eigen::ArrayXd shifted = (terms.array() - m).exp();
  const double lse = m + std::log(shifted.sum());
  const Eigen::ArrayXd resp = shifted / shifted.sum();
  for (int i = 0; i < k; ++i) {
    const auto& c = p.components[i];
    const Eigen::ArrayXd sigma = c.log_sigma.array().exp();
    const Eigen::ArrayXd z = (action.array() - c.mean.array()) / sigma;
    grad.segment(i * 2 * d, d) = (-resp[i] * z / sigma).matrix();
    for (int j = 0; j < d; ++j)
      grad[i * 2 * d + d + j] =
          -resp[i] * (z[j] * z[j] - 1.0) * clamp_mask(head_out[i * 2 * d + d + j]);
    grad[k * 2 * d + i] = p.weights[i] - resp[i];
  }
  if (nll_out) *nll_out = -lse;
  return grad;
}

double nll_loss_and_grad(const MlpPolicy& policy, const Eigen::MatrixXd& obs,
                         const Eigen::MatrixXd& actions, MlpGrads* grads) {
  if (obs.rows() != actions.rows()) throw ShapeError("nll_loss_and_grad: batch mismatch");
  if (obs.rows() == 0) throw InputError("nll_loss_and_grad: empty batch");
  const int b = static_cast<int>(obs.rows());

  if (!grads) {
    double total = 0.0;
    const Eigen::MatrixXd head = policy.trunk().forward(obs);
    for (int r = 0; r < b; ++r) {
      const Eigen::VectorXd h = head.row(r).transpose();
      const Eigen::VectorXd a = actions.row(r).transpose();
      if (policy.head() == HeadKind::kGaussian)
        total -= gaussian_log_prob(policy.gaussian_from_head(h), a);
      else
        total -= gmm_log_prob(policy.gmm_from_head(h), a);
    }
    return total / b;
  }

  ForwardCache cache;
  const Eigen::MatrixXd head = policy.trunk().forward_cached(obs, cache);
  Eigen::MatrixXd d_head(b, head.cols());
  double total = 0.0;
  for (int r = 0; r < b; ++r) {
    double nll = 0.0;
    d_head.row(r) = nll_head_grad(policy, head.row(r).transpose(), actions.row(r).transpose(), &nll)
                        .transpose();
    total += nll;
  }
  d_head /= static_cast<double>(b);
  BackwardResult back = policy.trunk().backward(cache, d_head);
  grads->add(back.grads);
  return total / b;
}

nlohmann::json MlpPolicy::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["head"] = head_name(head_);
  j["action_dim"] = action_dim_;
  j["n_components"] = n_components_;
  j["trunk"] = trunk_.to_json();
  return j;
}

MlpPolicy MlpPolicy::from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1)
    throw InputError("MlpPolicy::from_json: unsupported format_version");
  MlpPolicy p;
  p.head_ = head_from_name(j.at("head").get<std::string>());
  p.action_dim_ = j.at("action_dim").get<int>();
  p.n_components_ = j.at("n_components").get<int>();
  p.trunk_ = Mlp::from_json(j.at("trunk"));
  const int expected = p.head_ == HeadKind::kGaussian
                           ? 2 * p.action_dim_
                           : p.n_components_ * 2 * p.action_dim_ + p.n_components_;
  if (p.trunk_.output_dim() != expected)
    throw InputError("MlpPolicy::from_json: trunk output does not match head");
  return p;
}

void save_policy(const MlpPolicy& policy, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("save_policy: cannot write " + path);
  out << policy.to_json().dump(2) << "\n";
}

MlpPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("load_policy: cannot read " + path);
  nlohmann::json j;
  in >> j;
  return MlpPolicy::from_json(j);
}

}  // namespace q2rl
