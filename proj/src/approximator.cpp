#include "q2rl/approximator.hpp"

#include <cmath>

namespace q2rl {

namespace {

constexpr double kLnEps = 1e-5;

void check_same_size(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": size mismatch (" + std::to_string(a) +
                     " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

std::string activation_name(Activation act) {
  return act == Activation::kRelu ? "relu" : "tanh";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw InputError("unknown activation: " + name);
}

void MlpGrads::scale(double s) {
  for (auto& w : d_weights) w *= s;
  for (auto& b : d_biases) b *= s;
  for (auto& g : d_ln_gain) g *= s;
  for (auto& b : d_ln_bias) b *= s;
}

void MlpGrads::add(const MlpGrads& other) {
  if (d_weights.size() != other.d_weights.size())
    throw ShapeError("MlpGrads::add: layer count mismatch");
  for (size_t l = 0; l < d_weights.size(); ++l) {
    d_weights[l] += other.d_weights[l];
    d_biases[l] += other.d_biases[l];
  }
  for (size_t l = 0; l < d_ln_gain.size(); ++l) {
    d_ln_gain[l] += other.d_ln_gain[l];
    d_ln_bias[l] += other.d_ln_bias[l];
  }
}

Mlp Mlp::make(const std::vector<int>& layer_sizes, Activation act,
              bool layer_norm, Rng& rng, double final_scale) {
  if (layer_sizes.size() < 2) throw InputError("Mlp::make: need at least input and output sizes");
  for (int s : layer_sizes)
    if (s <= 0) throw InputError("Mlp::make: layer sizes must be positive");

  Mlp net;
  net.layer_sizes_ = layer_sizes;
  net.activation_ = act;
  net.layer_norm_ = layer_norm;
  const int n_layers = static_cast<int>(layer_sizes.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    const int in = layer_sizes[l];
    const int out = layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = rng.uniform(-bound, bound);
    Eigen::VectorXd b(out);
    for (int r = 0; r < out; ++r) b[r] = rng.uniform(-bound, bound);
    if (l == n_layers - 1) {
      w *= final_scale;
      b *= final_scale;
    }
    net.weights_.push_back(std::move(w));
    net.biases_.push_back(std::move(b));
    if (layer_norm && l < n_layers - 1) {
      net.ln_gains_.push_back(Eigen::VectorXd::Ones(out));
      net.ln_biases_.push_back(Eigen::VectorXd::Zero(out));
    }
  }
  return net;
}

bool Mlp::same_architecture(const Mlp& other) const {
  return layer_sizes_ == other.layer_sizes_ && activation_ == other.activation_ &&
         layer_norm_ == other.layer_norm_;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  ForwardCache cache;
  return forward_cached(x, cache);
}

Eigen::VectorXd Mlp::forward_one(const Eigen::VectorXd& x) const {
  return forward(x.transpose()).row(0).transpose();
}

Eigen::MatrixXd Mlp::forward_cached(const Eigen::MatrixXd& x, ForwardCache& cache) const {
  check_same_size(x.cols(), input_dim(), "Mlp::forward input dim");
  const int n_layers = this->n_layers();
  cache.inputs.assign(1, x);
  cache.normed.clear();
  cache.inv_std.clear();

  Eigen::MatrixXd cur = x;
  for (int l = 0; l < n_layers; ++l) {
    Eigen::MatrixXd z = cur * weights_[l].transpose();
    z.rowwise() += biases_[l].transpose();
    if (l == n_layers - 1) {
      cache.output = std::move(z);
      return cache.output;
    }
    if (layer_norm_) {
      Eigen::VectorXd mean = z.rowwise().mean();
      Eigen::MatrixXd centered = z.colwise() - mean;
      Eigen::VectorXd var = centered.array().square().rowwise().mean().matrix();
      Eigen::VectorXd inv_std = (var.array() + kLnEps).sqrt().inverse().matrix();
      Eigen::MatrixXd y = (centered.array().colwise() * inv_std.array()).matrix();
      cache.normed.push_back(y);
      cache.inv_std.push_back(std::move(inv_std));
      z = (y.array().rowwise() * ln_gains_[l].transpose().array()).matrix();
      z.rowwise() += ln_biases_[l].transpose();
    }
    if (activation_ == Activation::kRelu)
      cur = z.cwiseMax(0.0);
    else
      cur = z.array().tanh().matrix();
    cache.inputs.push_back(cur);
  }
  throw NumericError("Mlp::forward_cached: unreachable");
}

BackwardResult Mlp::backward(const ForwardCache& cache, const Eigen::MatrixXd& d_output) const {
  const int n_layers = this->n_layers();
  if (static_cast<int>(cache.inputs.size()) != n_layers)
    throw ShapeError("Mlp::backward: cache does not match network depth");
  check_same_size(d_output.rows(), cache.output.rows(), "Mlp::backward batch");
  check_same_size(d_output.cols(), output_dim(), "Mlp::backward output dim");

  BackwardResult out;
  out.grads = zero_grads();
  Eigen::MatrixXd d = d_output;  // grad wrt current layer's post-everything output
  for (int l = n_layers - 1; l >= 0; --l) {
    if (l < n_layers - 1) {
      // d arrives wrt activation output a = act(h).
      const Eigen::MatrixXd& a = cache.inputs[l + 1];
      Eigen::MatrixXd dh;
      if (activation_ == Activation::kRelu)
        dh = ((a.array() > 0.0).cast<double>() * d.array()).matrix();
      else
        dh = ((1.0 - a.array().square()) * d.array()).matrix();
      if (layer_norm_) {
        const Eigen::MatrixXd& y = cache.normed[l];
        out.grads.d_ln_gain[l] += (dh.array() * y.array()).colwise().sum().matrix().transpose();
        out.grads.d_ln_bias[l] += dh.colwise().sum().transpose();
        Eigen::MatrixXd dy = (dh.array().rowwise() * ln_gains_[l].transpose().array()).matrix();
        Eigen::VectorXd mean_dy = dy.rowwise().mean();
        Eigen::VectorXd mean_dyy = (dy.array() * y.array()).rowwise().mean().matrix();
        Eigen::MatrixXd dz = dy;
        dz.colwise() -= mean_dy;
        dz.array() -= y.array().colwise() * mean_dyy.array();
        dh = (dz.array().colwise() * cache.inv_std[l].array()).matrix();
      }
      d = std::move(dh);
    }
    const Eigen::MatrixXd& x = cache.inputs[l];
    out.grads.d_weights[l] += d.transpose() * x;
    out.grads.d_biases[l] += d.colwise().sum().transpose();
    d = d * weights_[l];
  }
  out.d_input = std::move(d);
  return out;
}

int Mlp::param_count() const {
  int n = 0;
  for (const auto& w : weights_) n += static_cast<int>(w.size());
  for (const auto& b : biases_) n += static_cast<int>(b.size());
  for (const auto& g : ln_gains_) n += static_cast<int>(g.size());
  for (const auto& b : ln_biases_) n += static_cast<int>(b.size());
  return n;
}

Eigen::VectorXd Mlp::flatten() const {
  Eigen::VectorXd flat(param_count());
  Eigen::Index pos = 0;
  for (int l = 0; l < n_layers(); ++l) {
    flat.segment(pos, weights_[l].size()) =
        Eigen::Map<const Eigen::VectorXd>(weights_[l].data(), weights_[l].size());
    pos += weights_[l].size();
    flat.segment(pos, biases_[l].size()) = biases_[l];
    pos += biases_[l].size();
    if (layer_norm_ && l < n_layers() - 1) {
      flat.segment(pos, ln_gains_[l].size()) = ln_gains_[l];
      pos += ln_gains_[l].size();
      flat.segment(pos, ln_biases_[l].size()) = ln_biases_[l];
      pos += ln_biases_[l].size();
    }
  }
  return flat;
}

void Mlp::set_flat(const Eigen::VectorXd& flat) {
  check_same_size(flat.size(), param_count(), "Mlp::set_flat");
  Eigen::Index pos = 0;
  for (int l = 0; l < n_layers(); ++l) {
    Eigen::Map<Eigen::VectorXd>(weights_[l].data(), weights_[l].size()) =
        flat.segment(pos, weights_[l].size());
    pos += weights_[l].size();
    biases_[l] = flat.segment(pos, biases_[l].size());
    pos += biases_[l].size();
    if (layer_norm_ && l < n_layers() - 1) {
      ln_gains_[l] = flat.segment(pos, ln_gains_[l].size());
      pos += ln_gains_[l].size();
      ln_biases_[l] = flat.segment(pos, ln_biases_[l].size());
      pos += ln_biases_[l].size();
    }
  }
}

Eigen::VectorXd Mlp::flatten_grads(const MlpGrads& grads) const {
  Eigen::VectorXd flat(param_count());
  Eigen::Index pos = 0;
  for (int l = 0; l < n_layers(); ++l) {
    flat.segment(pos, grads.d_weights[l].size()) = Eigen::Map<const Eigen::VectorXd>(
        grads.d_weights[l].data(), grads.d_weights[l].size());
    pos += grads.d_weights[l].size();
    flat.segment(pos, grads.d_biases[l].size()) = grads.d_biases[l];
    pos += grads.d_biases[l].size();
    if (layer_norm_ && l < n_layers() - 1) {
      flat.segment(pos, grads.d_ln_gain[l].size()) = grads.d_ln_gain[l];
      pos += grads.d_ln_gain[l].size();
      flat.segment(pos, grads.d_ln_bias[l].size()) = grads.d_ln_bias[l];
      pos += grads.d_ln_bias[l].size();
    }
  }
  return flat;
}

MlpGrads Mlp::zero_grads() const {
  MlpGrads g;
  for (int l = 0; l < n_layers(); ++l) {
    g.d_weights.push_back(Eigen::MatrixXd::Zero(weights_[l].rows(), weights_[l].cols()));
    g.d_biases.push_back(Eigen::VectorXd::Zero(biases_[l].size()));
    if (layer_norm_ && l < n_layers() - 1) {
      g.d_ln_gain.push_back(Eigen::VectorXd::Zero(ln_gains_[l].size()));
      g.d_ln_bias.push_back(Eigen::VectorXd::Zero(ln_biases_[l].size()));
    }
  }
  return g;
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["layer_sizes"] = layer_sizes_;
  j["activation"] = activation_name(activation_);
  j["layer_norm"] = layer_norm_;
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < n_layers(); ++l) {
    nlohmann::json jl;
    jl["w"] = std::vector<double>(weights_[l].data(), weights_[l].data() + weights_[l].size());
    jl["b"] = std::vector<double>(biases_[l].data(), biases_[l].data() + biases_[l].size());
    if (layer_norm_ && l < n_layers() - 1) {
      jl["ln_gain"] = std::vector<double>(ln_gains_[l].data(),
                                          ln_gains_[l].data() + ln_gains_[l].size());
      jl["ln_bias"] = std::vector<double>(ln_biases_[l].data(),
                                          ln_biases_[l].data() + ln_biases_[l].size());
    }
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);
  return j;
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1)
    throw InputError("Mlp::from_json: unsupported format_version");
  Mlp net;
  net.layer_sizes_ = j.at("layer_sizes").get<std::vector<int>>();
  net.activation_ = activation_from_name(j.at("activation").get<std::string>());
  net.layer_norm_ = j.at("layer_norm").get<bool>();
  if (net.layer_sizes_.size() < 2) throw InputError("Mlp::from_json: bad layer_sizes");
  const int n_layers = static_cast<int>(net.layer_sizes_.size()) - 1;
  const auto& layers = j.at("layers");
  if (static_cast<int>(layers.size()) != n_layers)
    throw InputError("Mlp::from_json: layer count mismatch");
  for (int l = 0; l < n_layers; ++l) {
    const int in = net.layer_sizes_[l];
    const int out = net.layer_sizes_[l + 1];
    auto w = layers[l].at("w").get<std::vector<double>>();
    auto b = layers[l].at("b").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != in * out || static_cast<int>(b.size()) != out)
      throw InputError("Mlp::from_json: parameter size mismatch");
    net.weights_.push_back(Eigen::Map<const Eigen::MatrixXd>(w.data(), out, in));
    net.biases_.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), out));
    if (net.layer_norm_ && l < n_layers - 1) {
      auto g = layers[l].at("ln_gain").get<std::vector<double>>();
      auto lb = layers[l].at("ln_bias").get<std::vector<double>>();
      if (static_cast<int>(g.size()) != out || static_cast<int>(lb.size()) != out)
        throw InputError("Mlp::from_json: layer norm size mismatch");
      net.ln_gains_.push_back(Eigen::Map<const Eigen::VectorXd>(g.data(), out));
      net.ln_biases_.push_back(Eigen::Map<const Eigen::VectorXd>(lb.data(), out));
    }
  }
  return net;
}

void soft_update(Mlp& target, const Mlp& online, double tau) {
  if (!target.same_architecture(online))
    throw ShapeError("soft_update: architecture mismatch");
  if (tau < 0.0 || tau > 1.0) throw InputError("soft_update: tau must be in [0, 1]");
  for (int l = 0; l < target.n_layers(); ++l) {
    target.weights()[l] = (1.0 - tau) * target.weights()[l] + tau * online.weights()[l];
    target.biases()[l] = (1.0 - tau) * target.biases()[l] + tau * online.biases()[l];
  }
  for (size_t l = 0; l < target.ln_gains().size(); ++l) {
    target.ln_gains()[l] = (1.0 - tau) * target.ln_gains()[l] + tau * online.ln_gains()[l];
    target.ln_biases()[l] = (1.0 - tau) * target.ln_biases()[l] + tau * online.ln_biases()[l];
  }
}

OptimizerState make_optimizer_state(int param_count) {
  if (param_count <= 0) throw InputError("make_optimizer_state: param_count must be positive");
  OptimizerState s;
  s.m = Eigen::VectorXd::Zero(param_count);
  s.v = Eigen::VectorXd::Zero(param_count);
  s.t = 0;
  return s;
}

void optimizer_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                    OptimizerState& state, const AdamConfig& cfg) {
  check_same_size(params.size(), grads.size(), "optimizer_step params/grads");
  check_same_size(params.size(), state.m.size(), "optimizer_step params/state");
  state.t += 1;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Eigen::VectorXd m_hat = state.m / bc1;
  const Eigen::VectorXd v_hat = state.v / bc2;
  params.array() -= cfg.lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps);
}

void apply_gradients(Mlp& net, const MlpGrads& grads, OptimizerState& state,
                     const AdamConfig& cfg) {
  Eigen::VectorXd params = net.flatten();
  const Eigen::VectorXd flat_grads = net.flatten_grads(grads);
  if (!flat_grads.allFinite()) throw NumericError("apply_gradients: non-finite gradient");
  optimizer_step(params, flat_grads, state, cfg);
  net.set_flat(params);
}

double mse_loss_and_grad(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         MlpGrads* grads) {
  if (net.output_dim() != 1) throw ShapeError("mse_loss_and_grad: net output must be scalar");
  if (x.rows() != y.size()) throw ShapeError("mse_loss_and_grad: batch size mismatch");
  if (x.rows() < 1) throw InputError("mse_loss_and_grad: empty batch");
  const double b = static_cast<double>(x.rows());
  if (!grads) {
    return (net.forward(x).col(0) - y).squaredNorm() / b;
  }
  ForwardCache cache;
  const Eigen::VectorXd diff = net.forward_cached(x, cache).col(0) - y;
  const Eigen::MatrixXd d_out = (2.0 / b) * diff;
  grads->add(net.backward(cache, d_out).grads);
  return diff.squaredNorm() / b;
}

}  // namespace q2rl
