#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "json.hpp"

#include "q2rl/errors.hpp"
#include "q2rl/rng.hpp"

namespace q2rl {

enum class Activation { kRelu, kTanh };

std::string activation_name(Activation act);
Activation activation_from_name(const std::string& name);

// Per-sample intermediate values kept by forward_cached for the backward pass.
// inputs[l] is the batch fed into linear layer l; output is the network output.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> normed;    // per hidden layer, normalized pre-gain
  std::vector<Eigen::VectorXd> inv_std;   // per hidden layer, one entry per row
  Eigen::MatrixXd output;
};

struct MlpGrads {
  std::vector<Eigen::MatrixXd> d_weights;
  std::vector<Eigen::VectorXd> d_biases;
  std::vector<Eigen::VectorXd> d_ln_gain;
  std::vector<Eigen::VectorXd> d_ln_bias;

  void scale(double s);
  void add(const MlpGrads& other);
};

struct BackwardResult {
  MlpGrads grads;
  Eigen::MatrixXd d_input;  // same shape as the batch fed to forward_cached
};

// Fully connected network: linear layers with an elementwise activation on
// every hidden layer and a raw linear output. Optional layer normalization
// sits between each hidden linear map and its activation. A zero-hidden-layer
// network is a single linear map.
class Mlp {
 public:
  Mlp() = default;

  // layer_sizes = {input, hidden..., output}. Weights and biases start
  // uniform in +-1/sqrt(fan_in); the final layer is scaled by final_scale.
  static Mlp make(const std::vector<int>& layer_sizes, Activation act,
                  bool layer_norm, Rng& rng, double final_scale = 1.0);

  int input_dim() const { return layer_sizes_.front(); }
  int output_dim() const { return layer_sizes_.back(); }
  int n_layers() const { return static_cast<int>(weights_.size()); }
  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  Activation activation() const { return activation_; }
  bool layer_norm() const { return layer_norm_; }
  bool same_architecture(const Mlp& other) const;

  // Batched forward; rows are samples.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd forward_one(const Eigen::VectorXd& x) const;

  Eigen::MatrixXd forward_cached(const Eigen::MatrixXd& x, ForwardCache& cache) const;

  // Backprop of d_output (dL/d output, same shape as cache.output) through the
  // cached forward pass. Gradients are sums over the batch rows.
  BackwardResult backward(const ForwardCache& cache, const Eigen::MatrixXd& d_output) const;

  int param_count() const;
  Eigen::VectorXd flatten() const;
  void set_flat(const Eigen::VectorXd& flat);
  Eigen::VectorXd flatten_grads(const MlpGrads& grads) const;
  MlpGrads zero_grads() const;

  std::vector<Eigen::MatrixXd>& weights() { return weights_; }
  const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
  std::vector<Eigen::VectorXd>& biases() { return biases_; }
  const std::vector<Eigen::VectorXd>& biases() const { return biases_; }
  std::vector<Eigen::VectorXd>& ln_gains() { return ln_gains_; }
  const std::vector<Eigen::VectorXd>& ln_gains() const { return ln_gains_; }
  std::vector<Eigen::VectorXd>& ln_biases() { return ln_biases_; }
  const std::vector<Eigen::VectorXd>& ln_biases() const { return ln_biases_; }

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  std::vector<int> layer_sizes_;
  Activation activation_ = Activation::kRelu;
  bool layer_norm_ = false;
  std::vector<Eigen::MatrixXd> weights_;   // (out x in) per layer
  std::vector<Eigen::VectorXd> biases_;    // (out) per layer
  std::vector<Eigen::VectorXd> ln_gains_;  // per hidden layer when layer_norm_
  std::vector<Eigen::VectorXd> ln_biases_;
};

// target <- (1 - tau) * target + tau * online, elementwise over all params.
void soft_update(Mlp& target, const Mlp& online, double tau);

// Mean squared error of a scalar-output net against y over the batch rows;
// accumulates d(mse)/d(params) into grads when non-null. The regression core
// shared by critic updates, value fitting, and critic warm starts.
double mse_loss_and_grad(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         MlpGrads* grads);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;
};

OptimizerState make_optimizer_state(int param_count);

// One Adam step with bias correction; mutates params and state in place.
void optimizer_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                    OptimizerState& state, const AdamConfig& cfg);

// Flattens grads, steps, and writes the updated params back into the net.
void apply_gradients(Mlp& net, const MlpGrads& grads, OptimizerState& state,
                     const AdamConfig& cfg);

}  // namespace q2rl
