#include <cmath>
#include <limits>

#include "doctest.h"
#include "q2rl/sac.hpp"
#include "test_support.hpp"

using namespace q2rl;

namespace {

// Linear critics with hand-set parameters: Q_i(s, a) = w_i . [s, a] + b_i.
CriticEnsemble linear_critics(const std::vector<Eigen::VectorXd>& w, const std::vector<double>& b,
                              int obs_dim, int action_dim) {
  Rng rng(0);
  CriticEnsemble ens = CriticEnsemble::make(obs_dim, action_dim, static_cast<int>(w.size()), {},
                                            false, rng);
  for (size_t i = 0; i < w.size(); ++i) {
    ens.members()[i].weights()[0] = w[i].transpose();
    ens.members()[i].biases()[0][0] = b[i];
  }
  ens.sync_targets();
  return ens;
}

TransitionBatch batch_of(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                         const Eigen::VectorXd& r, const Eigen::MatrixXd& s_next,
                         const Eigen::VectorXd& terminal) {
  TransitionBatch batch;
  batch.s = s;
  batch.a = a;
  batch.r = r;
  batch.s_next = s_next;
  batch.terminal = terminal;
  batch.source.assign(s.rows(), ActionSource::kRl);
  return batch;
}

TransitionBatch random_batch(int n, int obs_dim, int action_dim, Rng& rng) {
  TransitionBatch batch = batch_of(rng.normal_matrix(n, obs_dim), rng.normal_matrix(n, action_dim),
                                   rng.normal_vector(n), rng.normal_matrix(n, obs_dim),
                                   Eigen::VectorXd::Zero(n));
  for (int i = 0; i < n; ++i)
    if (rng.uniform() < 0.2) batch.terminal[i] = 1.0;
  return batch;
}

}  // namespace

TEST_CASE("reward shaping is the stated affine map") {
  CHECK(shape_reward(RewardShaper{5.0, -1.0}, 1.0) == 4.0);
  CHECK(shape_reward(RewardShaper{5.0, -1.0}, 0.0) == -1.0);
  CHECK(shape_reward(RewardShaper{3.0, 0.25}, 0.0) == 0.25);
  CHECK(shape_reward(RewardShaper{}, 0.7) == 0.7);  // identity by default
}

TEST_CASE("soft td targets match a hand computation on frozen linear nets") {
  const int d_s = 2, d_a = 1;
  Eigen::VectorXd w0(3), w1(3);
  w0 << 1.0, -0.5, 2.0;
  w1 << 0.3, 0.8, -1.0;
  CriticEnsemble ens = linear_critics({w0, w1}, {0.1, -0.2}, d_s, d_a);

  Eigen::MatrixXd mu_w(1, 2);
  mu_w << 0.4, -0.3;
  Eigen::VectorXd mu_b(1), ls(1);
  mu_b << 0.05;
  ls << -0.7;
  const MlpPolicy actor = testutil::linear_gaussian_policy(mu_w, mu_b, ls);

  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(3, d_s);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, d_a);
  Eigen::MatrixXd s_next(3, d_s);
  s_next << 0.2, 0.6, -0.4, 0.1, 0.9, -0.8;
  Eigen::VectorXd r(3), terminal(3);
  r << 1.0, 2.0, 3.0;
  terminal << 0.0, 1.0, 0.0;  // row 1 terminal; a truncated row would carry 0 and bootstrap
  const TransitionBatch batch = batch_of(s, a, r, s_next, terminal);

  Eigen::MatrixXd eps(3, 1);
  eps << 0.3, -1.2, 0.8;
  const double gamma = 0.9, coef = 0.25;
  const Eigen::VectorXd y =
      critic_targets_given(batch, ens, actor, coef, gamma, {0, 1}, eps);

  for (int i = 0; i < 3; ++i) {
    const double mu = mu_w(0, 0) * s_next(i, 0) + mu_w(0, 1) * s_next(i, 1) + mu_b[0];
    const double sigma = std::exp(ls[0]);
    const double a_next = mu + sigma * eps(i, 0);
    const double log_pi =
        -0.5 * (eps(i, 0) * eps(i, 0) + 2.0 * ls[0] + std::log(2.0 * M_PI));
    const double q0 = w0[0] * s_next(i, 0) + w0[1] * s_next(i, 1) + w0[2] * a_next + 0.1;
    const double q1 = w1[0] * s_next(i, 0) + w1[1] * s_next(i, 1) + w1[2] * a_next - 0.2;
    const double expect =
        r[i] + gamma * (1.0 - terminal[i]) * (std::min(q0, q1) - coef * log_pi);
    CHECK(y[i] == doctest::Approx(expect).epsilon(1e-12));
  }

  // A singleton subset skips the min entirely.
  const Eigen::VectorXd y1 = critic_targets_given(batch, ens, actor, coef, gamma, {1}, eps);
  const double mu0 = mu_w(0, 0) * s_next(0, 0) + mu_w(0, 1) * s_next(0, 1) + mu_b[0];
  const double a0 = mu0 + std::exp(ls[0]) * eps(0, 0);
  const double lp0 = -0.5 * (0.09 + 2.0 * ls[0] + std::log(2.0 * M_PI));
  const double q1_only = w1[0] * s_next(0, 0) + w1[1] * s_next(0, 1) + w1[2] * a0 - 0.2;
  CHECK(y1[0] == doctest::Approx(r[0] + gamma * (q1_only - coef * lp0)).epsilon(1e-12));

  // Terminal rows never bootstrap; gamma = 0 strips everything but the reward.
  CHECK(y[1] == doctest::Approx(2.0).epsilon(1e-15));
  const Eigen::VectorXd y_g0 = critic_targets_given(batch, ens, actor, coef, 0.0, {0, 1}, eps);
  for (int i = 0; i < 3; ++i) CHECK(y_g0[i] == doctest::Approx(r[i]).epsilon(1e-15));
}

TEST_CASE("td targets use the target copies, not the online members") {
  Eigen::VectorXd w(3);
  w << 0.0, 0.0, 0.0;
  CriticEnsemble ens = linear_critics({w}, {1.0}, 2, 1);
  // Move the online member away; the frozen target should still answer.
  ens.members()[0].biases()[0][0] = 500.0;
  const MlpPolicy actor = testutil::linear_gaussian_policy(Eigen::MatrixXd::Zero(1, 2),
                                                           Eigen::VectorXd::Zero(1),
                                                           Eigen::VectorXd::Zero(1));
  const TransitionBatch batch =
      batch_of(Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Zero(1, 1),
               Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Zero(1, 2), Eigen::VectorXd::Zero(1));
  const Eigen::VectorXd y = critic_targets_given(batch, ens, actor, 0.0, 1.0,
                                                 {0}, Eigen::MatrixXd::Zero(1, 1));
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("td targets are computed row by row, so batch order cannot matter") {
  Rng rng(71);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 3, {8}, true, rng);
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {8}, false, -1.0, rng);
  const TransitionBatch batch = random_batch(6, 3, 2, rng);
  const Eigen::MatrixXd eps = rng.normal_matrix(6, 2);
  const Eigen::VectorXd y = critic_targets_given(batch, ens, actor, 0.2, 0.99, {0, 2}, eps);

  const std::vector<int> perm = {4, 0, 5, 2, 1, 3};
  TransitionBatch shuffled = batch;
  Eigen::MatrixXd eps_shuffled(6, 2);
  for (int i = 0; i < 6; ++i) {
    shuffled.s.row(i) = batch.s.row(perm[i]);
    shuffled.a.row(i) = batch.a.row(perm[i]);
    shuffled.r[i] = batch.r[perm[i]];
    shuffled.s_next.row(i) = batch.s_next.row(perm[i]);
    shuffled.terminal[i] = batch.terminal[perm[i]];
    eps_shuffled.row(i) = eps.row(perm[i]);
  }
  const Eigen::VectorXd y_shuffled =
      critic_targets_given(shuffled, ens, actor, 0.2, 0.99, {0, 2}, eps_shuffled);
  for (int i = 0; i < 6; ++i) CHECK(y_shuffled[i] == y[perm[i]]);
}

TEST_CASE("the sampling form draws a member subset first, then the noise") {
  Rng rng(72);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 4, {8}, false, rng);
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {8}, false, -1.0, rng);
  const TransitionBatch batch = random_batch(5, 3, 2, rng);
  RLConfig cfg;
  cfg.subsample = 2;
  cfg.ensemble_size = 4;
  cfg.gamma = 0.95;

  Rng draw(73), replay_draw(73);
  const Eigen::VectorXd y = critic_targets(batch, ens, actor, 0.1, cfg, draw);
  const std::vector<int> subset = replay_draw.distinct_indices(2, 4);
  const Eigen::MatrixXd eps = replay_draw.normal_matrix(5, 2);
  const Eigen::VectorXd y2 = critic_targets_given(batch, ens, actor, 0.1, 0.95, subset, eps);
  CHECK((y - y2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("td target construction guards its inputs") {
  Rng rng(74);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {}, false, rng);
  const MlpPolicy gaussian = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, 0.0, rng);
  const MlpPolicy gmm = MlpPolicy::make(3, 2, HeadKind::kGmm, 2, {}, false, 0.0, rng);
  const TransitionBatch batch = random_batch(4, 3, 2, rng);
  const Eigen::MatrixXd eps = rng.normal_matrix(4, 2);
  CHECK_THROWS_AS(critic_targets_given(batch, ens, gmm, 0.1, 0.99, {0}, eps), InputError);
  CHECK_THROWS_AS(critic_targets_given(batch, ens, gaussian, 0.1, 0.99, {}, eps), InputError);
  CHECK_THROWS_AS(
      critic_targets_given(batch, ens, gaussian, 0.1, 0.99, {0}, rng.normal_matrix(3, 2)),
      ShapeError);
}

TEST_CASE("critic updates report the pre-step loss and leave a perfect fit alone") {
  Rng rng(75);
  CriticEnsemble ens = CriticEnsemble::make(3, 1, 1, {6}, false, rng);
  const TransitionBatch batch = random_batch(8, 3, 1, rng);
  std::vector<OptimizerState> opt;
  opt.push_back(make_optimizer_state(ens.members()[0].param_count()));

  Eigen::MatrixXd x(8, 4);
  x << batch.s, batch.a;
  const Eigen::VectorXd fit = ens.members()[0].forward(x).col(0);
  const Eigen::VectorXd before = ens.members()[0].flatten();
  CHECK(critic_update(ens, batch, fit, opt, AdamConfig{}) == 0.0);
  CHECK((ens.members()[0].flatten() - before).cwiseAbs().maxCoeff() == 0.0);

  const Eigen::VectorXd y = fit.array() + 1.0;
  const double expected = mse_loss_and_grad(ens.members()[0], x, y, nullptr);
  CHECK(critic_update(ens, batch, y, opt, AdamConfig{}) ==
        doctest::Approx(expected).epsilon(1e-14));
  CHECK((ens.members()[0].flatten() - before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("repeated critic updates pull every member onto fixed targets") {
  Rng rng(76);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 3, {8}, false, rng);
  const TransitionBatch batch = random_batch(16, 3, 2, rng);
  const Eigen::VectorXd y = rng.normal_vector(16);
  std::vector<OptimizerState> opt;
  for (int m = 0; m < 3; ++m) opt.push_back(make_optimizer_state(ens.members()[m].param_count()));
  AdamConfig adam;
  adam.lr = 1e-2;
  const Eigen::VectorXd m0 = ens.members()[0].flatten();
  const Eigen::VectorXd m1 = ens.members()[1].flatten();
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double loss = critic_update(ens, batch, y, opt, adam);
    if (i == 0) first = loss;
    last = loss;
  }
  CHECK(last < first);
  CHECK(last < 0.5 * first);
  // Members share the batch but keep independent parameters.
  CHECK((ens.members()[0].flatten() - ens.members()[1].flatten()).cwiseAbs().maxCoeff() > 0.0);
  CHECK((ens.members()[0].flatten() - m0).cwiseAbs().maxCoeff() > 0.0);
  CHECK((ens.members()[1].flatten() - m1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("critics trained against a constant land within 0.05 of it") {
  Rng rng(77);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {8}, false, rng);
  const TransitionBatch batch = random_batch(32, 3, 2, rng);
  const double c = 2.5;
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(32, c);
  std::vector<OptimizerState> opt;
  for (int m = 0; m < 2; ++m) opt.push_back(make_optimizer_state(ens.members()[m].param_count()));
  AdamConfig adam;
  adam.lr = 1e-2;
  for (int i = 0; i < 1500; ++i) critic_update(ens, batch, y, opt, adam);
  Eigen::MatrixXd x(32, 5);
  x << batch.s, batch.a;
  for (int m = 0; m < 2; ++m) {
    const Eigen::VectorXd pred = ens.members()[m].forward(x).col(0);
    CHECK((pred.array() - c).abs().maxCoeff() < 0.05);
  }
}

TEST_CASE("critic updates guard shapes and numeric health") {
  Rng rng(78);
  CriticEnsemble ens = CriticEnsemble::make(3, 1, 2, {}, false, rng);
  const TransitionBatch batch = random_batch(4, 3, 1, rng);
  std::vector<OptimizerState> opt;
  for (int m = 0; m < 2; ++m) opt.push_back(make_optimizer_state(ens.members()[m].param_count()));
  CHECK_THROWS_AS(critic_update(ens, batch, Eigen::VectorXd::Zero(3), opt, AdamConfig{}),
                  ShapeError);
  std::vector<OptimizerState> short_opt(1, make_optimizer_state(ens.members()[0].param_count()));
  CHECK_THROWS_AS(critic_update(ens, batch, Eigen::VectorXd::Zero(4), short_opt, AdamConfig{}),
                  ShapeError);
  Eigen::VectorXd bad = Eigen::VectorXd::Zero(4);
  bad[2] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(critic_update(ens, batch, bad, opt, AdamConfig{}), NumericError);
}

TEST_CASE("the critic ensemble round-trips through json") {
  Rng rng(79);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {6}, true, rng);
  // Let targets drift from members so both sides are exercised.
  ens.soft_update_targets(1.0);
  ens.members()[0].biases()[0][0] += 0.5;
  const nlohmann::json j = ens.to_json();
  const CriticEnsemble back = CriticEnsemble::from_json(j);
  REQUIRE(back.size() == 2);
  for (int m = 0; m < 2; ++m) {
    CHECK((back.members()[m].flatten() - ens.members()[m].flatten()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.targets()[m].flatten() - ens.targets()[m].flatten()).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(CriticEnsemble::make(3, 2, 0, {}, false, rng), InputError);
}

TEST_CASE("aggregate critic scores expose mean and pessimistic min") {
  Eigen::VectorXd w(3);
  w.setZero();
  CriticEnsemble ens = linear_critics({w, w}, {1.0, 3.0}, 2, 1);
  const Eigen::VectorXd s = Eigen::VectorXd::Zero(2);
  const Eigen::VectorXd a = Eigen::VectorXd::Zero(1);
  CHECK(ens.aggregate_score(s, a, CriticAggregate::kMean) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(ens.aggregate_score(s, a, CriticAggregate::kMin) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("actor loss gradients match central differences") {
  Rng rng(80);
  struct Case {
    std::vector<int> actor_hidden;
    std::vector<int> critic_hidden;
    bool layer_norm;
  };
  for (const Case& c : {Case{{}, {}, false}, Case{{8}, {6}, false}, Case{{8}, {6}, true}}) {
    MlpPolicy actor =
        MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, c.actor_hidden, false, -0.8, rng, 1.0);
    CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, c.critic_hidden, c.layer_norm, rng);
    const TransitionBatch batch = random_batch(6, 3, 2, rng);
    const Eigen::MatrixXd eps = rng.normal_matrix(6, 2);
    const Eigen::MatrixXd bc_actions = 0.1 * rng.normal_matrix(6, 2);
    const std::vector<int> bc_rows = {0, 2, 5};

    MlpGrads grads = actor.trunk().zero_grads();
    actor_loss_and_grad(actor, ens, batch, eps, bc_actions, bc_rows, 0.3, 0.7, &grads);
    const Eigen::VectorXd analytic = actor.trunk().flatten_grads(grads);
    const Eigen::VectorXd fd = testutil::fd_gradient(actor.trunk(), [&]() {
      return actor_loss_and_grad(actor, ens, batch, eps, bc_actions, bc_rows, 0.3, 0.7, nullptr)
          .loss;
    });
    CHECK(testutil::max_rel_err(analytic, fd) <= 1e-4);
  }
}

TEST_CASE("actor statistics agree with direct evaluations of the pieces") {
  Rng rng(81);
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {8}, false, -0.8, rng);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 3, {6}, false, rng);
  const TransitionBatch batch = random_batch(5, 3, 2, rng);
  const Eigen::MatrixXd eps = rng.normal_matrix(5, 2);
  const Eigen::MatrixXd bc_actions = 0.1 * rng.normal_matrix(5, 2);
  const std::vector<int> bc_rows = {1, 3};
  const double coef = 0.2, lambda = 0.5;

  const ActorStats stats =
      actor_loss_and_grad(actor, ens, batch, eps, bc_actions, bc_rows, coef, lambda, nullptr);

  double mean_q = 0.0, mean_lp = 0.0, bc_nll = 0.0;
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd s = batch.s.row(i).transpose();
    const DiagGaussianParams g = actor.emit_gaussian(s);
    const Eigen::VectorXd a_tilde =
        g.mean + g.log_sigma.array().exp().matrix().cwiseProduct(eps.row(i).transpose());
    for (int m = 0; m < ens.size(); ++m)
      mean_q += ens.predict(s.transpose(), a_tilde.transpose(), m)[0] / (5.0 * ens.size());
    mean_lp += gaussian_log_prob(g, a_tilde) / 5.0;
  }
  for (const int row : bc_rows) {
    const Eigen::VectorXd s = batch.s.row(row).transpose();
    bc_nll -= actor.log_prob(s, bc_actions.row(row).transpose()) / 2.0;
  }
  CHECK(stats.mean_q == doctest::Approx(mean_q).epsilon(1e-12));
  CHECK(stats.mean_log_prob == doctest::Approx(mean_lp).epsilon(1e-12));
  CHECK(stats.bc_nll == doctest::Approx(bc_nll).epsilon(1e-12));
  CHECK(stats.loss ==
        doctest::Approx(coef * mean_lp - mean_q + lambda * bc_nll).epsilon(1e-12));

  // The loss value is identical whether or not gradients are requested.
  MlpGrads grads = actor.trunk().zero_grads();
  const ActorStats with_grads =
      actor_loss_and_grad(actor, ens, batch, eps, bc_actions, bc_rows, coef, lambda, &grads);
  CHECK(with_grads.loss == stats.loss);
  CHECK(with_grads.mean_q == stats.mean_q);
}

TEST_CASE("a zero likelihood weight ignores the cloning targets entirely") {
  Rng rng(82);
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {6}, false, -0.8, rng);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {}, false, rng);
  const TransitionBatch batch = random_batch(4, 3, 2, rng);
  const Eigen::MatrixXd eps = rng.normal_matrix(4, 2);
  const Eigen::MatrixXd bc_actions = rng.normal_matrix(4, 2);

  MlpGrads with_rows = actor.trunk().zero_grads();
  MlpGrads without = actor.trunk().zero_grads();
  const ActorStats a =
      actor_loss_and_grad(actor, ens, batch, eps, bc_actions, {0, 3}, 0.1, 0.0, &with_rows);
  const ActorStats b = actor_loss_and_grad(actor, ens, batch, eps, Eigen::MatrixXd(0, 2), {},
                                           0.1, 0.0, &without);
  CHECK(a.loss == b.loss);
  CHECK((actor.trunk().flatten_grads(with_rows) - actor.trunk().flatten_grads(without))
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("the actor loss refuses to emit a non-finite value") {
  Rng rng(83);
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, 0.0, rng);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 1, {}, false, rng);
  ens.members()[0].biases()[0][0] = std::numeric_limits<double>::infinity();
  const TransitionBatch batch = random_batch(3, 3, 2, rng);
  CHECK_THROWS_AS(actor_loss_and_grad(actor, ens, batch, rng.normal_matrix(3, 2),
                                      Eigen::MatrixXd(0, 2), {}, 0.1, 0.0, nullptr),
                  NumericError);
}

TEST_CASE("a heavy cloning weight with silent critics drags the actor onto the bc actions") {
  Rng rng(84);
  MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, -1.0, rng);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(5);
  CriticEnsemble silent = linear_critics({w, w}, {0.0, 0.0}, 3, 2);

  // A frozen near-deterministic cloning target.
  Eigen::VectorXd a_star(2);
  a_star << 0.03, -0.01;
  MlpPolicy bc = testutil::linear_gaussian_policy(
      Eigen::MatrixXd::Zero(2, 3), a_star, Eigen::VectorXd::Constant(2, -10.0));

  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.bc_loss_weight = 1000.0;
  cfg.bc_loss_target = BcLossTarget::kBcSamples;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  OptimizerState opt = make_optimizer_state(actor.trunk().param_count());
  Rng step_rng(85);
  const TransitionBatch batch = random_batch(8, 3, 2, rng);

  const auto mean_distance = [&]() {
    double d = 0.0;
    for (int i = 0; i < 8; ++i)
      d += (actor.emit_gaussian(batch.s.row(i).transpose()).mean - a_star).norm() / 8.0;
    return d;
  };
  const double before = mean_distance();
  for (int i = 0; i < 400; ++i)
    actor_update(actor, silent, batch, &bc, 0.0, cfg, opt, step_rng);
  const double after = mean_distance();
  CHECK(after < before);
  CHECK(after < 5e-3);
}

TEST_CASE("demo-targeted cloning uses stored actions and skips demo-free batches") {
  Rng rng(86);
  MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, -1.0, rng);
  MlpPolicy actor_twin = actor;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(5);
  CriticEnsemble silent = linear_critics({w, w}, {0.0, 0.0}, 3, 2);
  MlpPolicy bc = testutil::linear_gaussian_policy(
      Eigen::MatrixXd::Zero(2, 3), Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(2, -10.0));

  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.bc_loss_weight = 10.0;
  cfg.bc_loss_target = BcLossTarget::kDemoActions;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 6;

  // No demo-tagged rows: the cloning term vanishes.
  TransitionBatch rl_only = random_batch(6, 3, 2, rng);
  OptimizerState opt = make_optimizer_state(actor.trunk().param_count());
  Rng r1(87);
  const ActorStats none = actor_update(actor, silent, rl_only, &bc, 0.1, cfg, opt, r1);
  CHECK(none.bc_nll == 0.0);

  // Demo rows engage it, regressing onto the stored actions.
  TransitionBatch with_demo = rl_only;
  with_demo.source[1] = ActionSource::kDemo;
  with_demo.source[4] = ActionSource::kDemo;
  OptimizerState opt2 = make_optimizer_state(actor_twin.trunk().param_count());
  Rng r2(87);
  const ActorStats some = actor_update(actor_twin, silent, with_demo, &bc, 0.1, cfg, opt2, r2);
  CHECK(some.bc_nll > 0.0);
  CHECK(some.loss != none.loss);
}

TEST_CASE("without a cloning policy the update runs the plain objective") {
  Rng rng(88);
  MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {6}, false, -1.0, rng);
  CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {}, false, rng);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.bc_loss_weight = 0.3;
  cfg.batch_size = 4;
  OptimizerState opt = make_optimizer_state(actor.trunk().param_count());
  Rng step_rng(89);
  const TransitionBatch batch = random_batch(4, 3, 2, rng);
  const ActorStats stats = actor_update(actor, ens, batch, nullptr, 0.1, cfg, opt, step_rng);
  CHECK(stats.bc_nll == 0.0);
  CHECK(std::isfinite(stats.loss));
}

TEST_CASE("the entropy coefficient rises when entropy is short and falls when long") {
  RLConfig cfg;
  cfg.entropy_lr = 1e-2;
  EntropyTuner low = EntropyTuner::make(cfg, 2);
  CHECK(low.target == -2.0);
  CHECK(low.coef() == doctest::Approx(0.1).epsilon(1e-15));
  // Entropy far below target: mean log-prob + target > 0, so the coef grows.
  low.update(5.0);
  CHECK(low.coef() > 0.1);

  EntropyTuner high = EntropyTuner::make(cfg, 2);
  high.update(-5.0);  // entropy above target: the coef shrinks
  CHECK(high.coef() < 0.1);

  cfg.target_entropy = -1.7;
  cfg.target_entropy_is_default = false;
  CHECK(EntropyTuner::make(cfg, 2).target == -1.7);

  cfg.auto_entropy = false;
  cfg.entropy_coef_fixed = 0.25;
  EntropyTuner fixed = EntropyTuner::make(cfg, 2);
  CHECK(fixed.coef() == 0.25);
  fixed.update(50.0);
  CHECK(fixed.coef() == 0.25);  // disabled tuners never move
}

TEST_CASE("the learner rejects mismatched construction") {
  Rng rng(90);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.batch_size = 4;
  const CriticEnsemble two = CriticEnsemble::make(3, 2, 2, {}, false, rng);
  const MlpPolicy gmm = MlpPolicy::make(3, 2, HeadKind::kGmm, 2, {}, false, 0.0, rng);
  CHECK_THROWS_AS(Learner(gmm, two, nullptr, cfg, 1), InputError);
  const MlpPolicy gaussian = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, 0.0, rng);
  const CriticEnsemble three = CriticEnsemble::make(3, 2, 3, {}, false, rng);
  CHECK_THROWS_AS(Learner(gaussian, three, nullptr, cfg, 1), InputError);
}

TEST_CASE("train steps wait for a full batch, then advance the counters") {
  Rng rng(91);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.utd = 2;
  cfg.batch_size = 4;
  cfg.hidden = {};
  Learner learner(MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, -1.0, rng),
                  CriticEnsemble::make(3, 2, 2, {}, false, rng), nullptr, cfg, 7);
  ReplayBuffer replay(3, 2, 64);
  Rng fill(92);
  for (int i = 0; i < 3; ++i) {
    CHECK_FALSE(learner.train_step(replay).has_value());
    Transition t;
    t.s = fill.normal_vector(3);
    t.a = fill.normal_vector(2);
    t.r = fill.normal();
    t.s_next = fill.normal_vector(3);
    replay.push(t);
  }
  CHECK(learner.learner_step() == 0);
  Transition t;
  t.s = fill.normal_vector(3);
  t.a = fill.normal_vector(2);
  t.r = fill.normal();
  t.s_next = fill.normal_vector(3);
  replay.push(t);
  const auto m1 = learner.train_step(replay);
  REQUIRE(m1.has_value());
  CHECK(m1->learner_step == 1);
  CHECK(m1->entropy_coef == doctest::Approx(0.1).epsilon(1e-15));
  const auto m2 = learner.train_step(replay);
  REQUIRE(m2.has_value());
  CHECK(m2->learner_step == 2);
  CHECK(learner.learner_step() == 2);
  CHECK(std::isfinite(m2->critic_loss));
  CHECK(std::isfinite(m2->actor_loss));
  CHECK(std::isfinite(m2->batch_entropy));
  CHECK(std::isfinite(m2->mean_q));
}

TEST_CASE("each train step blends the targets exactly once") {
  Rng rng(93);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.utd = 3;
  cfg.batch_size = 4;
  cfg.tau = 0.005;
  Learner learner(MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {}, false, -1.0, rng),
                  CriticEnsemble::make(3, 2, 2, {6}, false, rng), nullptr, cfg, 11);
  ReplayBuffer replay(3, 2, 64);
  Rng fill(94);
  for (int i = 0; i < 8; ++i) {
    Transition t;
    t.s = fill.normal_vector(3);
    t.a = fill.normal_vector(2);
    t.r = fill.normal();
    t.s_next = fill.normal_vector(3);
    replay.push(t);
  }
  std::vector<Eigen::VectorXd> t0;
  for (const Mlp& t : learner.critics().targets()) t0.push_back(t.flatten());
  REQUIRE(learner.train_step(replay).has_value());
  // targets_new = 0.995 * targets_old + 0.005 * members_new, applied once.
  for (int m = 0; m < 2; ++m) {
    const Eigen::VectorXd expect =
        0.995 * t0[m] + 0.005 * learner.critics().members()[m].flatten();
    CHECK((learner.critics().targets()[m].flatten() - expect).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("identical learners replay identical metric streams") {
  Rng rng(95);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 2;
  cfg.utd = 2;
  cfg.batch_size = 8;
  const MlpPolicy actor = MlpPolicy::make(3, 2, HeadKind::kGaussian, 1, {8}, false, -1.0, rng);
  const CriticEnsemble ens = CriticEnsemble::make(3, 2, 2, {8}, false, rng);
  Learner a(actor, ens, nullptr, cfg, 21);
  Learner b(actor, ens, nullptr, cfg, 21);
  Learner c(actor, ens, nullptr, cfg, 22);
  ReplayBuffer replay(3, 2, 64);
  Rng fill(96);
  for (int i = 0; i < 16; ++i) {
    Transition t;
    t.s = fill.normal_vector(3);
    t.a = fill.normal_vector(2);
    t.r = fill.normal();
    t.s_next = fill.normal_vector(3);
    if (i % 5 == 0) t.terminal = true;
    replay.push(t);
  }
  bool diverged = false;
  for (int i = 0; i < 5; ++i) {
    const auto ma = a.train_step(replay);
    const auto mb = b.train_step(replay);
    const auto mc = c.train_step(replay);
    CHECK(ma->critic_loss == mb->critic_loss);
    CHECK(ma->actor_loss == mb->actor_loss);
    CHECK(ma->mean_q == mb->mean_q);
    CHECK(ma->batch_entropy == mb->batch_entropy);
    CHECK(ma->entropy_coef == mb->entropy_coef);
    diverged = diverged || ma->critic_loss != mc->critic_loss;
  }
  CHECK((a.actor().trunk().flatten() - b.actor().trunk().flatten()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(diverged);  // a different seed takes a different path
}

TEST_CASE("auto entropy tuning steers batch entropy toward the target") {
  Rng rng(97);
  RLConfig cfg;
  cfg.ensemble_size = 2;
  cfg.subsample = 1;
  cfg.utd = 1;
  cfg.batch_size = 16;
  cfg.learning_rate = 3e-3;
  cfg.entropy_lr = 1e-2;
  cfg.gamma = 0.9;
  Learner learner(MlpPolicy::make(4, 2, HeadKind::kGaussian, 1, {16}, false, -2.5, rng),
                  CriticEnsemble::make(4, 2, 2, {16}, false, rng), nullptr, cfg, 31);
  // A stationary one-step task penalizing action magnitude: the critics learn
  // a value surface that is concave in the action, so a definite entropy
  // equilibrium exists for the coefficient to steer toward.
  ReplayBuffer replay(4, 2, 512);
  Rng fill(98);
  for (int i = 0; i < 512; ++i) {
    Transition t;
    t.s = fill.normal_vector(4);
    t.a = 0.3 * fill.normal_vector(2);
    t.r = -t.a.squaredNorm();
    t.s_next = t.s;
    t.terminal = true;
    replay.push(t);
  }
  double ma = 0.0;
  const int steps = 1500, window = 300;
  for (int i = 0; i < steps; ++i) {
    const auto m = learner.train_step(replay);
    if (i >= steps - window) ma += m->batch_entropy / window;
  }
  CHECK(std::abs(ma - (-2.0)) < 0.5);
}

TEST_CASE("config validation reports each violated bound") {
  RLConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.gamma = 1.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.gamma must be in [0, 1)", ConfigError);
  cfg = RLConfig{};
  cfg.tau = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.tau must be in (0, 1]", ConfigError);
  cfg = RLConfig{};
  cfg.utd = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.utd must be >= 1", ConfigError);
  cfg = RLConfig{};
  cfg.subsample = 11;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.subsample must be in [1, ensemble_size]", ConfigError);
  cfg = RLConfig{};
  cfg.bc_loss_weight = -0.1;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.bc_loss_weight must be >= 0", ConfigError);
  cfg = RLConfig{};
  cfg.entropy_coef_fixed = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "rl.entropy_coef must be positive", ConfigError);
}
