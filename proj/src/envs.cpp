#include "q2rl/envs.hpp"

#include <algorithm>
#include <cmath>

namespace q2rl {

namespace {

double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

Eigen::Vector2d clip_action(const EnvSpec& spec, const Eigen::VectorXd& action) {
  if (action.size() != spec.action_dim) throw ShapeError("Env::step: action dimension mismatch");
  if (!action.allFinite()) throw InputError("Env::step: non-finite action");
  Eigen::Vector2d a;
  a.x() = clip(action[0], -spec.action_delta, spec.action_delta);
  a.y() = clip(action[1], -spec.action_delta, spec.action_delta);
  return a;
}

class PointMassEnv : public Env {
 public:
  explicit PointMassEnv(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const EnvSpec& spec() const override { return spec_; }

  Eigen::VectorXd reset(Rng& rng) override {
    if (spec_.fixed_init) {
      pos_ = spec_.init_fixed;
    } else {
      pos_.x() = rng.uniform(spec_.init_lo.x(), spec_.init_hi.x());
      pos_.y() = rng.uniform(spec_.init_lo.y(), spec_.init_hi.y());
    }
    t_ = 0;
    done_ = false;
    return observe();
  }

  StepResult step(const Eigen::VectorXd& action) override {
    if (done_) throw InputError("Env::step: episode finished; call reset");
    const Eigen::Vector2d a = clip_action(spec_, action);
    integrate(a);
    t_ += 1;
    StepResult res;
    res.terminated = success();
    res.reward = res.terminated ? 1.0 : 0.0;
    res.truncated = !res.terminated && t_ >= spec_.max_episode_len;
    res.next_obs = observe();
    done_ = res.terminated || res.truncated;
    return res;
  }

 protected:
  virtual void integrate(const Eigen::Vector2d& a) = 0;
  virtual bool success() const = 0;
  virtual Eigen::Vector2d target() const = 0;

  Eigen::VectorXd observe() const {
    Eigen::VectorXd obs(4);
    const Eigen::Vector2d t = target();
    obs << pos_.x(), pos_.y(), t.x() - pos_.x(), t.y() - pos_.y();
    return obs;
  }

  EnvSpec spec_;
  Eigen::Vector2d pos_{0.0, 0.0};
  int t_ = 0;
  bool done_ = false;
};

class PointReachEnv final : public PointMassEnv {
 public:
  using PointMassEnv::PointMassEnv;

  std::unique_ptr<Env> clone() const override { return std::make_unique<PointReachEnv>(*this); }

 protected:
  void integrate(const Eigen::Vector2d& a) override {
    pos_.x() = clip(pos_.x() + a.x(), 0.0, 1.0);
    pos_.y() = clip(pos_.y() + a.y(), 0.0, 1.0);
  }

  bool success() const override { return (pos_ - spec_.goal).norm() < spec_.success_radius; }

  Eigen::Vector2d target() const override { return spec_.goal; }
};

class SlotInsertEnv final : public PointMassEnv {
 public:
  using PointMassEnv::PointMassEnv;

  std::unique_ptr<Env> clone() const override { return std::make_unique<SlotInsertEnv>(*this); }

 protected:
  bool blocked(double x, double y) const {
    return x > spec_.wall_x0 && x < spec_.wall_x1 &&
           std::abs(y - spec_.actual_slot_y()) > spec_.actual_slot_width() / 2.0;
  }

  // Axis-by-axis integration: a move into the wall leaves that coordinate
  // unchanged instead of sliding along the surface.
  void integrate(const Eigen::Vector2d& a) override {
    const double nx = clip(pos_.x() + a.x(), 0.0, 1.0);
    if (!blocked(nx, pos_.y())) pos_.x() = nx;
    const double ny = clip(pos_.y() + a.y(), 0.0, 1.0);
    if (!blocked(pos_.x(), ny)) pos_.y() = ny;
  }

  bool success() const override {
    return pos_.x() >= spec_.success_x &&
           std::abs(pos_.y() - spec_.actual_slot_y()) <= spec_.actual_slot_width() / 2.0;
  }

  Eigen::Vector2d target() const override {
    // Nominal geometry only: the observation never reveals a shift.
    return {spec_.success_x, spec_.slot_y};
  }
};

}  // namespace

std::string env_kind_name(EnvKind kind) {
  return kind == EnvKind::kPointReach ? "point_reach" : "slot_insert";
}

EnvKind env_kind_from_name(const std::string& name) {
  if (name == "point_reach") return EnvKind::kPointReach;
  if (name == "slot_insert") return EnvKind::kSlotInsert;
  throw InputError("unknown env kind: " + name);
}

void EnvSpec::validate() const {
  if (obs_dim != 4 || action_dim != 2) throw InputError("EnvSpec: dims are fixed at 4/2");
  if (action_delta <= 0.0 || !std::isfinite(action_delta))
    throw InputError("EnvSpec: action_delta must be positive and finite");
  if (max_episode_len < 1) throw InputError("EnvSpec: max_episode_len must be >= 1");
  if ((init_hi - init_lo).minCoeff() < 0.0) throw InputError("EnvSpec: empty init box");
  if (kind == EnvKind::kSlotInsert) {
    if (!(wall_x0 < wall_x1)) throw InputError("EnvSpec: wall_x0 must be < wall_x1");
    if (slot_width <= 0.0 || actual_slot_width() <= 0.0)
      throw InputError("EnvSpec: slot width must stay positive");
    if (success_x <= wall_x0) throw InputError("EnvSpec: success_x must sit inside the wall");
  } else {
    if (success_radius <= 0.0) throw InputError("EnvSpec: success_radius must be positive");
  }
}

std::unique_ptr<Env> make_env(const EnvSpec& spec) {
  if (spec.kind == EnvKind::kPointReach) return std::make_unique<PointReachEnv>(spec);
  return std::make_unique<SlotInsertEnv>(spec);
}

std::unique_ptr<Env> shift_variant(const Env& env, double dy, double width_scale) {
  if (env.spec().kind != EnvKind::kSlotInsert)
    throw InputError("shift_variant: only SlotInsert supports distribution shift");
  EnvSpec spec = env.spec();
  spec.shift_dy = dy;
  spec.shift_width_scale = width_scale;
  return make_env(spec);
}

Eigen::VectorXd scripted_teacher(const EnvSpec& spec, const Eigen::VectorXd& obs,
                                 const TeacherNoise& noise, Rng& rng) {
  if (obs.size() != spec.obs_dim) throw ShapeError("scripted_teacher: obs dimension mismatch");
  const Eigen::Vector2d pos(obs[0], obs[1]);
  const Eigen::Vector2d target = pos + Eigen::Vector2d(obs[2], obs[3]);

  Eigen::Vector2d waypoint = target;
  if (spec.kind == EnvKind::kSlotInsert) {
    constexpr double kAlignTol = 0.01;
    const double slot_y = target.y();
    if (pos.x() < spec.wall_x0 && std::abs(pos.y() - slot_y) > kAlignTol) {
      waypoint = {spec.wall_x0 - 0.03, slot_y};  // stage in front of the slot first
    } else {
      waypoint = {spec.success_x + 0.02, slot_y};  // push through
    }
  }

  Eigen::VectorXd action(2);
  for (int i = 0; i < 2; ++i) {
    double a = clip(waypoint[i] - pos[i], -spec.action_delta, spec.action_delta);
    if (noise.scale > 0.0) {
      a += noise.kind == TeacherNoise::Kind::kGaussian
               ? noise.scale * rng.normal()
               : rng.uniform(-noise.scale, noise.scale);
    }
    action[i] = clip(a, -spec.action_delta, spec.action_delta);
  }
  return action;
}

}  // namespace q2rl
