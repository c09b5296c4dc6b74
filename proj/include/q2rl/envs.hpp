#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>

#include "q2rl/errors.hpp"
#include "q2rl/rng.hpp"

namespace q2rl {

enum class EnvKind { kPointReach, kSlotInsert };

std::string env_kind_name(EnvKind kind);
EnvKind env_kind_from_name(const std::string& name);

// Static description of a task instance. Geometry fields are the nominal
// layout; shift_dy / shift_width_scale perturb only the *actual* geometry
// (SlotInsert), leaving observations and the nominal layout untouched, which
// is what makes a pre-trained policy go stale under shift.
struct EnvSpec {
  EnvKind kind = EnvKind::kPointReach;
  int obs_dim = 4;     // [x, y, target_x - x, target_y - y]
  int action_dim = 2;  // per-step delta, clipped to +-action_delta per dim
  double action_delta = 0.05;
  int max_episode_len = 60;
  bool fixed_init = false;
  Eigen::Vector2d init_fixed{0.1, 0.5};
  Eigen::Vector2d init_lo{0.05, 0.25};
  Eigen::Vector2d init_hi{0.25, 0.75};

  // PointReach
  Eigen::Vector2d goal{0.8, 0.5};
  double success_radius = 0.05;

  // SlotInsert: wall slab x in (wall_x0, wall_x1) blocks motion except where
  // |y - slot_y| <= slot_width / 2; success once x >= success_x while aligned.
  double wall_x0 = 0.6;
  double wall_x1 = 0.7;
  double slot_y = 0.5;
  double slot_width = 0.08;
  double success_x = 0.68;

  double shift_dy = 0.0;
  double shift_width_scale = 1.0;

  double actual_slot_y() const { return slot_y + shift_dy; }
  double actual_slot_width() const { return slot_width * shift_width_scale; }
  void validate() const;
};

struct StepResult {
  Eigen::VectorXd next_obs;
  double reward = 0.0;   // sparse: 1 exactly on the success step, else 0
  bool terminated = false;
  bool truncated = false;
};

// Deterministic point-mass kinematics; all stochasticity lives in reset()
// and the acting policies.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Eigen::VectorXd reset(Rng& rng) = 0;
  virtual StepResult step(const Eigen::VectorXd& action) = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

std::unique_ptr<Env> make_env(const EnvSpec& spec);

// Copy of a SlotInsert env with the actual slot moved/narrowed.
std::unique_ptr<Env> shift_variant(const Env& env, double dy, double width_scale);

struct TeacherNoise {
  enum class Kind { kGaussian, kUniform };
  double scale = 0.0;  // sigma for gaussian, half-range for uniform
  Kind kind = Kind::kGaussian;
};

// Noisy proportional controller toward the goal/slot; the noise level tunes
// demo quality. Deterministic when scale = 0.
Eigen::VectorXd scripted_teacher(const EnvSpec& spec, const Eigen::VectorXd& obs,
                                 const TeacherNoise& noise, Rng& rng);

}  // namespace q2rl
