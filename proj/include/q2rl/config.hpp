#pragma once

#include <string>

#include "json.hpp"
#include "q2rl/bc.hpp"
#include "q2rl/envs.hpp"
#include "q2rl/sac.hpp"

namespace q2rl {

struct EnvConfig {
  EnvSpec spec;
  TeacherNoise teacher_noise;
};

struct QEstConfig {
  int n_rollouts = 100;
  int value_train_steps = 20000;
  int q_init_train_steps = 20000;
  double alpha = 1.0;
  bool rollouts_into_replay = false;

  void validate() const;
};

struct DriverConfig {
  long total_env_steps = 150000;  // online interaction budget
  int eval_every = 2000;
  int eval_episodes = 20;
  int actor_flush_every = 30;
  int learner_publish_every = 30;
  double seed_fraction = 0.0;  // fraction of the demo set seeded into replay
  std::string demos_path;
  std::string bc_checkpoint;
  bool async_mode = false;
  bool deterministic_async = false;
  bool rl_action_mode = true;   // simulation-style: RL proposals at the mode
  bool bc_action_mode = false;
  CriticAggregate critic_aggregate = CriticAggregate::kMean;
  int channel_capacity = 64;

  void validate() const;
};

extern const char* const kVariants[6];  // full, no_gating, no_qinit, ibrl_style, bc_only, rl_from_scratch

struct RunConfig {
  std::uint64_t seed = 0;
  std::string variant = "full";
  EnvConfig env;
  BcConfig bc;
  QEstConfig q_estimation;
  RLConfig rl;
  DriverConfig driver;

  nlohmann::json to_json() const;
  void validate() const;
  bool operator==(const RunConfig& other) const;
};

// Strict schema: unknown keys, wrong types, or out-of-range values raise
// ConfigError naming the offending key. Defaults are filled in, so
// serialize(parse(x)) round-trips losslessly.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig parse_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);

}  // namespace q2rl
