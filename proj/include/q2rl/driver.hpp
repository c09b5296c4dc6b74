#pragma once

#include <Eigen/Dense>
#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "q2rl/config.hpp"
#include "q2rl/gating.hpp"
#include "q2rl/q_estimation.hpp"

namespace q2rl {

struct EvalStats {
  double success_rate = 0.0;
  double mean_length = 0.0;
  double bc_fraction = 0.0;  // of gated decisions; 0 when not gated
};

// Non-owning view of the pieces needed to act. A gated bundle arbitrates
// per step; otherwise the RL policy acts if present, else BC.
struct PolicyBundle {
  const StochasticPolicy* bc = nullptr;
  const MlpPolicy* rl = nullptr;
  const QBCEstimate* q_bc = nullptr;
  const CriticEnsemble* critics = nullptr;
  GateConfig gate;
  bool gated = false;
};

// Runs episodes without learning: mean success, mean episode length, and the
// fraction of per-step decisions resolved to the BC proposal.
EvalStats evaluate(const PolicyBundle& bundle, Env& env, int n_episodes, Rng& rng);

struct MetricsRow {
  long env_step = 0;
  long learner_step = 0;
  double eval_success = 0.0;
  double bc_action_fraction = 0.0;  // over gate decisions since the previous row
  double mean_q_bc = 0.0;           // window means of the two gate scores
  double mean_q_rl = 0.0;
  double critic_loss = 0.0;  // from the latest published snapshot
  double actor_loss = 0.0;
};

struct GateRow {
  long env_step = 0;
  ActionSource source = ActionSource::kRl;
  double q_bc_value = 0.0;
  double q_rl_value = 0.0;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::string gate_log_csv(const std::vector<GateRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
std::vector<GateRow> parse_gate_log_csv(const std::string& text);

// Immutable copy of the learner's networks handed to the actor. The checksum
// covers every online parameter so a torn snapshot cannot be acted upon.
struct ParamSnapshot {
  MlpPolicy actor;
  CriticEnsemble critics;
  long learner_step = 0;
  double critic_loss = 0.0;  // means over the publish window
  double actor_loss = 0.0;
  std::uint64_t checksum = 0;
};

std::uint64_t snapshot_checksum(const MlpPolicy& actor, const CriticEnsemble& critics);

struct RunArtifacts {
  std::string run_dir;
  std::vector<MetricsRow> metrics;
  std::vector<GateRow> gate_log;
  std::vector<Transition> transitions;  // online transitions in execution order
  long env_steps = 0;
  long learner_steps = 0;
  long transition_messages = 0;  // actor -> learner flushes delivered
  long snapshot_messages = 0;    // learner -> actor snapshots published
  size_t seeded_transitions = 0;
  std::array<size_t, 3> replay_counts{0, 0, 0};  // by source: bc, rl, demo
  double best_eval_success = 0.0;
  double final_eval_success = 0.0;
  double value_fit_mse = 0.0;  // phase-1 diagnostics; 0 when the phase is skipped
  double q_init_fraction_within_half = 0.0;
};

// Full pipeline under cfg.variant: offline phase (as the variant dictates),
// then the online gated loop in sync, deterministic-serialized async, or
// threaded async form. Writes config.json, metrics.csv, gate_log.csv,
// checkpoints/ and demos/ under run_dir.
RunArtifacts run_q2rl(const RunConfig& cfg, const std::string& run_dir);
RunArtifacts run_variant(RunConfig cfg, const std::string& variant, const std::string& run_dir);
RunArtifacts run_async(RunConfig cfg, const std::string& run_dir, bool deterministic);

// Scripted-teacher demonstrations: episodes that reach success are kept (raw
// rewards), failures are retried up to a cap.
DemoDataset generate_demos(const EnvConfig& env_cfg, int episodes, Rng& rng);

// Self-contained evaluation checkpoint: everything the gate needs.
struct BundleData {
  std::string variant = "full";
  long env_step = 0;
  long learner_step = 0;
  double eval_success = 0.0;
  bool gated = false;
  GateConfig gate;
  std::optional<MlpPolicy> actor;
  std::optional<CriticEnsemble> critics;
  std::shared_ptr<const MlpPolicy> bc;
  std::optional<QBCEstimate> q_est;

  PolicyBundle view() const;  // raw pointers into *this
  nlohmann::json to_json() const;
  static BundleData from_json(const nlohmann::json& j);
};

void save_bundle(const BundleData& bundle, const std::string& path);
BundleData load_bundle(const std::string& path);

}  // namespace q2rl
