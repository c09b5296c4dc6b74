#include "q2rl/driver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "q2rl/channel.hpp"
#include "q2rl/sac.hpp"

namespace q2rl {

namespace {

// %.17g round-trips doubles exactly, keeping CSV output bit-reproducible.
std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ActionSource source_from_name(const std::string& name) {
  if (name == "bc") return ActionSource::kBc;
  if (name == "rl") return ActionSource::kRl;
  if (name == "demo") return ActionSource::kDemo;
  throw InputError("unknown action source '" + name + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot write " + path);
  out << text;
}

nlohmann::json gate_config_to_json(const GateConfig& g) {
  nlohmann::json j;
  j["bc_use_mode"] = g.bc_use_mode;
  j["rl_use_mode"] = g.rl_use_mode;
  j["aggregate"] = g.aggregate == CriticAggregate::kMean ? "mean" : "min";
  j["score_bc_with_critic"] = g.score_bc_with_critic;
  return j;
}

GateConfig gate_config_from_json(const nlohmann::json& j) {
  GateConfig g;
  g.bc_use_mode = j.at("bc_use_mode").get<bool>();
  g.rl_use_mode = j.at("rl_use_mode").get<bool>();
  g.aggregate =
      j.at("aggregate").get<std::string>() == "min" ? CriticAggregate::kMin : CriticAggregate::kMean;
  g.score_bc_with_critic = j.at("score_bc_with_critic").get<bool>();
  return g;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out =
      "env_step,learner_step,eval_success,bc_action_fraction,mean_q_bc,mean_q_rl,"
      "critic_loss,actor_loss\n";
  for (const MetricsRow& r : rows) {
    out += std::to_string(r.env_step) + "," + std::to_string(r.learner_step) + "," +
           format_double(r.eval_success) + "," + format_double(r.bc_action_fraction) + "," +
           format_double(r.mean_q_bc) + "," + format_double(r.mean_q_rl) + "," +
           format_double(r.critic_loss) + "," + format_double(r.actor_loss) + "\n";
  }
  return out;
}

std::string gate_log_csv(const std::vector<GateRow>& rows) {
  std::string out = "env_step,source,q_bc_value,q_rl_value\n";
  for (const GateRow& r : rows) {
    out += std::to_string(r.env_step) + "," + action_source_name(r.source) + "," +
           format_double(r.q_bc_value) + "," + format_double(r.q_rl_value) + "\n";
  }
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InputError("metrics csv: missing header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw InputError("metrics csv: expected 8 fields, got line '" + line + "'");
    MetricsRow r;
    r.env_step = std::stol(f[0]);
    r.learner_step = std::stol(f[1]);
    r.eval_success = std::stod(f[2]);
    r.bc_action_fraction = std::stod(f[3]);
    r.mean_q_bc = std::stod(f[4]);
    r.mean_q_rl = std::stod(f[5]);
    r.critic_loss = std::stod(f[6]);
    r.actor_loss = std::stod(f[7]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<GateRow> parse_gate_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InputError("gate log csv: missing header");
  std::vector<GateRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw InputError("gate log csv: expected 4 fields, got line '" + line + "'");
    rows.push_back({std::stol(f[0]), source_from_name(f[1]), std::stod(f[2]), std::stod(f[3])});
  }
  return rows;
}

namespace {

std::uint64_t fnv_accumulate(std::uint64_t h, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v[i], sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace

std::uint64_t snapshot_checksum(const MlpPolicy& actor, const CriticEnsemble& critics) {
  std::uint64_t h = 14695981039346656037ull;
  h = fnv_accumulate(h, actor.trunk().flatten());
  for (const Mlp& m : critics.members()) h = fnv_accumulate(h, m.flatten());
  return h;
}

EvalStats evaluate(const PolicyBundle& bundle, Env& env, int n_episodes, Rng& rng) {
  if (n_episodes < 1) throw InputError("evaluate: n_episodes must be >= 1");
  if (bundle.gated) {
    if (bundle.bc == nullptr || bundle.rl == nullptr || bundle.critics == nullptr)
      throw InputError("evaluate: gated bundle needs bc, rl, and critics");
    if (bundle.q_bc == nullptr && !bundle.gate.score_bc_with_critic)
      throw InputError("evaluate: gated bundle needs a frozen Q estimate or critic scoring");
  } else if (bundle.rl == nullptr && bundle.bc == nullptr) {
    throw InputError("evaluate: bundle holds no policy");
  }

  double successes = 0.0;
  long total_steps = 0;
  long decisions = 0;
  long bc_decisions = 0;
  for (int ep = 0; ep < n_episodes; ++ep) {
    Eigen::VectorXd obs = env.reset(rng);
    for (;;) {
      Eigen::VectorXd a;
      if (bundle.gated) {
        const GateDecision d =
            gate(obs, *bundle.bc, *bundle.rl, bundle.q_bc, *bundle.critics, rng, bundle.gate);
        ++decisions;
        if (d.source == ActionSource::kBc) ++bc_decisions;
        a = d.chosen_action;
      } else if (bundle.rl != nullptr) {
        a = bundle.rl->sample(obs, rng, bundle.gate.rl_use_mode);
      } else {
        a = bundle.bc->sample(obs, rng, bundle.gate.bc_use_mode);
      }
      const StepResult st = env.step(a);
      obs = st.next_obs;
      ++total_steps;
      if (st.terminated) {
        successes += 1.0;
        break;
      }
      if (st.truncated) break;
    }
  }
  EvalStats stats;
  stats.success_rate = successes / n_episodes;
  stats.mean_length = static_cast<double>(total_steps) / n_episodes;
  stats.bc_fraction = decisions > 0 ? static_cast<double>(bc_decisions) / decisions : 0.0;
  return stats;
}

PolicyBundle BundleData::view() const {
  PolicyBundle b;
  b.bc = bc.get();
  b.rl = actor.has_value() ? &*actor : nullptr;
  b.q_bc = q_est.has_value() ? &*q_est : nullptr;
  b.critics = critics.has_value() ? &*critics : nullptr;
  b.gate = gate;
  b.gated = gated;
  return b;
}

nlohmann::json BundleData::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["variant"] = variant;
  j["env_step"] = env_step;
  j["learner_step"] = learner_step;
  j["eval_success"] = eval_success;
  j["gated"] = gated;
  j["gate"] = gate_config_to_json(gate);
  j["actor"] = actor.has_value() ? actor->to_json() : nlohmann::json();
  j["critics"] = critics.has_value() ? critics->to_json() : nlohmann::json();
  j["bc_policy"] = bc != nullptr ? bc->to_json() : nlohmann::json();
  if (q_est.has_value()) {
    j["q_value"] = q_est->value().net.to_json();
    j["alpha"] = q_est->alpha();
  } else {
    j["q_value"] = nullptr;
    j["alpha"] = 1.0;
  }
  return j;
}

BundleData BundleData::from_json(const nlohmann::json& j) {
  if (!j.contains("format_version") || j.at("format_version").get<int>() != 1)
    throw InputError("bundle: unsupported format_version");
  BundleData b;
  b.variant = j.at("variant").get<std::string>();
  b.env_step = j.at("env_step").get<long>();
  b.learner_step = j.at("learner_step").get<long>();
  b.eval_success = j.at("eval_success").get<double>();
  b.gated = j.at("gated").get<bool>();
  b.gate = gate_config_from_json(j.at("gate"));
  if (!j.at("actor").is_null()) b.actor = MlpPolicy::from_json(j.at("actor"));
  if (!j.at("critics").is_null()) b.critics = CriticEnsemble::from_json(j.at("critics"));
  if (!j.at("bc_policy").is_null())
    b.bc = std::make_shared<const MlpPolicy>(MlpPolicy::from_json(j.at("bc_policy")));
  if (!j.at("q_value").is_null()) {
    if (b.bc == nullptr) throw InputError("bundle: q_value present without bc_policy");
    b.q_est.emplace(ValueEstimator{Mlp::from_json(j.at("q_value"))}, b.bc,
                    j.at("alpha").get<double>());
  }
  return b;
}

void save_bundle(const BundleData& bundle, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("save_bundle: cannot write " + path);
  out << bundle.to_json().dump() << "\n";
}

BundleData load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("load_bundle: cannot read " + path);
  nlohmann::json j;
  in >> j;
  return BundleData::from_json(j);
}

DemoDataset generate_demos(const EnvConfig& env_cfg, int episodes, Rng& rng) {
  if (episodes < 0) throw InputError("generate_demos: episodes must be >= 0");
  const auto env = make_env(env_cfg.spec);
  const TeacherPolicy teacher(env_cfg.spec, env_cfg.teacher_noise);
  DemoDataset out;
  const long max_attempts = 20L * episodes;
  long attempts = 0;
  while (static_cast<int>(out.trajectories.size()) < episodes) {
    if (attempts >= max_attempts)
      throw ConfigError("generate_demos: teacher reached success only " +
                        std::to_string(out.trajectories.size()) + "/" + std::to_string(episodes) +
                        " times in " + std::to_string(attempts) +
                        " attempts; lower the teacher noise");
    ++attempts;
    Trajectory tr;
    Eigen::VectorXd obs = env->reset(rng);
    tr.obs.push_back(obs);
    for (;;) {
      const Eigen::VectorXd a = teacher.sample(obs, rng, false);
      const StepResult st = env->step(a);
      tr.actions.push_back(a);
      tr.rewards.push_back(st.reward);
      tr.obs.push_back(st.next_obs);
      obs = st.next_obs;
      if (st.terminated) {
        tr.terminated = true;
        break;
      }
      if (st.truncated) break;
    }
    if (tr.terminated) out.trajectories.push_back(std::move(tr));
  }
  return out;
}

namespace {

struct VariantWiring {
  bool use_bc = true;       // BC policy loaded/trained
  bool phase1 = true;       // rollouts + value fit + frozen Q estimate
  bool q_init = true;       // critics warm-started from the frozen estimate
  bool gate_on = true;      // per-step arbitration during collection
  bool frozen_gate = true;  // BC proposals scored by the frozen estimate
  bool learn = true;        // online learner active
};

VariantWiring resolve_wiring(const std::string& variant) {
  if (variant == "full") return {true, true, true, true, true, true};
  if (variant == "no_gating") return {true, true, true, true, false, true};
  if (variant == "no_qinit") return {true, true, false, true, true, true};
  if (variant == "ibrl_style") return {true, false, false, true, false, true};
  if (variant == "bc_only") return {true, false, false, false, false, false};
  if (variant == "rl_from_scratch") return {false, false, false, false, false, true};
  throw ConfigError("unknown variant '" + variant + "'");
}

using SnapshotPtr = std::shared_ptr<const ParamSnapshot>;
using FlushMsg = std::vector<Transition>;

// Learner worker: owns the replay and the trainable networks. Each delivered
// transition entitles one train attempt (skipped while the replay is below one
// batch), and every `publish_every` completed steps emits a snapshot.
class LearnerSide {
 public:
  LearnerSide(Learner learner, ReplayBuffer replay, int publish_every)
      : learner_(std::move(learner)), replay_(std::move(replay)), publish_every_(publish_every) {}

  SnapshotPtr initial_snapshot() const { return snapshot_of(learner_, 0, 0.0, 0.0); }

  std::vector<SnapshotPtr> ingest(FlushMsg msg) {
    ++flushes_;
    for (Transition& t : msg) replay_.push(t);
    std::vector<SnapshotPtr> out;
    for (size_t i = 0; i < msg.size(); ++i) {
      const auto m = learner_.train_step(replay_);
      if (!m.has_value()) continue;
      window_critic_ += m->critic_loss;
      window_actor_ += m->actor_loss;
      ++window_n_;
      if (learner_.learner_step() % publish_every_ == 0) {
        out.push_back(snapshot_of(learner_, learner_.learner_step(), window_critic_ / window_n_,
                                  window_actor_ / window_n_));
        ++publishes_;
        window_critic_ = window_actor_ = 0.0;
        window_n_ = 0;
      }
    }
    return out;
  }

  long learner_steps() const { return learner_.learner_step(); }
  long flushes() const { return flushes_; }
  long publishes() const { return publishes_; }
  const ReplayBuffer& replay() const { return replay_; }

 private:
  static SnapshotPtr snapshot_of(const Learner& l, long step, double closs, double aloss) {
    auto snap = std::make_shared<ParamSnapshot>();
    snap->actor = l.actor();
    snap->critics = l.critics();
    snap->learner_step = step;
    snap->critic_loss = closs;
    snap->actor_loss = aloss;
    snap->checksum = snapshot_checksum(snap->actor, snap->critics);
    return snap;
  }

  Learner learner_;
  ReplayBuffer replay_;
  int publish_every_;
  long flushes_ = 0;
  long publishes_ = 0;
  double window_critic_ = 0.0;
  double window_actor_ = 0.0;
  int window_n_ = 0;
};

// Actor worker: steps the environment with the gated (or solo) policy using
// the latest adopted snapshot, logs gate decisions, and runs evaluations plus
// checkpointing on the eval grid.
class ActorSide {
 public:
  ActorSide(const RunConfig& cfg, const VariantWiring& wiring, std::unique_ptr<Env> env,
            std::shared_ptr<const StochasticPolicy> bc, const QBCEstimate* q_bc,
            SnapshotPtr initial, std::string run_dir)
      : cfg_(cfg),
        wiring_(wiring),
        env_(std::move(env)),
        bc_(std::move(bc)),
        q_bc_(q_bc),
        snap_(std::move(initial)),
        run_dir_(std::move(run_dir)),
        env_rng_(mix_seed(cfg.seed, tag_salt("env"))),
        act_rng_(mix_seed(cfg.seed, tag_salt("act"))) {
    gate_cfg_.bc_use_mode = cfg.driver.bc_action_mode;
    gate_cfg_.rl_use_mode = cfg.driver.rl_action_mode;
    gate_cfg_.aggregate = cfg.driver.critic_aggregate;
    gate_cfg_.score_bc_with_critic = !wiring.frozen_gate;
    shaper_ = cfg.rl.shaper();
  }

  bool done() const { return env_step_ >= cfg_.driver.total_env_steps; }

  void adopt(const ParamSnapshot& snap) {
    if (snapshot_checksum(snap.actor, snap.critics) != snap.checksum)
      throw NumericError("actor received a snapshot with a bad checksum");
    snap_ = std::make_shared<const ParamSnapshot>(snap);
  }

  void adopt(SnapshotPtr snap) {
    if (snapshot_checksum(snap->actor, snap->critics) != snap->checksum)
      throw NumericError("actor received a snapshot with a bad checksum");
    snap_ = std::move(snap);
  }

  // Runs up to cfg.driver.actor_flush_every env steps (fewer at the end of the
  // budget) and returns them as one flush batch.
  FlushMsg run_slice() {
    FlushMsg batch;
    const long remaining = cfg_.driver.total_env_steps - env_step_;
    const long n = std::min<long>(cfg_.driver.actor_flush_every, remaining);
    batch.reserve(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
      if (env_step_ % cfg_.driver.eval_every == 0) eval_row(env_step_);
      batch.push_back(step_once());
    }
    return batch;
  }

  // Final eval row (if the budget ended off the grid) and the closing
  // checkpoint write.
  void finish() {
    if (cfg_.driver.total_env_steps > 0 && last_row_step_ != env_step_) eval_row(env_step_);
    if (metrics_.empty()) write_checkpoint("latest.json", 0.0);
  }

  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const std::vector<GateRow>& gate_log() const { return gate_log_; }
  const std::vector<Transition>& transitions() const { return transitions_; }
  long env_steps() const { return env_step_; }
  double best_eval_success() const { return best_; }

 private:
  Transition step_once() {
    if (needs_reset_) {
      obs_ = env_->reset(env_rng_);
      needs_reset_ = false;
    }
    Eigen::VectorXd a;
    ActionSource source = ActionSource::kRl;
    if (wiring_.gate_on) {
      const GateDecision d =
          gate(obs_, *bc_, snap_->actor, wiring_.frozen_gate ? q_bc_ : nullptr, snap_->critics,
               act_rng_, gate_cfg_);
      a = d.chosen_action;
      source = d.source;
      gate_log_.push_back({env_step_, d.source, d.q_bc_value, d.q_rl_value});
      ++window_gate_n_;
      if (d.source == ActionSource::kBc) ++window_gate_bc_;
      window_qbc_sum_ += d.q_bc_value;
      window_qrl_sum_ += d.q_rl_value;
    } else {
      // Solo RL collection stays stochastic so the from-scratch agent explores.
      a = snap_->actor.sample(obs_, act_rng_, false);
    }
    const StepResult st = env_->step(a);
    Transition t;
    t.s = obs_;
    t.a = a;
    t.r = shape_reward(shaper_, st.reward);
    t.s_next = st.next_obs;
    t.terminal = st.terminated;
    t.truncated = st.truncated;
    t.source = source;
    obs_ = st.next_obs;
    if (st.terminated || st.truncated) needs_reset_ = true;
    ++env_step_;
    transitions_.push_back(t);
    return t;
  }

  void eval_row(long step) {
    Rng eval_rng(mix_seed(mix_seed(cfg_.seed, tag_salt("eval")), static_cast<std::uint64_t>(step)));
    const auto eval_env = env_->clone();
    PolicyBundle bundle;
    bundle.bc = bc_.get();
    bundle.rl = &snap_->actor;
    bundle.q_bc = wiring_.frozen_gate ? q_bc_ : nullptr;
    bundle.critics = &snap_->critics;
    bundle.gate = gate_cfg_;
    bundle.gated = wiring_.gate_on;
    const EvalStats stats = evaluate(bundle, *eval_env, cfg_.driver.eval_episodes, eval_rng);

    MetricsRow row;
    row.env_step = step;
    row.learner_step = snap_->learner_step;
    row.eval_success = stats.success_rate;
    row.bc_action_fraction =
        window_gate_n_ > 0 ? static_cast<double>(window_gate_bc_) / window_gate_n_ : 0.0;
    row.mean_q_bc = window_gate_n_ > 0 ? window_qbc_sum_ / window_gate_n_ : 0.0;
    row.mean_q_rl = window_gate_n_ > 0 ? window_qrl_sum_ / window_gate_n_ : 0.0;
    row.critic_loss = snap_->critic_loss;
    row.actor_loss = snap_->actor_loss;
    metrics_.push_back(row);
    window_gate_n_ = window_gate_bc_ = 0;
    window_qbc_sum_ = window_qrl_sum_ = 0.0;
    last_row_step_ = step;

    write_checkpoint("latest.json", stats.success_rate, step);
    if (stats.success_rate >= best_) {
      best_ = stats.success_rate;
      write_checkpoint("best.json", stats.success_rate, step);
    }
  }

  void write_checkpoint(const std::string& name, double success, long step = 0) {
    BundleData b;
    b.variant = cfg_.variant;
    b.env_step = step;
    b.learner_step = snap_->learner_step;
    b.eval_success = success;
    b.gated = wiring_.gate_on;
    b.gate = gate_cfg_;
    b.actor = snap_->actor;
    b.critics = snap_->critics;
    b.bc = std::dynamic_pointer_cast<const MlpPolicy>(bc_);
    if (q_bc_ != nullptr && b.bc != nullptr) b.q_est.emplace(q_bc_->value(), b.bc, q_bc_->alpha());
    save_bundle(b, run_dir_ + "/checkpoints/" + name);
  }

  const RunConfig& cfg_;
  VariantWiring wiring_;
  std::unique_ptr<Env> env_;
  std::shared_ptr<const StochasticPolicy> bc_;
  const QBCEstimate* q_bc_;
  SnapshotPtr snap_;
  std::string run_dir_;
  Rng env_rng_;
  Rng act_rng_;
  GateConfig gate_cfg_;
  RewardShaper shaper_;

  Eigen::VectorXd obs_;
  bool needs_reset_ = true;
  long env_step_ = 0;
  long last_row_step_ = -1;
  double best_ = -1.0;

  std::vector<MetricsRow> metrics_;
  std::vector<GateRow> gate_log_;
  std::vector<Transition> transitions_;
  long window_gate_n_ = 0;
  long window_gate_bc_ = 0;
  double window_qbc_sum_ = 0.0;
  double window_qrl_sum_ = 0.0;
};

// One experiment end to end: offline phase, online loop (sync / serialized
// async / threaded async), artifact writing.
class OnlineRun {
 public:
  OnlineRun(const RunConfig& cfg, std::string run_dir)
      : cfg_(cfg), wiring_(resolve_wiring(cfg.variant)), run_dir_(std::move(run_dir)) {}

  RunArtifacts run() {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir_ + "/checkpoints");
    fs::create_directories(run_dir_ + "/demos");
    save_config(cfg_, run_dir_ + "/config.json");

    RunArtifacts art;
    art.run_dir = run_dir_;

    prepare_bc();
    if (wiring_.phase1) offline_phase(art);

    if (!wiring_.learn) {
      bc_only_run(art);
      return art;
    }

    const EnvSpec& spec = cfg_.env.spec;
    Rng actor_rng(mix_seed(cfg_.seed, tag_salt("actor_init")));
    Rng critic_rng(mix_seed(cfg_.seed, tag_salt("critic_init")));
    MlpPolicy actor = MlpPolicy::make(spec.obs_dim, spec.action_dim, HeadKind::kGaussian, 1,
                                      cfg_.rl.hidden, false, cfg_.rl.log_sigma_bias_init, actor_rng);
    CriticEnsemble critics = CriticEnsemble::make(spec.obs_dim, spec.action_dim,
                                                  cfg_.rl.ensemble_size, cfg_.rl.hidden,
                                                  cfg_.rl.layer_norm, critic_rng);
    if (wiring_.q_init) {
      Rng qinit_rng(mix_seed(cfg_.seed, tag_salt("q_init")));
      const QInitResult qr =
          init_q_rl(*q_bc_, rollouts_, critics, cfg_.q_estimation.q_init_train_steps,
                    cfg_.rl.batch_size, cfg_.rl.learning_rate, qinit_rng);
      art.q_init_fraction_within_half = qr.fraction_within_half;
    }

    ReplayBuffer replay(spec.obs_dim, spec.action_dim, cfg_.rl.replay_capacity);
    if (cfg_.driver.seed_fraction > 0.0) {
      if (demos_.empty())
        throw ConfigError("driver.seed_fraction > 0 requires driver.demos_path");
      const auto k = static_cast<size_t>(
          std::llround(cfg_.driver.seed_fraction * static_cast<double>(demos_.trajectories.size())));
      DemoDataset subset;
      subset.trajectories.assign(demos_.trajectories.begin(),
                                 demos_.trajectories.begin() +
                                     std::min(k, demos_.trajectories.size()));
      if (!subset.trajectories.empty())
        art.seeded_transitions = seed_from_demos(replay, subset, cfg_.rl.shaper());
    }
    if (cfg_.q_estimation.rollouts_into_replay && wiring_.phase1) {
      for (const Trajectory& ep : rollouts_.episodes) {
        for (int t = 0; t < ep.length(); ++t) {
          Transition tr;
          tr.s = ep.obs[static_cast<size_t>(t)];
          tr.a = ep.actions[static_cast<size_t>(t)];
          tr.r = ep.rewards[static_cast<size_t>(t)];  // rollouts store shaped rewards
          tr.s_next = ep.obs[static_cast<size_t>(t) + 1];
          tr.terminal = t + 1 == ep.length() && ep.terminated;
          tr.truncated = t + 1 == ep.length() && !ep.terminated;
          tr.source = ActionSource::kBc;
          replay.push(tr);
        }
      }
    }

    // rl_from_scratch learns without the auxiliary BC likelihood term.
    std::shared_ptr<const StochasticPolicy> learner_bc = wiring_.use_bc ? bc_ : nullptr;
    Learner learner(std::move(actor), std::move(critics), learner_bc, cfg_.rl,
                    mix_seed(cfg_.seed, tag_salt("learner")));
    LearnerSide learner_side(std::move(learner), std::move(replay),
                             cfg_.driver.learner_publish_every);
    ActorSide actor_side(cfg_, wiring_, make_env(spec), wiring_.use_bc ? bc_ : nullptr,
                         q_bc_.has_value() ? &*q_bc_ : nullptr, learner_side.initial_snapshot(),
                         run_dir_);

    std::exception_ptr worker_error;
    if (!cfg_.driver.async_mode) {
      try {
        run_sync(actor_side, learner_side);
      } catch (...) {
        worker_error = std::current_exception();
      }
    } else if (cfg_.driver.deterministic_async) {
      try {
        run_serialized(actor_side, learner_side);
      } catch (...) {
        worker_error = std::current_exception();
      }
    } else {
      worker_error = run_threaded(actor_side, learner_side);
    }

    collect_artifacts(art, actor_side, learner_side);
    write_logs(art);
    if (worker_error) std::rethrow_exception(worker_error);
    return art;
  }

 private:
  void prepare_bc() {
    if (!cfg_.driver.demos_path.empty()) demos_ = load_demos(cfg_.driver.demos_path);
    if (!wiring_.use_bc) return;
    if (!cfg_.driver.bc_checkpoint.empty()) {
      std::ifstream probe(cfg_.driver.bc_checkpoint);
      if (!probe)
        throw ConfigError("driver.bc_checkpoint does not exist: " + cfg_.driver.bc_checkpoint);
      bc_ = std::make_shared<const MlpPolicy>(load_policy(cfg_.driver.bc_checkpoint));
    } else {
      if (demos_.empty())
        throw ConfigError("variant '" + cfg_.variant +
                          "' needs driver.bc_checkpoint or driver.demos_path");
      Rng bc_rng(mix_seed(cfg_.seed, tag_salt("bc")));
      BcTrainResult res = train_bc(demos_, cfg_.bc, bc_rng);
      bc_ = std::make_shared<const MlpPolicy>(std::move(res.policy));
    }
    save_policy(*bc_, run_dir_ + "/checkpoints/bc_policy.json");
  }

  void offline_phase(RunArtifacts& art) {
    const auto env = make_env(cfg_.env.spec);
    Rng roll_rng(mix_seed(cfg_.seed, tag_salt("rollouts")));
    rollouts_ =
        collect_rollouts(*env, *bc_, cfg_.q_estimation.n_rollouts, cfg_.rl.shaper(), roll_rng);
    rollouts_.seed = cfg_.seed;
    rollouts_.policy_id = cfg_.driver.bc_checkpoint.empty()
                              ? "bc(seed=" + std::to_string(cfg_.seed) + ")"
                              : cfg_.driver.bc_checkpoint;
    save_rollouts(rollouts_, run_dir_ + "/demos/rollouts.jsonl",
                  run_dir_ + "/demos/rollouts.meta.json");

    ValueFitConfig vcfg;
    vcfg.train_steps = cfg_.q_estimation.value_train_steps;
    vcfg.batch_size = cfg_.rl.batch_size;
    vcfg.learning_rate = cfg_.rl.learning_rate;
    vcfg.hidden = cfg_.rl.hidden;
    vcfg.layer_norm = cfg_.rl.layer_norm;
    Rng value_rng(mix_seed(cfg_.seed, tag_salt("value")));
    ValueFitResult vres = fit_value(rollouts_, cfg_.rl.gamma, vcfg, value_rng);
    art.value_fit_mse = vres.final_mse;
    q_bc_.emplace(std::move(vres.value), bc_, cfg_.q_estimation.alpha);
  }

  void bc_only_run(RunArtifacts& art) {
    Rng eval_rng(mix_seed(mix_seed(cfg_.seed, tag_salt("eval")), 0));
    const auto env = make_env(cfg_.env.spec);
    PolicyBundle bundle;
    bundle.bc = bc_.get();
    bundle.gate.bc_use_mode = cfg_.driver.bc_action_mode;
    const EvalStats stats = evaluate(bundle, *env, cfg_.driver.eval_episodes, eval_rng);

    MetricsRow row;
    row.eval_success = stats.success_rate;
    art.metrics.push_back(row);
    art.best_eval_success = art.final_eval_success = stats.success_rate;

    BundleData b;
    b.variant = cfg_.variant;
    b.eval_success = stats.success_rate;
    b.gate = bundle.gate;
    b.bc = bc_;
    save_bundle(b, run_dir_ + "/checkpoints/latest.json");
    save_bundle(b, run_dir_ + "/checkpoints/best.json");
    write_logs(art);
  }

  static void run_sync(ActorSide& actor, LearnerSide& learner) {
    while (!actor.done()) {
      FlushMsg batch = actor.run_slice();
      for (SnapshotPtr& snap : learner.ingest(std::move(batch))) actor.adopt(std::move(snap));
    }
    actor.finish();
  }

  // Single-threaded turn taking through the same channel plumbing as the
  // threaded form; snapshots are drained right after each send so a bounded
  // channel can never wedge the lone thread.
  void run_serialized(ActorSide& actor, LearnerSide& learner) const {
    Channel<FlushMsg> transitions(static_cast<size_t>(cfg_.driver.channel_capacity));
    Channel<SnapshotPtr> snapshots(static_cast<size_t>(cfg_.driver.channel_capacity));
    while (!actor.done()) {
      transitions.send(actor.run_slice());
      while (auto msg = transitions.try_receive()) {
        for (SnapshotPtr& snap : learner.ingest(std::move(*msg))) {
          snapshots.send(std::move(snap));
          while (auto s = snapshots.try_receive()) actor.adopt(std::move(*s));
        }
      }
    }
    transitions.close();
    snapshots.close();
    actor.finish();
  }

  std::exception_ptr run_threaded(ActorSide& actor, LearnerSide& learner) const {
    Channel<FlushMsg> transitions(static_cast<size_t>(cfg_.driver.channel_capacity));
    Channel<SnapshotPtr> snapshots(static_cast<size_t>(cfg_.driver.channel_capacity));
    std::exception_ptr actor_error;
    std::exception_ptr learner_error;

    std::thread actor_thread([&] {
      try {
        while (!actor.done()) {
          while (auto snap = snapshots.try_receive()) actor.adopt(std::move(*snap));
          if (!transitions.send(actor.run_slice())) break;
        }
      } catch (...) {
        actor_error = std::current_exception();
      }
      transitions.close();
      snapshots.close();  // nothing consumes snapshots anymore; fail sends fast
    });
    std::thread learner_thread([&] {
      try {
        while (auto msg = transitions.receive()) {
          for (SnapshotPtr& snap : learner.ingest(std::move(*msg)))
            if (!snapshots.send(std::move(snap))) break;
        }
      } catch (...) {
        learner_error = std::current_exception();
      }
      snapshots.close();
      if (learner_error) transitions.close();  // unblock an actor stuck flushing
    });
    actor_thread.join();
    learner_thread.join();

    if (actor_error) return actor_error;
    if (learner_error) return learner_error;
    while (auto snap = snapshots.try_receive()) actor.adopt(std::move(*snap));
    try {
      actor.finish();
    } catch (...) {
      return std::current_exception();
    }
    return nullptr;
  }

  void collect_artifacts(RunArtifacts& art, const ActorSide& actor,
                         const LearnerSide& learner) const {
    art.metrics = actor.metrics();
    art.gate_log = actor.gate_log();
    art.transitions = actor.transitions();
    art.env_steps = actor.env_steps();
    art.learner_steps = learner.learner_steps();
    art.transition_messages = learner.flushes();
    art.snapshot_messages = learner.publishes();
    art.replay_counts = learner.replay().counts_by_source();
    art.best_eval_success = std::max(0.0, actor.best_eval_success());
    art.final_eval_success = art.metrics.empty() ? 0.0 : art.metrics.back().eval_success;
  }

  void write_logs(const RunArtifacts& art) const {
    write_text_file(run_dir_ + "/metrics.csv", metrics_csv(art.metrics));
    write_text_file(run_dir_ + "/gate_log.csv", gate_log_csv(art.gate_log));
  }

  RunConfig cfg_;
  VariantWiring wiring_;
  std::string run_dir_;
  DemoDataset demos_;
  std::shared_ptr<const MlpPolicy> bc_;
  RolloutSet rollouts_;
  std::optional<QBCEstimate> q_bc_;
};

}  // namespace

RunArtifacts run_q2rl(const RunConfig& cfg, const std::string& run_dir) {
  cfg.validate();
  OnlineRun run(cfg, run_dir);
  return run.run();
}

RunArtifacts run_variant(RunConfig cfg, const std::string& variant, const std::string& run_dir) {
  cfg.variant = variant;
  return run_q2rl(cfg, run_dir);
}

RunArtifacts run_async(RunConfig cfg, const std::string& run_dir, bool deterministic) {
  cfg.driver.async_mode = true;
  cfg.driver.deterministic_async = deterministic;
  return run_q2rl(cfg, run_dir);
}

}  // namespace q2rl
