#include "q2rl/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace q2rl {

const char* const kVariants[6] = {"full",       "no_gating", "no_qinit",
                                  "ibrl_style", "bc_only",   "rl_from_scratch"};

namespace {

// Typed reads with defaults over one JSON object; records which keys were
// consumed so finish() can reject unknown ones by name.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string prefix)
      : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config section '" + prefix_ + "' must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  double number(const char* key, double def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number()) fail(key, "a number");
    return v.get<double>();
  }

  int integer(const char* key, int def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "an integer");
    return v.get<int>();
  }

  long integer64(const char* key, long def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "an integer");
    return v.get<long>();
  }

  std::uint64_t unsigned64(const char* key, std::uint64_t def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
      fail(key, "a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* key, bool def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "a boolean");
    return v.get<bool>();
  }

  std::string str(const char* key, const std::string& def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_string()) fail(key, "a string");
    return v.get<std::string>();
  }

  std::vector<int> int_list(const char* key, std::vector<int> def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_array()) fail(key, "an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) fail(key, "an array of integers");
      out.push_back(e.get<int>());
    }
    return out;
  }

  Eigen::Vector2d vec2(const char* key, const Eigen::Vector2d& def) {
    if (!mark(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      fail(key, "an array of two numbers");
    return {v[0].get<double>(), v[1].get<double>()};
  }

  // Integer that may be null (resolved elsewhere); returns def when absent
  // or null.
  std::optional<int> nullable_int(const char* key) {
    if (!mark(key)) return std::nullopt;
    const auto& v = j_.at(key);
    if (v.is_null()) return std::nullopt;
    if (!v.is_number_integer()) fail(key, "an integer or null");
    return v.get<int>();
  }

  std::optional<double> nullable_number(const char* key) {
    if (!mark(key)) return std::nullopt;
    const auto& v = j_.at(key);
    if (v.is_null()) return std::nullopt;
    if (!v.is_number()) fail(key, "a number or null");
    return v.get<double>();
  }

  nlohmann::json object(const char* key) {
    if (!mark(key)) return nlohmann::json::object();
    const auto& v = j_.at(key);
    if (!v.is_object()) fail(key, "an object");
    return v;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!consumed_.count(it.key()))
        throw ConfigError("unknown config key '" + qualified(it.key()) + "'");
    }
  }

 private:
  bool mark(const char* key) {
    if (!j_.contains(key)) return false;
    consumed_.insert(key);
    return true;
  }

  std::string qualified(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config key '" + qualified(key) + "' must be " + what);
  }

  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> consumed_;
};

EnvConfig parse_env(const nlohmann::json& j) {
  SectionReader r(j, "env");
  EnvConfig cfg;
  EnvSpec& s = cfg.spec;
  s.kind = env_kind_from_name(r.str("kind", "point_reach"));
  const std::optional<int> len = r.nullable_int("max_episode_len");
  s.max_episode_len = len.value_or(s.kind == EnvKind::kPointReach ? 60 : 120);
  s.action_delta = r.number("action_delta", 0.05);
  s.fixed_init = r.boolean("fixed_init", false);
  s.init_fixed = r.vec2("init_fixed", {0.1, 0.5});
  s.init_lo = r.vec2("init_lo", {0.05, 0.25});
  s.init_hi = r.vec2("init_hi", {0.25, 0.75});
  s.goal = r.vec2("goal", {0.8, 0.5});
  s.success_radius = r.number("success_radius", 0.05);
  s.wall_x0 = r.number("wall_x0", 0.6);
  s.wall_x1 = r.number("wall_x1", 0.7);
  s.slot_y = r.number("slot_y", 0.5);
  s.slot_width = r.number("slot_width", 0.08);
  s.success_x = r.number("success_x", 0.68);
  s.shift_dy = r.number("shift_dy", 0.0);
  s.shift_width_scale = r.number("shift_width_scale", 1.0);
  cfg.teacher_noise.scale = r.number("teacher_noise", 0.0);
  const std::string kind = r.str("teacher_noise_kind", "gaussian");
  if (kind == "gaussian")
    cfg.teacher_noise.kind = TeacherNoise::Kind::kGaussian;
  else if (kind == "uniform")
    cfg.teacher_noise.kind = TeacherNoise::Kind::kUniform;
  else
    throw ConfigError("config key 'env.teacher_noise_kind' must be gaussian or uniform");
  if (cfg.teacher_noise.scale < 0.0)
    throw ConfigError("config key 'env.teacher_noise' must be >= 0");
  r.finish();
  s.validate();
  return cfg;
}

BcConfig parse_bc(const nlohmann::json& j) {
  SectionReader r(j, "bc");
  BcConfig cfg;
  cfg.head = head_from_name(r.str("head", "gaussian"));
  cfg.n_components = r.integer("n_components", 5);
  cfg.hidden = r.int_list("hidden", {64, 64});
  cfg.layer_norm = r.boolean("layer_norm", false);
  cfg.learning_rate = r.number("learning_rate", 1e-3);
  cfg.epochs = r.integer("epochs", 150);
  cfg.batch_size = r.integer("batch_size", 256);
  cfg.holdout_fraction = r.number("holdout_fraction", 0.1);
  cfg.checkpoint_every = r.integer("checkpoint_every", 25);
  cfg.log_sigma_bias_init = r.number("log_sigma_bias_init", -1.0);
  r.finish();
  cfg.validate();
  return cfg;
}

QEstConfig parse_qest(const nlohmann::json& j) {
  SectionReader r(j, "q_estimation");
  QEstConfig cfg;
  cfg.n_rollouts = r.integer("n_rollouts", 100);
  cfg.value_train_steps = r.integer("value_train_steps", 20000);
  cfg.q_init_train_steps = r.integer("q_init_train_steps", 20000);
  cfg.alpha = r.number("alpha", 1.0);
  cfg.rollouts_into_replay = r.boolean("rollouts_into_replay", false);
  r.finish();
  cfg.validate();
  return cfg;
}

RLConfig parse_rl(const nlohmann::json& j) {
  SectionReader r(j, "rl");
  RLConfig cfg;
  cfg.gamma = r.number("gamma", 0.99);
  cfg.tau = r.number("tau", 0.005);
  cfg.utd = r.integer("utd", 4);
  cfg.subsample = r.integer("subsample", 2);
  cfg.ensemble_size = r.integer("ensemble_size", 10);
  cfg.batch_size = r.integer("batch_size", 256);
  cfg.bc_loss_weight = r.number("bc_loss_weight", 0.3);
  const std::string target = r.str("bc_loss_target", "bc_samples");
  if (target == "bc_samples")
    cfg.bc_loss_target = BcLossTarget::kBcSamples;
  else if (target == "demo_actions")
    cfg.bc_loss_target = BcLossTarget::kDemoActions;
  else
    throw ConfigError("config key 'rl.bc_loss_target' must be bc_samples or demo_actions");
  cfg.reward_scale = r.number("reward_scale", 5.0);
  cfg.reward_bias = r.number("reward_bias", -1.0);
  cfg.learning_rate = r.number("learning_rate", 3e-4);
  cfg.hidden = r.int_list("hidden", {512, 512, 512});
  cfg.layer_norm = r.boolean("layer_norm", true);
  const long cap = r.integer64("replay_capacity", 2000000);
  if (cap < 1) throw ConfigError("config key 'rl.replay_capacity' must be >= 1");
  cfg.replay_capacity = static_cast<size_t>(cap);
  cfg.auto_entropy = r.boolean("auto_entropy", true);
  cfg.entropy_coef_fixed = r.number("entropy_coef", 0.1);
  cfg.entropy_lr = r.number("entropy_lr", 3e-4);
  const std::optional<double> te = r.nullable_number("target_entropy");
  cfg.target_entropy_is_default = !te.has_value();
  cfg.target_entropy = te.value_or(0.0);
  cfg.log_sigma_bias_init = r.number("log_sigma_bias_init", -2.5);
  r.finish();
  cfg.validate();
  return cfg;
}

DriverConfig parse_driver(const nlohmann::json& j) {
  SectionReader r(j, "driver");
  DriverConfig cfg;
  cfg.total_env_steps = r.integer64("total_env_steps", 150000);
  cfg.eval_every = r.integer("eval_every", 2000);
  cfg.eval_episodes = r.integer("eval_episodes", 20);
  cfg.actor_flush_every = r.integer("actor_flush_every", 30);
  cfg.learner_publish_every = r.integer("learner_publish_every", 30);
  cfg.seed_fraction = r.number("seed_fraction", 0.0);
  cfg.demos_path = r.str("demos_path", "");
  cfg.bc_checkpoint = r.str("bc_checkpoint", "");
  cfg.async_mode = r.boolean("async", false);
  cfg.deterministic_async = r.boolean("deterministic_async", false);
  cfg.rl_action_mode = r.boolean("rl_action_mode", true);
  cfg.bc_action_mode = r.boolean("bc_action_mode", false);
  const std::string agg = r.str("critic_aggregate", "mean");
  if (agg == "mean")
    cfg.critic_aggregate = CriticAggregate::kMean;
  else if (agg == "min")
    cfg.critic_aggregate = CriticAggregate::kMin;
  else
    throw ConfigError("config key 'driver.critic_aggregate' must be mean or min");
  cfg.channel_capacity = r.integer("channel_capacity", 64);
  r.finish();
  cfg.validate();
  return cfg;
}

}  // namespace

void QEstConfig::validate() const {
  if (n_rollouts < 0) throw ConfigError("q_estimation.n_rollouts must be >= 0");
  if (value_train_steps < 0) throw ConfigError("q_estimation.value_train_steps must be >= 0");
  if (q_init_train_steps < 0) throw ConfigError("q_estimation.q_init_train_steps must be >= 0");
  if (alpha <= 0.0) throw ConfigError("q_estimation.alpha must be positive");
}

void DriverConfig::validate() const {
  if (total_env_steps < 0) throw ConfigError("driver.total_env_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("driver.eval_every must be >= 1");
  if (eval_episodes < 1) throw ConfigError("driver.eval_episodes must be >= 1");
  if (actor_flush_every < 1) throw ConfigError("driver.actor_flush_every must be >= 1");
  if (learner_publish_every < 1) throw ConfigError("driver.learner_publish_every must be >= 1");
  if (seed_fraction < 0.0 || seed_fraction > 1.0)
    throw ConfigError("driver.seed_fraction must be in [0, 1]");
  if (channel_capacity < 1) throw ConfigError("driver.channel_capacity must be >= 1");
}

void RunConfig::validate() const {
  env.spec.validate();
  bc.validate();
  q_estimation.validate();
  rl.validate();
  driver.validate();
  if (std::find_if(std::begin(kVariants), std::end(kVariants),
                   [&](const char* v) { return variant == v; }) == std::end(kVariants))
    throw ConfigError("unknown variant '" + variant + "'");
}

RunConfig parse_run_config(const nlohmann::json& j) {
  SectionReader r(j, "");
  RunConfig cfg;
  cfg.seed = r.unsigned64("seed", 0);
  cfg.variant = r.str("variant", "full");
  cfg.env = parse_env(r.object("env"));
  cfg.bc = parse_bc(r.object("bc"));
  cfg.q_estimation = parse_qest(r.object("q_estimation"));
  cfg.rl = parse_rl(r.object("rl"));
  cfg.driver = parse_driver(r.object("driver"));
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("parse_config: cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("parse_config: invalid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["variant"] = variant;

  nlohmann::json je;
  const EnvSpec& s = env.spec;
  je["kind"] = env_kind_name(s.kind);
  je["max_episode_len"] = s.max_episode_len;
  je["action_delta"] = s.action_delta;
  je["fixed_init"] = s.fixed_init;
  je["init_fixed"] = {s.init_fixed.x(), s.init_fixed.y()};
  je["init_lo"] = {s.init_lo.x(), s.init_lo.y()};
  je["init_hi"] = {s.init_hi.x(), s.init_hi.y()};
  je["goal"] = {s.goal.x(), s.goal.y()};
  je["success_radius"] = s.success_radius;
  je["wall_x0"] = s.wall_x0;
  je["wall_x1"] = s.wall_x1;
  je["slot_y"] = s.slot_y;
  je["slot_width"] = s.slot_width;
  je["success_x"] = s.success_x;
  je["shift_dy"] = s.shift_dy;
  je["shift_width_scale"] = s.shift_width_scale;
  je["teacher_noise"] = env.teacher_noise.scale;
  je["teacher_noise_kind"] =
      env.teacher_noise.kind == TeacherNoise::Kind::kGaussian ? "gaussian" : "uniform";
  j["env"] = std::move(je);

  nlohmann::json jb;
  jb["head"] = head_name(bc.head);
  jb["n_components"] = bc.n_components;
  jb["hidden"] = bc.hidden;
  jb["layer_norm"] = bc.layer_norm;
  jb["learning_rate"] = bc.learning_rate;
  jb["epochs"] = bc.epochs;
  jb["batch_size"] = bc.batch_size;
  jb["holdout_fraction"] = bc.holdout_fraction;
  jb["checkpoint_every"] = bc.checkpoint_every;
  jb["log_sigma_bias_init"] = bc.log_sigma_bias_init;
  j["bc"] = std::move(jb);

  nlohmann::json jq;
  jq["n_rollouts"] = q_estimation.n_rollouts;
  jq["value_train_steps"] = q_estimation.value_train_steps;
  jq["q_init_train_steps"] = q_estimation.q_init_train_steps;
  jq["alpha"] = q_estimation.alpha;
  jq["rollouts_into_replay"] = q_estimation.rollouts_into_replay;
  j["q_estimation"] = std::move(jq);

  nlohmann::json jr;
  jr["gamma"] = rl.gamma;
  jr["tau"] = rl.tau;
  jr["utd"] = rl.utd;
  jr["subsample"] = rl.subsample;
  jr["ensemble_size"] = rl.ensemble_size;
  jr["batch_size"] = rl.batch_size;
  jr["bc_loss_weight"] = rl.bc_loss_weight;
  jr["bc_loss_target"] =
      rl.bc_loss_target == BcLossTarget::kBcSamples ? "bc_samples" : "demo_actions";
  jr["reward_scale"] = rl.reward_scale;
  jr["reward_bias"] = rl.reward_bias;
  jr["learning_rate"] = rl.learning_rate;
  jr["hidden"] = rl.hidden;
  jr["layer_norm"] = rl.layer_norm;
  jr["replay_capacity"] = static_cast<long>(rl.replay_capacity);
  jr["auto_entropy"] = rl.auto_entropy;
  jr["entropy_coef"] = rl.entropy_coef_fixed;
  jr["entropy_lr"] = rl.entropy_lr;
  if (rl.target_entropy_is_default)
    jr["target_entropy"] = nullptr;
  else
    jr["target_entropy"] = rl.target_entropy;
  jr["log_sigma_bias_init"] = rl.log_sigma_bias_init;
  j["rl"] = std::move(jr);

  nlohmann::json jd;
  jd["total_env_steps"] = driver.total_env_steps;
  jd["eval_every"] = driver.eval_every;
  jd["eval_episodes"] = driver.eval_episodes;
  jd["actor_flush_every"] = driver.actor_flush_every;
  jd["learner_publish_every"] = driver.learner_publish_every;
  jd["seed_fraction"] = driver.seed_fraction;
  jd["demos_path"] = driver.demos_path;
  jd["bc_checkpoint"] = driver.bc_checkpoint;
  jd["async"] = driver.async_mode;
  jd["deterministic_async"] = driver.deterministic_async;
  jd["rl_action_mode"] = driver.rl_action_mode;
  jd["bc_action_mode"] = driver.bc_action_mode;
  jd["critic_aggregate"] = driver.critic_aggregate == CriticAggregate::kMean ? "mean" : "min";
  jd["channel_capacity"] = driver.channel_capacity;
  j["driver"] = std::move(jd);
  return j;
}

bool RunConfig::operator==(const RunConfig& other) const { return to_json() == other.to_json(); }

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("save_config: cannot write " + path);
  out << cfg.to_json().dump(2) << "\n";
}

}  // namespace q2rl
