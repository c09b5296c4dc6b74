#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "q2rl/driver.hpp"

namespace fs = std::filesystem;
using namespace q2rl;

namespace {

std::string default_root() {
  const char* env = std::getenv("Q2RL_OUT");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string("runs");
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return parse_run_config(nlohmann::json::object());
  return parse_config(path);
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(csv);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_gen_demos(const std::string& config_path, int episodes, std::uint64_t seed, bool seed_set,
                  const std::string& out_dir) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed_set) cfg.seed = seed;
  Rng rng(mix_seed(cfg.seed, tag_salt("demos")));
  const DemoDataset demos = generate_demos(cfg.env, episodes, rng);
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/demos.jsonl";
  save_demos(demos, path);
  std::cout << "wrote " << demos.trajectories.size() << " demos (" << demos.total_steps()
            << " steps) to " << path << "\n";
  return 0;
}

int cmd_train_bc(const std::string& config_path, std::uint64_t seed, bool seed_set,
                 const std::string& out_dir) {
  RunConfig cfg = parse_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (cfg.driver.demos_path.empty()) throw ConfigError("train-bc needs driver.demos_path");
  const DemoDataset demos = load_demos(cfg.driver.demos_path);
  Rng rng(mix_seed(cfg.seed, tag_salt("bc")));
  const BcTrainResult res = train_bc(demos, cfg.bc, rng);
  fs::create_directories(out_dir);
  save_policy(res.policy, out_dir + "/bc_policy.json");
  nlohmann::json j;
  j["train_nll"] = res.train_nll;
  j["holdout_nll"] = res.holdout_nll;
  j["best_epoch"] = res.best_epoch;
  std::ofstream(out_dir + "/bc_training.json") << j.dump(2) << "\n";
  std::cout << "bc policy written to " << out_dir << "/bc_policy.json"
            << " (best epoch " << res.best_epoch << ", final train nll "
            << (res.train_nll.empty() ? 0.0 : res.train_nll.back()) << ")\n";
  return 0;
}

int cmd_estimate_q(const std::string& config_path, std::uint64_t seed, bool seed_set,
                   const std::string& out_dir) {
  RunConfig cfg = parse_config(config_path);
  if (seed_set) cfg.seed = seed;

  std::shared_ptr<const MlpPolicy> bc;
  if (!cfg.driver.bc_checkpoint.empty()) {
    bc = std::make_shared<const MlpPolicy>(load_policy(cfg.driver.bc_checkpoint));
  } else {
    if (cfg.driver.demos_path.empty())
      throw ConfigError("estimate-q needs driver.bc_checkpoint or driver.demos_path");
    const DemoDataset demos = load_demos(cfg.driver.demos_path);
    Rng bc_rng(mix_seed(cfg.seed, tag_salt("bc")));
    bc = std::make_shared<const MlpPolicy>(train_bc(demos, cfg.bc, bc_rng).policy);
  }

  const auto env = make_env(cfg.env.spec);
  Rng roll_rng(mix_seed(cfg.seed, tag_salt("rollouts")));
  RolloutSet rollouts =
      collect_rollouts(*env, *bc, cfg.q_estimation.n_rollouts, cfg.rl.shaper(), roll_rng);
  rollouts.seed = cfg.seed;
  rollouts.policy_id = cfg.driver.bc_checkpoint.empty() ? "bc(inline)" : cfg.driver.bc_checkpoint;

  ValueFitConfig vcfg;
  vcfg.train_steps = cfg.q_estimation.value_train_steps;
  vcfg.batch_size = cfg.rl.batch_size;
  vcfg.learning_rate = cfg.rl.learning_rate;
  vcfg.hidden = cfg.rl.hidden;
  vcfg.layer_norm = cfg.rl.layer_norm;
  Rng value_rng(mix_seed(cfg.seed, tag_salt("value")));
  const ValueFitResult vres = fit_value(rollouts, cfg.rl.gamma, vcfg, value_rng);

  fs::create_directories(out_dir);
  save_rollouts(rollouts, out_dir + "/rollouts.jsonl", out_dir + "/rollouts.meta.json");
  nlohmann::json j;
  j["format_version"] = 1;
  j["value"] = vres.value.net.to_json();
  j["alpha"] = cfg.q_estimation.alpha;
  j["initial_mse"] = vres.initial_mse;
  j["final_mse"] = vres.final_mse;
  j["truncated_episodes"] = vres.truncated_episodes;
  std::ofstream(out_dir + "/q_estimate.json") << j.dump() << "\n";
  std::cout << "value fit mse " << vres.initial_mse << " -> " << vres.final_mse << " over "
            << rollouts.total_steps() << " rollout steps; wrote " << out_dir
            << "/q_estimate.json\n";
  return 0;
}

int run_one(const RunConfig& cfg, const std::string& root) {
  const std::string run_dir = root + "/" + cfg.variant + "_s" + std::to_string(cfg.seed);
  const RunArtifacts art = run_q2rl(cfg, run_dir);
  std::cout << "run_dir: " << art.run_dir << "\n"
            << "env_steps: " << art.env_steps << " learner_steps: " << art.learner_steps << "\n"
            << "best_eval_success: " << art.best_eval_success
            << " final_eval_success: " << art.final_eval_success << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, bool seed_set,
              const std::string& variant, const std::string& out_dir) {
  RunConfig cfg = parse_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (!variant.empty()) cfg.variant = variant;
  cfg.validate();
  return run_one(cfg, out_dir);
}

int cmd_eval(const std::string& config_path, int episodes, bool episodes_set, std::uint64_t seed,
             bool seed_set) {
  RunConfig cfg = parse_config(config_path);
  if (seed_set) cfg.seed = seed;
  const std::string run_dir = fs::path(config_path).parent_path().string();
  const std::string base = run_dir.empty() ? "." : run_dir;
  std::string bundle_path = base + "/checkpoints/best.json";
  if (!fs::exists(bundle_path)) bundle_path = base + "/checkpoints/latest.json";
  if (!fs::exists(bundle_path))
    throw PathError("no checkpoint bundle under " + base + "/checkpoints");
  const BundleData bundle = load_bundle(bundle_path);

  const auto env = make_env(cfg.env.spec);
  Rng rng(mix_seed(cfg.seed, tag_salt("cli_eval")));
  const int n = episodes_set ? episodes : cfg.driver.eval_episodes;
  const EvalStats stats = evaluate(bundle.view(), *env, n, rng);
  nlohmann::json j;
  j["success_rate"] = stats.success_rate;
  j["mean_length"] = stats.mean_length;
  j["bc_fraction"] = stats.bc_fraction;
  j["episodes"] = n;
  j["checkpoint"] = bundle_path;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& variants_csv, int seeds,
              const std::string& out_dir) {
  RunConfig base = parse_config(config_path);
  const std::vector<std::string> variants = split_list(variants_csv);
  if (variants.empty()) throw ConfigError("sweep needs at least one --variant");
  if (seeds < 1) throw ConfigError("sweep needs --seeds >= 1");
  for (const std::string& variant : variants) {
    for (int s = 0; s < seeds; ++s) {
      RunConfig cfg = base;
      cfg.variant = variant;
      cfg.seed = static_cast<std::uint64_t>(s);
      cfg.validate();
      run_one(cfg, out_dir);
    }
  }
  std::cout << "sweep complete: " << variants.size() * static_cast<size_t>(seeds)
            << " runs under " << out_dir << "\n";
  return 0;
}

int cmd_export(const std::vector<std::string>& run_dirs, const std::string& out_file) {
  std::string out =
      "run_id,variant,seed,seed_fraction,env_step,learner_step,eval_success,"
      "bc_action_fraction,mean_q_bc,mean_q_rl,critic_loss,actor_loss\n";
  size_t rows = 0;
  for (const std::string& dir : run_dirs) {
    const RunConfig cfg = parse_config(dir + "/config.json");
    const std::string run_id = fs::path(dir).filename().string();
    char frac[40];
    std::snprintf(frac, sizeof frac, "%.17g", cfg.driver.seed_fraction);
    const std::string prefix =
        run_id + "," + cfg.variant + "," + std::to_string(cfg.seed) + "," + frac + ",";
    std::istringstream metrics(read_text_file(dir + "/metrics.csv"));
    std::string line;
    std::getline(metrics, line);  // header
    while (std::getline(metrics, line)) {
      if (line.empty()) continue;
      out += prefix + line + "\n";
      ++rows;
    }
  }
  if (out_file.empty()) {
    std::cout << out;
  } else {
    std::ofstream f(out_file);
    if (!f) throw PathError("cannot write " + out_file);
    f << out;
    std::cout << "wrote " << rows << " rows to " << out_file << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Q2RL: offline-to-online RL with Q-Estimation and Q-Gating"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = default_root();
  std::string variant;
  std::uint64_t seed = 0;
  int episodes = 50;

  auto* gen = app.add_subcommand("gen-demos", "Collect scripted-teacher demonstrations");
  gen->add_option("--config", config_path, "Config JSON (defaults when omitted)");
  gen->add_option("--episodes", episodes, "Successful episodes to keep");
  auto* gen_seed = gen->add_option("--seed", seed, "Seed override");
  gen->add_option("--out", out_dir, "Output directory");

  auto* tbc = app.add_subcommand("train-bc", "Fit the BC policy to demonstrations");
  tbc->add_option("--config", config_path, "Config JSON")->required();
  auto* tbc_seed = tbc->add_option("--seed", seed, "Seed override");
  tbc->add_option("--out", out_dir, "Output directory");

  auto* est = app.add_subcommand("estimate-q", "Rollouts, value fit, and the frozen Q estimate");
  est->add_option("--config", config_path, "Config JSON")->required();
  auto* est_seed = est->add_option("--seed", seed, "Seed override");
  est->add_option("--out", out_dir, "Output directory");

  auto* train = app.add_subcommand("train", "Full pipeline: offline phase plus the online loop");
  train->add_option("--config", config_path, "Config JSON")->required();
  auto* train_seed = train->add_option("--seed", seed, "Seed override");
  train->add_option("--variant", variant, "Variant override");
  train->add_option("--out", out_dir, "Run directory root");

  auto* ev = app.add_subcommand("eval", "Evaluate a run's best checkpoint");
  ev->add_option("--config", config_path, "Run directory config.json")->required();
  auto* ev_episodes = ev->add_option("--episodes", episodes, "Evaluation episodes");
  auto* ev_seed = ev->add_option("--seed", seed, "Seed override");

  std::string sweep_variants;
  int sweep_seeds = 3;
  auto* sw = app.add_subcommand("sweep", "Variant x seed grid of training runs");
  sw->add_option("--config", config_path, "Config JSON")->required();
  sw->add_option("--variant", sweep_variants, "Comma-separated variants")->required();
  sw->add_option("--seeds", sweep_seeds, "Seeds per variant (0..N-1)");
  sw->add_option("--out", out_dir, "Run directory root");

  std::vector<std::string> export_dirs;
  std::string export_out;
  auto* ex = app.add_subcommand("export", "Flatten run metrics into one long-format CSV");
  ex->add_option("run_dirs", export_dirs, "Run directories")->required();
  ex->add_option("--out", export_out, "Output CSV (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_demos(config_path, episodes, seed, gen_seed->count() > 0, out_dir);
    if (tbc->parsed()) return cmd_train_bc(config_path, seed, tbc_seed->count() > 0, out_dir);
    if (est->parsed()) return cmd_estimate_q(config_path, seed, est_seed->count() > 0, out_dir);
    if (train->parsed())
      return cmd_train(config_path, seed, train_seed->count() > 0, variant, out_dir);
    if (ev->parsed())
      return cmd_eval(config_path, episodes, ev_episodes->count() > 0, seed,
                      ev_seed->count() > 0);
    if (sw->parsed()) return cmd_sweep(config_path, sweep_variants, sweep_seeds, out_dir);
    if (ex->parsed()) return cmd_export(export_dirs, export_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
