#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

#include "q2rl/bc.hpp"
#include "q2rl/errors.hpp"
#include "q2rl/rng.hpp"

namespace q2rl {

enum class ActionSource { kBc, kRl, kDemo };

std::string action_source_name(ActionSource s);

struct Transition {
  Eigen::VectorXd s;
  Eigen::VectorXd a;
  double r = 0.0;  // already shaped
  Eigen::VectorXd s_next;
  bool terminal = false;
  bool truncated = false;
  ActionSource source = ActionSource::kRl;
};

// Column-stacked view of sampled transitions (rows are samples).
struct TransitionBatch {
  Eigen::MatrixXd s;
  Eigen::MatrixXd a;
  Eigen::VectorXd r;
  Eigen::MatrixXd s_next;
  Eigen::VectorXd terminal;  // 1.0 when terminal (no bootstrap), else 0.0
  std::vector<ActionSource> source;

  int size() const { return static_cast<int>(s.rows()); }
};

// Bounded FIFO store with uniform sampling (with replacement). Single-writer.
class ReplayBuffer {
 public:
  ReplayBuffer(int obs_dim, int action_dim, size_t capacity);

  void push(const Transition& t);
  size_t size() const { return storage_.size(); }
  size_t capacity() const { return capacity_; }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }

  // Logical index: 0 = oldest surviving transition.
  const Transition& at(size_t i) const;

  // k uniform draws with replacement; k may exceed the stored count.
  TransitionBatch sample(int k, Rng& rng) const;

  // Counts by source tag, indexed by ActionSource order (bc, rl, demo).
  std::array<size_t, 3> counts_by_source() const { return counts_; }

 private:
  int obs_dim_;
  int action_dim_;
  size_t capacity_;
  size_t head_ = 0;  // next write position once full
  std::vector<Transition> storage_;
  std::array<size_t, 3> counts_{0, 0, 0};
};

struct RewardShaper;  // sac module

// Pushes every demo transition with shaped reward and source=demo; the final
// step of a successful demo is terminal. Returns the number pushed.
size_t seed_from_demos(ReplayBuffer& buffer, const DemoDataset& data, const RewardShaper& shaper);

}  // namespace q2rl
