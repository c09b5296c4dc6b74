#include "q2rl/replay.hpp"

#include "q2rl/sac.hpp"

namespace q2rl {

std::string action_source_name(ActionSource s) {
  switch (s) {
    case ActionSource::kBc: return "bc";
    case ActionSource::kRl: return "rl";
    case ActionSource::kDemo: return "demo";
  }
  throw InputError("action_source_name: bad enum");
}

ReplayBuffer::ReplayBuffer(int obs_dim, int action_dim, size_t capacity)
    : obs_dim_(obs_dim), action_dim_(action_dim), capacity_(capacity) {
  if (obs_dim < 1 || action_dim < 1) throw InputError("ReplayBuffer: bad dims");
  if (capacity < 1) throw InputError("ReplayBuffer: capacity must be >= 1");
}

void ReplayBuffer::push(const Transition& t) {
  if (t.s.size() != obs_dim_ || t.s_next.size() != obs_dim_ || t.a.size() != action_dim_)
    throw ShapeError("ReplayBuffer::push: transition does not match buffer schema");
  if (t.terminal && t.truncated)
    throw InputError("ReplayBuffer::push: terminal and truncated are exclusive");
  counts_[static_cast<size_t>(t.source)] += 1;
  if (storage_.size() < capacity_) {
    storage_.push_back(t);
    return;
  }
  counts_[static_cast<size_t>(storage_[head_].source)] -= 1;
  storage_[head_] = t;
  head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(size_t i) const {
  if (i >= storage_.size()) throw InputError("ReplayBuffer::at: index out of range");
  if (storage_.size() < capacity_) return storage_[i];
  return storage_[(head_ + i) % capacity_];
}

TransitionBatch ReplayBuffer::sample(int k, Rng& rng) const {
  if (k < 1) throw InputError("ReplayBuffer::sample: k must be >= 1");
  if (storage_.empty()) throw NotReadyError("ReplayBuffer::sample: buffer is empty");
  TransitionBatch batch;
  batch.s.resize(k, obs_dim_);
  batch.a.resize(k, action_dim_);
  batch.s_next.resize(k, obs_dim_);
  batch.r.resize(k);
  batch.terminal.resize(k);
  batch.source.resize(k);
  for (int i = 0; i < k; ++i) {
    const Transition& t = storage_[rng.uniform_int(static_cast<int>(storage_.size()))];
    batch.s.row(i) = t.s.transpose();
    batch.a.row(i) = t.a.transpose();
    batch.s_next.row(i) = t.s_next.transpose();
    batch.r[i] = t.r;
    batch.terminal[i] = t.terminal ? 1.0 : 0.0;
    batch.source[i] = t.source;
  }
  return batch;
}

size_t seed_from_demos(ReplayBuffer& buffer, const DemoDataset& data, const RewardShaper& shaper) {
  if (data.empty()) return 0;
  data.validate();
  if (data.obs_dim() != buffer.obs_dim() || data.action_dim() != buffer.action_dim())
    throw InputError("seed_from_demos: dataset dimensions do not match buffer");
  size_t count = 0;
  for (const auto& traj : data.trajectories) {
    for (int i = 0; i < traj.length(); ++i) {
      Transition t;
      t.s = traj.obs[i];
      t.a = traj.actions[i];
      t.r = shape_reward(shaper, traj.rewards[i]);
      t.s_next = traj.obs[i + 1];
      const bool last = i == traj.length() - 1;
      t.terminal = last && traj.terminated;
      t.truncated = last && !traj.terminated;
      t.source = ActionSource::kDemo;
      buffer.push(t);
      ++count;
    }
  }
  return count;
}

}  // namespace q2rl
