#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>

#include "q2rl/errors.hpp"

namespace q2rl {

// Bounded FIFO message channel between the actor and learner workers.
// send() blocks while full and returns false once the channel is closed;
// receive() blocks while empty and returns nullopt once closed and drained.
// Closing is idempotent and wakes every waiter, so either side can trigger a
// clean shutdown.
template <typename T>
class Channel {
 public:
  explicit Channel(size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw InputError("Channel: capacity must be positive");
  }

  bool send(T value) {
    std::unique_lock<std::mutex> lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || queue_.size() < capacity_; });
    if (closed_) return false;
    queue_.push_back(std::move(value));
    ++sent_;
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> receive() {
    std::unique_lock<std::mutex> lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    T out = std::move(queue_.front());
    queue_.pop_front();
    not_full_.notify_one();
    return out;
  }

  std::optional<T> try_receive() {
    std::lock_guard<std::mutex> lock(mu_);
    if (queue_.empty()) return std::nullopt;
    T out = std::move(queue_.front());
    queue_.pop_front();
    not_full_.notify_one();
    return out;
  }

  void close() {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  bool is_closed() const {
    std::lock_guard<std::mutex> lock(mu_);
    return closed_;
  }

  size_t sent() const {
    std::lock_guard<std::mutex> lock(mu_);
    return sent_;
  }

 private:
  size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> queue_;
  bool closed_ = false;
  size_t sent_ = 0;
};

}  // namespace q2rl
