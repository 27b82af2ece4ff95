#ifndef EOS_SPSC_QUEUE_HPP
#define EOS_SPSC_QUEUE_HPP

#include <atomic>
#include <cstddef>
#include <memory>
#include <optional>
#include <type_traits>
#include <vector>

#include "eos/common.hpp"

namespace eos {

// Bounded single-producer/single-consumer queue for small trivially copyable
// records (scheduler events, control requests, egress references).
// Both ends are wait-free: every call completes in a constant number of steps.
template <class T>
class SpscQueue {
  static_assert(std::is_trivially_copyable_v<T>);

 public:
  explicit SpscQueue(std::size_t capacity) : capacity_(capacity), mask_(capacity - 1) {
    if (!is_power_of_two(capacity)) throw Error(Errc::kInvalidArgument, "queue capacity must be a power of two");
    buffer_ = std::make_unique<T[]>(capacity);
  }

  SpscQueue(const SpscQueue&) = delete;
  SpscQueue& operator=(const SpscQueue&) = delete;

  bool try_push(const T& value) noexcept {
    const std::size_t tail = tail_.load(std::memory_order_relaxed);
    if (tail - head_cache_ >= capacity_) {
      head_cache_ = head_.load(std::memory_order_acquire);
      if (tail - head_cache_ >= capacity_) return false;
    }
    buffer_[tail & mask_] = value;
    tail_.store(tail + 1, std::memory_order_release);
    return true;
  }

  std::optional<T> try_pop() noexcept {
    const std::size_t head = head_.load(std::memory_order_relaxed);
    if (head == tail_cache_) {
      tail_cache_ = tail_.load(std::memory_order_acquire);
      if (head == tail_cache_) return std::nullopt;
    }
    T value = buffer_[head & mask_];
    head_.store(head + 1, std::memory_order_release);
    return value;
  }

  bool empty() const noexcept {
    return head_.load(std::memory_order_acquire) == tail_.load(std::memory_order_acquire);
  }
  std::size_t size() const noexcept {
    return tail_.load(std::memory_order_acquire) - head_.load(std::memory_order_acquire);
  }
  std::size_t capacity() const noexcept { return capacity_; }

 private:
  const std::size_t capacity_;
  const std::size_t mask_;
  std::unique_ptr<T[]> buffer_;

  alignas(kCacheLine) std::atomic<std::size_t> head_{0};
  std::size_t tail_cache_ = 0;  // consumer-local
  alignas(kCacheLine) std::atomic<std::size_t> tail_{0};
  std::size_t head_cache_ = 0;  // producer-local
};

// Fan-in of per-producer SPSC queues. Each producer identity owns one port;
// the single consumer drains the ports in index order.
template <class T>
class FanIn {
 public:
  FanIn(std::size_t producers, std::size_t capacity) {
    ports_.reserve(producers);
    for (std::size_t i = 0; i < producers; ++i) ports_.push_back(std::make_unique<SpscQueue<T>>(capacity));
  }

  SpscQueue<T>& port(std::size_t producer) { return *ports_.at(producer); }
  std::size_t producers() const noexcept { return ports_.size(); }

  template <class F>
  std::size_t drain(F&& fn) {
    std::size_t n = 0;
    for (auto& port : ports_) {
      while (auto v = port->try_pop()) {
        fn(*v);
        ++n;
      }
    }
    return n;
  }

  bool empty() const noexcept {
    for (const auto& port : ports_)
      if (!port->empty()) return false;
    return true;
  }

 private:
  std::vector<std::unique_ptr<SpscQueue<T>>> ports_;
};

}  // namespace eos

#endif  // EOS_SPSC_QUEUE_HPP
