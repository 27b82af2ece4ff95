#ifndef EOS_BACKOFF_HPP
#define EOS_BACKOFF_HPP

#include <chrono>
#include <cstdint>
#include <thread>

namespace eos {

inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#elif defined(__aarch64__)
  asm volatile("yield");
#endif
}

// Lowers the calling thread's timer slack so short sleeps wake on time.
void tighten_timer_slack() noexcept;

// Idle policy for polling roles: spin briefly, then yield, then park in short
// sleeps so an idle context wakes within a bounded delay.
class IdleBackoff {
 public:
  static constexpr std::uint32_t kSpins = 64;
  static constexpr std::uint32_t kYields = 64;

  explicit IdleBackoff(std::chrono::microseconds park = std::chrono::microseconds(20)) : park_(park) {}

  void reset() noexcept { idle_ = 0; }
  void idle() noexcept {
    if (idle_ < kSpins) {
      cpu_relax();
    } else if (idle_ < kSpins + kYields) {
      std::this_thread::yield();
    } else {
      std::this_thread::sleep_for(park_);
    }
    ++idle_;
  }

 private:
  std::chrono::microseconds park_;
  std::uint32_t idle_ = 0;
};

}  // namespace eos

#endif  // EOS_BACKOFF_HPP
