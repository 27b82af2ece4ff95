#include "eos/backoff.hpp"

#if defined(__linux__)
#include <sys/prctl.h>
#endif

namespace eos {

void tighten_timer_slack() noexcept {
#if defined(__linux__)
  prctl(PR_SET_TIMERSLACK, 1000UL, 0, 0, 0);
#endif
}

}  // namespace eos
