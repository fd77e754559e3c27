// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>

namespace tvcache {

using SteadyClock = std::chrono::steady_clock;
using SteadyTime = SteadyClock::time_point;

/// Injectable monotonic clock; tests substitute a manual one.
using ClockFn = std::function<SteadyTime()>;

inline double elapsed_ms(SteadyTime since, SteadyTime until = SteadyClock::now()) {
  return std::chrono::duration<double, std::milli>(until - since).count();
}

inline std::int64_t unix_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

/// Manually advanced clock for deterministic TTL tests.
class ManualClock {
 public:
  SteadyTime now() const { return now_; }
  void advance(SteadyClock::duration d) { now_ += d; }
  ClockFn fn() {
    return [this] { return now_; };
  }

 private:
  SteadyTime now_ = SteadyTime{} + std::chrono::hours(1);
};

}  // namespace tvcache
