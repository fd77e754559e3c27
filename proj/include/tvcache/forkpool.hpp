// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/sandbox.hpp"
#include "tvcache/snapshot.hpp"

#include <json.hpp>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace tvcache {

/// Counting semaphore with first-come-first-served admission. Records the
/// highest number of permits ever held at once.
class RateLimiter {
 public:
  explicit RateLimiter(std::size_t max_concurrent);

  class Permit {
   public:
    Permit() = default;
    explicit Permit(RateLimiter* owner) : owner_(owner) {}
    Permit(Permit&& other) noexcept : owner_(std::exchange(other.owner_, nullptr)) {}
    Permit& operator=(Permit&& other) noexcept;
    ~Permit() { reset(); }
    void reset();

   private:
    RateLimiter* owner_ = nullptr;
  };

  Permit acquire();

  std::size_t capacity() const { return capacity_; }
  std::size_t in_flight() const;
  std::size_t high_water() const;
  std::size_t waiting() const;

 private:
  void release();

  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
  std::size_t high_water_ = 0;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t serving_ = 0;  // smallest ticket not yet admitted
};

struct ForkPoolConfig {
  std::size_t root_pool_size = 8;
  std::size_t max_concurrent_forks = 4;
  bool prewarm_enabled = true;
  std::size_t prewarm_budget = 8;  // per task
  std::size_t worker_threads = 2;
  std::size_t start_retries = 2;
};

/// Identifies a snapshot-bearing node. Prewarmed sandboxes are keyed by task
/// and snapshot id; the node id is kept for accounting.
struct NodeKey {
  std::string task_id;
  std::uint64_t node_id = 0;
  std::string snapshot_id;
};

struct PoolStats {
  std::size_t warm_root_count = 0;
  std::size_t prewarmed_count = 0;
  std::size_t in_flight_forks = 0;
  std::size_t max_in_flight_forks = 0;
  std::uint64_t proactive_hits = 0;
  std::uint64_t reactive_forks = 0;
  std::uint64_t background_instantiations = 0;
  std::uint64_t prewarm_failures = 0;
  std::uint64_t discarded_prewarms = 0;
  std::uint64_t root_starts = 0;
};

nlohmann::json to_json(const PoolStats& stats);

/// Supplies sandboxes: warm clean roots, prewarmed restores of snapshot
/// nodes, and synchronous fallbacks. Every backend start/restore goes
/// through one rate limiter.
class ForkPool {
 public:
  using SnapshotLoader = std::function<std::string(const NodeKey& key)>;

  ForkPool(Environment& env, ForkPoolConfig config, SnapshotLoader loader, CostModel* cost_model = nullptr);
  ~ForkPool();

  ForkPool(const ForkPool&) = delete;
  ForkPool& operator=(const ForkPool&) = delete;

  Environment& environment() { return env_; }
  const ForkPoolConfig& config() const { return config_; }

  /// Blocks until at least `count` warm roots are queued.
  void warm_roots(std::size_t count);

  /// A clean sandbox; warm if one is queued, otherwise started now.
  SandboxHandle acquire_root();

  /// Restores `key` in the background and registers it; no-op if one is
  /// registered or pending, or the task's prewarm budget is used up.
  void prewarm_for_node(const NodeKey& key);

  /// Same as prewarm_for_node but counted as a background instantiation of
  /// a just-stored snapshot, and retried once on failure.
  void background_instantiate(const NodeKey& key);

  /// Takes the prewarmed sandbox for `key`, or restores one synchronously.
  /// Throws SnapshotMissing when the snapshot no longer loads.
  SandboxHandle acquire_for_node(const NodeKey& key);

  /// Registers a live sandbox whose state equals `key`'s snapshot. Returns
  /// false (and stops it) if the slot is taken or over budget.
  bool adopt(const NodeKey& key, const SandboxHandle& handle);

  /// Forgets a snapshot: stops its prewarmed sandbox and cancels pending work.
  void discard_node(const std::string& task_id, const std::string& snapshot_id);

  /// Waits until no background work is queued or running.
  void quiesce();

  /// quiesce() then stops every pooled sandbox.
  void drain();

  PoolStats stats() const;
  std::size_t live_pooled() const;
  const RateLimiter& limiter() const { return limiter_; }

 private:
  struct Entry {
    std::string task_id;
    std::uint64_t node_id = 0;
    std::optional<SandboxHandle> handle;  // empty while pending
    std::uint64_t token = 0;
  };

  SandboxHandle start_root();
  SandboxHandle restore_now(const NodeKey& key);
  static std::string slot_key(const std::string& task_id, const std::string& snapshot_id);
  void schedule_prewarm(const NodeKey& key, bool background, int attempts);
  void maybe_replenish_locked();
  void submit(std::function<void()> job);
  void worker_loop();
  void stop_quietly(const SandboxHandle& h);
  std::size_t task_prewarms_locked(const std::string& task_id) const;

  Environment& env_;
  ForkPoolConfig config_;
  SnapshotLoader loader_;
  CostModel* cost_model_;
  RateLimiter limiter_;

  mutable std::mutex mu_;
  std::condition_variable idle_cv_;
  std::deque<SandboxHandle> roots_;
  std::size_t roots_pending_ = 0;
  std::map<std::string, Entry> prewarmed_;  // by slot_key
  std::uint64_t next_token_ = 1;

  std::deque<std::function<void()>> jobs_;
  std::size_t running_jobs_ = 0;
  std::condition_variable jobs_cv_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  std::atomic<std::uint64_t> proactive_hits_{0}, reactive_forks_{0}, background_instantiations_{0},
      prewarm_failures_{0}, discarded_prewarms_{0}, root_starts_{0};
};

}  // namespace tvcache
