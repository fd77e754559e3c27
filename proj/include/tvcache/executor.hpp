// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/cache.hpp"
#include "tvcache/descriptor.hpp"
#include "tvcache/forkpool.hpp"
#include "tvcache/result.hpp"
#include "tvcache/sandbox.hpp"

#include <json.hpp>

#include <atomic>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace tvcache {

struct ExecutorOptions {
  MatchMode mode = MatchMode::strict;
  bool snapshots_enabled = true;
  bool background_instantiate = true;
};

/// One decision taken by a session. Kinds: hit, miss, prefix_match, fork,
/// root, execute, snapshot_decision, lease_released, lease_error,
/// insert_error, cache_unavailable, sandbox_error.
struct ExecEvent {
  std::string kind;
  std::string task_id;
  std::uint64_t session_id = 0;
  std::size_t call_index = 0;  // which call_tool invocation
  std::size_t position = 0;    // index within the executed sequence
  std::string tool;
  std::optional<NodeId> node_id;
  std::size_t matched_len = 0;
  std::size_t snapshot_depth = 0;
  double exec_ms = 0;
  double overhead_ms = 0;
  bool snapshotted = false;
  std::string snapshot_id;
  std::string detail;
};

nlohmann::json to_json(const ExecEvent& event);

/// Thread-safe event collector.
class EventLog {
 public:
  void add(const ExecEvent& e);
  std::vector<ExecEvent> events() const;
  std::function<void(const ExecEvent&)> sink();

 private:
  mutable std::mutex mu_;
  std::vector<ExecEvent> events_;
};

struct RolloutReport {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::size_t executed_tools = 0;
  std::size_t replayed_tools = 0;  // executions of steps before the requested one
  double total_tool_ms = 0;        // exec_ms summed over executed tools
  double saved_ms_estimate = 0;    // exec_ms of hits minus time spent in lookups
  double lookup_ms = 0;
  std::size_t leases_acquired = 0;
  std::size_t leases_released = 0;
  std::size_t cache_errors = 0;
};

nlohmann::json to_json(const RolloutReport& report);

class Executor;

/// One rollout's view of the cache. Single-threaded.
class RolloutSession {
 public:
  RolloutSession(Executor& executor, std::string task_id, std::uint64_t id);
  ~RolloutSession();

  RolloutSession(const RolloutSession&) = delete;
  RolloutSession& operator=(const RolloutSession&) = delete;
  RolloutSession(RolloutSession&&) = delete;

  ToolResult call_tool(const ToolDescriptor& descriptor);
  RolloutReport end_rollout();

  const std::string& task_id() const { return task_id_; }
  std::uint64_t id() const { return id_; }
  const Trajectory& history() const { return history_; }
  bool has_sandbox() const { return sandbox_.has_value(); }
  const RolloutReport& report() const { return report_; }

 private:
  ToolResult run_from_root(TrajectoryView seq, const PrefixMatchReply* match);
  ToolResult run_step(TrajectoryView put_path, std::size_t position);
  ToolResult execute_guarded(const ToolDescriptor& d);
  std::optional<NodeId> insert(TrajectoryView path, const ToolResult& r, const std::optional<std::string>& snap);
  void backfill();
  void release_lease(const std::string& lease_id);
  void emit(ExecEvent e);
  void drop_sandbox();

  Executor& ex_;
  std::string task_id_;
  std::uint64_t id_;
  Trajectory history_;
  std::vector<ToolResult> results_;
  std::optional<SandboxHandle> sandbox_;
  bool diverged_ = false;
  bool offline_ = false;
  bool ended_ = false;
  std::optional<NodeKey> last_snapshot_;  // snapshot of the sandbox's current state
  double hit_exec_ms_ = 0;
  RolloutReport report_;
};

/// Runs rollouts against a cache and a fork pool.
class Executor {
 public:
  Executor(CacheClient& cache, ForkPool& pool, ExecutorOptions options = {});

  std::unique_ptr<RolloutSession> start_rollout(std::string task_id);

  void set_event_sink(std::function<void(const ExecEvent&)> sink) { sink_ = std::move(sink); }

  CacheClient& cache() { return cache_; }
  ForkPool& pool() { return pool_; }
  Environment& environment() { return pool_.environment(); }
  const ExecutorOptions& options() const { return options_; }

 private:
  friend class RolloutSession;

  CacheClient& cache_;
  ForkPool& pool_;
  ExecutorOptions options_;
  std::function<void(const ExecEvent&)> sink_;
  std::atomic<std::uint64_t> next_session_{1};
};

/// Negative control: a hash table keyed by (task, tool descriptor) alone,
/// ignoring what ran before. It returns stale values after a mutation.
class StatelessControlCache {
 public:
  std::optional<ToolResult> get(const std::string& task_id, const ToolDescriptor& d) const;
  void put(const std::string& task_id, const ToolDescriptor& d, const ToolResult& r);

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, ToolResult> entries_;
};

class ControlSession {
 public:
  ControlSession(StatelessControlCache& cache, Environment& env, std::string task_id);
  ~ControlSession();
  ToolResult call_tool(const ToolDescriptor& descriptor);
  std::size_t hits() const { return hits_; }

 private:
  StatelessControlCache& cache_;
  Environment& env_;
  std::string task_id_;
  std::optional<SandboxHandle> sandbox_;
  std::size_t hits_ = 0;
};

/// Executes one call. Malformed arguments become a deterministic tool_error
/// result; other failures propagate.
ToolResult execute_tool(Environment& env, const SandboxHandle& handle, const ToolDescriptor& descriptor);

/// Runs `trajectory` in a fresh sandbox and returns every step's result;
/// the reference the cache must reproduce.
std::vector<ToolResult> fresh_replay(Environment& env, TrajectoryView trajectory);

}  // namespace tvcache
