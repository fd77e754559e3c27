// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/cache.hpp"
#include "tvcache/descriptor.hpp"
#include "tvcache/executor.hpp"
#include "tvcache/forkpool.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tvcache::bench {

/// Bimodal tool cost: fast_ms, or slow_ms with probability slow_frac.
struct CostMix {
  double fast_ms = 0;
  double slow_ms = 0;
  double slow_frac = 0;

  double sample(std::mt19937_64& rng) const;
};

struct LengthRange {
  std::size_t min = 8;
  std::size_t max = 8;
};

struct WorkloadSpec {
  std::size_t tasks = 4;
  std::size_t rollouts_per_task = 8;
  std::size_t epochs = 1;
  LengthRange trajectory_len;  // drawn once per task
  double branch_prob = 0.15;   // per step
  std::size_t branch_fanout = 3;  // alternatives at a divergence; 0 = each divergence is new
  CostMix tool_cost;
  double stateless_frac = 0.25;
  std::uint64_t seed = 1;

  MatchMode mode = MatchMode::strict;
  bool snapshots = true;
  double snapshot_ms = 0;  // backend serialize latency
  double restore_ms = 0;   // backend restore latency
  std::size_t snapshot_budget = 8;
  bool group_rollouts = false;  // a task's rollouts in one epoch run concurrently
  std::size_t parallel_tasks = 4;
};

/// Throws std::invalid_argument.
void validate(const WorkloadSpec& spec);
nlohmann::json to_json(const WorkloadSpec& spec);
/// Missing keys keep their defaults.
WorkloadSpec workload_from_json(const nlohmann::json& j);
WorkloadSpec load_workload(const std::filesystem::path& file);

struct Rollout {
  std::size_t epoch = 0;
  std::size_t task = 0;
  std::size_t index = 0;
  std::string task_id;
  Trajectory calls;
  std::size_t divergence_depth = 0;  // first step off the task's spine; calls.size() if none
};

struct Workload {
  WorkloadSpec spec;
  std::vector<Rollout> rollouts;  // ordered by (epoch, task, index)
};

/// Each rollout follows its task's spine and leaves it at each step with
/// probability branch_prob, picking one of branch_fanout alternatives. A
/// call is a pure function of (seed, task, choices so far), so equal
/// choice prefixes give equal trajectories.
Workload generate(const WorkloadSpec& spec);

struct EpochCount {
  std::size_t hits = 0;
  std::size_t calls = 0;
};

/// What a sequential per-task replay must report: a call hits iff an
/// earlier rollout of the same task issued the same prefix.
std::vector<EpochCount> prefix_hits_by_epoch(const Workload& workload);

/// The `cost_ms` argument of a generated call.
double call_cost_ms(const ToolDescriptor& d);

double quantile(std::vector<double> values, double q);  // linear interpolation
double median(std::vector<double> values);

class BenchMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  CacheClient* cache = nullptr;  // nullptr: a fresh in-process LocalCache
  std::function<void(const ExecEvent&)> events;
  bool verify = true;  // hard gate against a fresh replay of every rollout
  bool background_instantiate = true;
  ForkPoolConfig pool;
};

struct RunReport {
  bool cached = false;
  WorkloadSpec spec;
  std::size_t calls = 0;
  std::size_t hits = 0;
  std::vector<double> hit_rate_by_epoch;
  std::vector<double> call_ms;               // generation order
  std::vector<std::uint8_t> call_hit;        // generation order
  std::vector<std::uint64_t> result_digest;  // fnv1a64 of status and payload
  double median_tool_ms = 0;
  double p95_tool_ms = 0;
  std::vector<double> rollout_wall_ms;
  std::vector<double> batch_wall_ms;  // one batch per epoch
  std::size_t executed_tools = 0;
  std::size_t replayed_tools = 0;
  std::size_t snapshots_taken = 0;
  std::size_t verified_calls = 0;
  double overhead_estimate_ms = 0;  // snapshot cost estimate after warm-up
  double wall_ms = 0;

  double hit_rate() const { return calls == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(calls); }
};

nlohmann::json to_json(const RunReport& report);  // per-call arrays omitted
RunReport run_report_from_json(const nlohmann::json& j);

/// Replays the workload through the executor (cached) or straight against
/// fresh sandboxes (uncached). Throws BenchMismatch when a cached result
/// differs from the fresh replay.
RunReport run(const Workload& workload, bool cached, const RunOptions& options = {});
RunReport run(const WorkloadSpec& spec, bool cached, const RunOptions& options = {});

/// Measures snapshot serialize and restore on `env` and feeds `cost`.
void calibrate_snapshot_cost(Environment& env, CostModel& cost, int rounds = 3);

/// Per-call latency of hits in a rehearsal of the workload. With
/// time_scale > 0 every tool, snapshot and restore cost is multiplied by it
/// and the threading is kept; with 0 the rehearsal runs on one thread with
/// every cost and snapshotting off. `options.cache` must not be the cache of
/// the measured run.
std::vector<double> calibrate_hit_latency(const Workload& workload, double time_scale = 0.0,
                                          const RunOptions& options = {});

/// Median wall time of executing a call of nominal cost fast_ms, minus fast_ms.
double calibrate_exec_overhead(double fast_ms, int rounds = 15);

struct SpeedupExpectation {
  double hit_rate = 0;
  double uncached_median_ms = 0;
  double cached_median_ms = 0;
  double speedup = 0;
};

nlohmann::json to_json(const SpeedupExpectation& e);

/// Median per-call time with and without the cache, from the exact hit
/// pattern of the traces, each call's nominal cost plus exec_overhead_ms on
/// a miss, and the hit latency distribution on a hit.
SpeedupExpectation expected_speedup(const Workload& workload, const std::vector<double>& hit_latency_ms,
                                    double exec_overhead_ms);

struct BenchReport {
  std::vector<double> hit_rate_by_epoch;
  double median_tool_ms_cached = 0;
  double median_tool_ms_uncached = 0;
  double speedup = 0;  // median_uncached / median_cached
  std::vector<double> rollout_wall_ms_cached, rollout_wall_ms_uncached;
  std::vector<double> batch_wall_ms_cached, batch_wall_ms_uncached;
  double rollout_savings = 0;  // 1 - total cached / total uncached rollout time
  double batch_savings = 0;
  nlohmann::json p95_get_latency_by_rps = nlohmann::json::array();
};

BenchReport compare(const RunReport& uncached, const RunReport& cached);
nlohmann::json to_json(const BenchReport& report);

/// Rows of "label, no-cache ms/call, cache ms/call, speedup".
std::string speedup_table(const std::vector<std::pair<std::string, BenchReport>>& rows);

/// One row per call: rollout,epoch,task,position,ms,hit.
void write_calls_csv(const RunReport& report, const Workload& workload, const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Server latency

struct SweepCell {
  std::size_t shards = 1;
  double offered_rps = 0;
  double achieved_rps = 0;
  std::size_t requests = 0;
  std::size_t errors = 0;
  std::size_t misses = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  double p99_ms = 0;
  bool saturated = false;  // achieved < 95% of offered
};

nlohmann::json to_json(const SweepCell& cell);

/// Shards of the cache service running in this process on free ports.
class LocalCluster {
 public:
  explicit LocalCluster(std::size_t shards, std::size_t threads_per_shard = 8);
  ~LocalCluster();
  std::vector<std::string> addresses() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// `keys` (task, trajectory) pairs preloaded into a cache deployment; each
/// task is a chain and every prefix of it is a key.
class KeyCorpus {
 public:
  KeyCorpus(std::vector<std::string> addresses, std::size_t keys, std::uint64_t seed = 7);

  /// Writes every key through the wire protocol.
  void preload();
  std::size_t size() const { return bodies_.size(); }
  const std::vector<std::string>& addresses() const { return addresses_; }

  /// Open-loop /get load at `rps` for `duration_s`. Latency runs from each
  /// request's scheduled send time to its reply.
  SweepCell measure(double rps, double duration_s, std::size_t senders = 8);

 private:
  std::vector<std::string> addresses_;
  std::vector<std::string> task_ids_;
  std::vector<std::size_t> shard_of_;
  std::vector<std::string> bodies_;  // /get request bodies
  std::vector<std::pair<std::string, Trajectory>> keys_;
};

struct SweepOptions {
  std::vector<double> rps = {1, 64, 256};
  std::vector<std::size_t> shards = {1, 2, 4};
  std::size_t keys = 8192;
  double duration_s = 10;
  std::size_t senders = 8;  // keep at or below threads_per_shard
  std::size_t threads_per_shard = 8;
};

std::vector<SweepCell> latency_sweep(const SweepOptions& options);

/// Highest offered rate, stepping by `growth` from `start_rps`, at which the
/// deployment is unsaturated with P95 under `p95_budget_ms`. Returns the
/// probes in order; the answer is the last probe that passed.
std::vector<SweepCell> find_max_rps(KeyCorpus& corpus, double p95_budget_ms, double start_rps, double growth,
                                    double probe_s, std::size_t senders = 8);
double max_passing_rps(const std::vector<SweepCell>& probes, double p95_budget_ms);

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Golden traces

/// Runs `cases` rollouts through the executor over HTTP against a fresh
/// in-process server and records every request as {step, endpoint,
/// request, response} JSON lines. Background prewarming is off so the
/// line order is deterministic.
std::size_t write_golden_trace(const std::filesystem::path& file, std::size_t cases = 200, std::uint64_t seed = 11);

}  // namespace tvcache::bench
