// SPDX-License-Identifier: Apache-2.0
// In-process cache + pool + executor bundle shared by executor-level tests.
#pragma once

#include "tvcache/cache.hpp"
#include "tvcache/executor.hpp"
#include "tvcache/forkpool.hpp"
#include "tvcache/sandbox.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace tvcache::testing {

/// Drives the EMA estimates for `kind` to roughly `ms` each.
inline void prime_cost(CostModel& cost, std::string_view kind, double ms, int rounds = 200) {
  for (int i = 0; i < rounds; ++i) {
    cost.observe_serialize(kind, ms);
    cost.observe_restore(kind, ms);
  }
}

struct Rig {
  explicit Rig(Environment& env, ExecutorOptions ex_options = {}, LocalCacheOptions cache_options = {},
               ForkPoolConfig pool_config = small_pool())
      : cache(std::move(cache_options)),
        pool(env, pool_config, [this](const NodeKey& k) { return cache.load_snapshot(k.task_id, k.snapshot_id); },
             &cache.cost_model()),
        executor(cache, pool, ex_options) {
    cache.set_release_hook([this](const std::string& task, const std::string& id) { pool.discard_node(task, id); });
  }

  ~Rig() {
    cache.set_release_hook({});
    pool.drain();
  }

  static ForkPoolConfig small_pool() {
    ForkPoolConfig c;
    c.root_pool_size = 2;
    c.worker_threads = 1;
    return c;
  }

  /// Runs one rollout and returns the per-call results.
  std::vector<ToolResult> rollout(const std::string& task, const Trajectory& calls, RolloutReport* report = nullptr) {
    auto s = executor.start_rollout(task);
    std::vector<ToolResult> out;
    for (const auto& d : calls) out.push_back(s->call_tool(d));
    auto r = s->end_rollout();
    if (report != nullptr) *report = r;
    return out;
  }

  LocalCache cache;
  ForkPool pool;
  Executor executor;
};

/// Independent oracle: a fresh sandbox, every call executed in order.
inline std::vector<ToolResult> oracle_replay(Environment& env, const Trajectory& t) {
  const SandboxHandle h = env.start();
  std::vector<ToolResult> out;
  for (const auto& d : t) out.push_back(env.execute(h, d));
  env.stop(h);
  return out;
}

/// File-tree calls over a tiny alphabet so trajectories overlap often.
inline ToolDescriptor small_filetree_call(std::mt19937_64& rng, const Environment& env) {
  static const char* paths[] = {"a", "b"};
  static const char* contents[] = {"x", "y"};
  const auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  switch (pick(5)) {
    case 0:
      return env.describe("write", {{"path", paths[pick(2)]}, {"content", contents[pick(2)]}});
    case 1:
      return env.describe("append", {{"path", paths[pick(2)]}, {"content", "z"}});
    case 2:
      return env.describe("read", {{"path", paths[pick(2)]}});
    case 3:
      return env.describe("ls", nlohmann::json::object());
    default:
      return env.describe("rm", {{"path", paths[pick(2)]}});
  }
}

}  // namespace tvcache::testing
