// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion. Exit 0 iff all pass.

#include "../support/process.hpp"
#include "../support/rig.hpp"

#include "tvcache/bench.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/remote_cache.hpp"
#include "tvcache/server.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <random>
#include <set>
#include <thread>

using namespace tvcache;
using namespace tvcache::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
  json data = json::object();
};

struct Criterion {
  std::string id;
  std::string title;
  std::function<Outcome()> run;
};

bool same_values(const std::vector<ToolResult>& a, const std::vector<ToolResult>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_value(b[i])) return false;
  return true;
}

double seconds_since(SteadyTime t0) { return elapsed_ms(t0) / 1000.0; }

/// Rollouts of a workload interleaved across tasks: rollout 0 of every task,
/// then rollout 1, and so on.
std::vector<const bench::Rollout*> interleaved(const bench::Workload& w) {
  std::vector<const bench::Rollout*> out;
  const std::size_t per_task = w.spec.rollouts_per_task;
  for (std::size_t e = 0; e < w.spec.epochs; ++e)
    for (std::size_t r = 0; r < per_task; ++r)
      for (std::size_t t = 0; t < w.spec.tasks; ++t)
        out.push_back(&w.rollouts[(e * w.spec.tasks + t) * per_task + r]);
  return out;
}

// ---------------------------------------------------------------------------

Outcome correctness_oracle() {
  constexpr std::size_t kSets = 1000;
  const auto t0 = SteadyClock::now();
  auto env = make_environment("filetree", {{"cost_scale", 0.0}});
  std::size_t rollouts = 0, calls = 0, mismatches = 0, hits = 0, lpm_hits = 0;
  std::string first_mismatch;
  const double branch[] = {0.05, 0.15, 0.3, 0.6};
  const std::size_t fanout[] = {2, 3, 0};
  for (std::size_t s = 0; s < kSets; ++s) {
    bench::WorkloadSpec spec;
    spec.tasks = 4;
    spec.rollouts_per_task = 8;
    spec.trajectory_len = {1, 12};
    spec.branch_prob = branch[s % 4];
    spec.branch_fanout = fanout[s % 3];
    spec.tool_cost = {0, 0, 0};
    spec.seed = 10'000 + s;
    const bench::Workload w = bench::generate(spec);

    ExecutorOptions eo;
    eo.mode = s % 5 == 4 ? MatchMode::stateful_skip : MatchMode::strict;
    LocalCacheOptions co;
    co.snapshot_budget = 2 + s % 7;
    Rig rig(*env, eo, co);
    // Snapshot every step, none, or whatever a tiny threshold lets through.
    if (s % 3 == 0) prime_cost(rig.cache.cost_model(), env->kind(), 0.0);
    if (s % 3 == 2) prime_cost(rig.cache.cost_model(), env->kind(), 0.001);
    for (const bench::Rollout* ro : interleaved(w)) {
      const auto got = rig.rollout(ro->task_id, ro->calls);
      const auto want = oracle_replay(*env, ro->calls);
      ++rollouts;
      calls += ro->calls.size();
      if (!same_values(got, want)) {
        if (mismatches++ == 0) first_mismatch = fmt::format("set {} task {} rollout {}", s, ro->task_id, ro->index);
      }
    }
    const json st = rig.cache.stats()["global"];
    hits += st["hits"].get<std::size_t>();
    lpm_hits += st["lpm_hits"].get<std::size_t>();
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = mismatches == 0 && secs <= 300 && hits > 0 && lpm_hits > 0;
  o.detail = fmt::format("{} sets, {} rollouts, {} calls, {} mismatches, {} hits, {} snapshot resumes, {:.0f}s{}", kSets,
                         rollouts, calls, mismatches, hits, lpm_hits, secs,
                         first_mismatch.empty() ? "" : "; first: " + first_mismatch);
  o.data = {{"sets", kSets},       {"rollouts", rollouts}, {"calls", calls},       {"mismatches", mismatches},
            {"hits", hits},        {"lpm_hits", lpm_hits}, {"seconds", secs}};
  return o;
}

Outcome staleness_control() {
  FileTreeSandbox env({.seed = {{"f", "old"}}});
  const Trajectory calls = {env.describe("read", {{"path", "f"}}),
                            env.describe("write", {{"path", "f"}, {"content", "new"}}),
                            env.describe("read", {{"path", "f"}})};
  Rig rig(env);
  const auto first = rig.rollout("stale", calls);
  const auto second = rig.rollout("stale", calls);  // all hits

  StatelessControlCache control;
  std::vector<ToolResult> ctl;
  {
    ControlSession cs(control, env, "stale");
    for (const auto& d : calls) ctl.push_back(cs.call_tool(d));
  }
  const bool cache_ok = first[0].payload == "old" && first[2].payload == "new" && second[0].payload == "old" &&
                        second[2].payload == "new";
  const bool control_stale = ctl[0].payload == "old" && ctl[2].payload == "old";
  Outcome o;
  o.passed = cache_ok && control_stale;
  o.detail = fmt::format("cache reads {}/{} then {}/{} (hits on replay); control reads {}/{}",
                         json(first[0].payload).dump(), json(first[2].payload).dump(), json(second[0].payload).dump(),
                         json(second[2].payload).dump(), json(ctl[0].payload).dump(), json(ctl[2].payload).dump());
  return o;
}

Outcome hit_rate() {
  const auto t0 = SteadyClock::now();
  bench::WorkloadSpec flat;
  flat.tasks = 4;
  flat.rollouts_per_task = 8;
  flat.trajectory_len = {8, 8};
  flat.branch_prob = 0;
  flat.tool_cost = {0, 0, 0};
  flat.seed = 21;
  const bench::RunReport a = bench::run(flat, true);
  const bool exact = a.hits * 8 == a.calls * 7;

  bench::WorkloadSpec grow;
  grow.tasks = 256;
  grow.rollouts_per_task = 8;
  grow.epochs = 11;  // 10 transitions
  grow.trajectory_len = {12, 12};
  grow.branch_prob = 0.15;
  grow.branch_fanout = 3;
  grow.tool_cost = {0, 0, 0};
  grow.seed = 22;
  const bench::Workload w = bench::generate(grow);
  const bench::RunReport b = bench::run(w, true);
  const auto counted = bench::prefix_hits_by_epoch(w);
  bool matches_count = true;
  std::size_t non_decreasing = 0;
  for (std::size_t e = 0; e < counted.size(); ++e) {
    const double want = static_cast<double>(counted[e].hits) / static_cast<double>(counted[e].calls);
    if (std::abs(want - b.hit_rate_by_epoch[e]) > 1e-12) matches_count = false;
    if (e > 0 && b.hit_rate_by_epoch[e] >= b.hit_rate_by_epoch[e - 1]) ++non_decreasing;
  }
  const double secs = seconds_since(t0);
  std::string curve;
  for (double h : b.hit_rate_by_epoch) curve += fmt::format("{}{:.3f}", curve.empty() ? "" : " ", h);
  Outcome o;
  o.passed = exact && non_decreasing >= 8 && matches_count && secs <= 120;
  o.detail = fmt::format("flat: {}/{} = {:.4f} (7/8 {}); growth over 11 epochs: [{}], {}/10 non-decreasing, {} the "
                         "prefix count; {:.0f}s",
                         a.hits, a.calls, a.hit_rate(), exact ? "exact" : "NOT exact", curve, non_decreasing,
                         matches_count ? "equal to" : "DIFFERENT from", secs);
  o.data = {{"flat_hits", a.hits},
            {"flat_calls", a.calls},
            {"hit_rate_by_epoch", b.hit_rate_by_epoch},
            {"non_decreasing_transitions", non_decreasing},
            {"seconds", secs}};
  return o;
}

struct SpeedupRun {
  bench::SpeedupExpectation expected;
  bench::RunReport uncached, cached;
  bench::BenchReport report;
  std::vector<ExecEvent> events;
  std::map<std::string, std::vector<NodeInfo>> snapshot_nodes;  // task -> nodes with a snapshot
  double seconds = 0;
};

SpeedupRun& speedup_run() {
  static SpeedupRun run = [] {
    SpeedupRun r;
    const auto t0 = SteadyClock::now();
    bench::WorkloadSpec spec;
    spec.tasks = 4;
    spec.rollouts_per_task = 8;
    spec.trajectory_len = {8, 8};
    spec.branch_prob = 0.05;
    spec.branch_fanout = 2;
    spec.tool_cost = {5, 2000, 0.2};
    spec.snapshot_ms = 50;
    spec.restore_ms = 50;
    spec.seed = 31;
    spec.parallel_tasks = 4;
    const bench::Workload w = bench::generate(spec);

    // The cache runs as a service over HTTP, as deployed. The expectation
    // comes first, from the traces and a rehearsal on a separate server.
    ServerConfig sc;
    sc.listen_address = "127.0.0.1:0";
    sc.default_snapshot_budget = spec.snapshot_budget;
    auto remote_for = [](const Server& s) {
      RemoteCacheOptions o;
      o.addresses = {"127.0.0.1:" + std::to_string(s.port())};
      return o;
    };
    {
      Server rehearsal(sc);
      rehearsal.start();
      RemoteCache rc(remote_for(rehearsal));
      bench::RunOptions ro;
      ro.cache = &rc;
      const auto hit_latency = bench::calibrate_hit_latency(w, 0.1, ro);
      const double exec_overhead = bench::calibrate_exec_overhead(spec.tool_cost.fast_ms);
      r.expected = bench::expected_speedup(w, hit_latency, exec_overhead);
      rehearsal.stop();
    }

    r.uncached = bench::run(w, false);
    Server server(sc);
    server.start();
    RemoteCache rc(remote_for(server));
    EventLog log;
    bench::RunOptions opt;
    opt.cache = &rc;
    opt.events = log.sink();
    r.cached = bench::run(w, true, opt);
    for (const auto& id : server.cache().task_ids())
      for (const auto& n : server.cache().graph(id)->nodes())
        if (n.snapshot) r.snapshot_nodes[id].push_back(n);
    server.stop();
    r.events = log.events();
    r.report = bench::compare(r.uncached, r.cached);
    r.seconds = seconds_since(t0);
    return r;
  }();
  return run;
}

Outcome speedup() {
  const SpeedupRun& r = speedup_run();
  const double ratio = r.expected.speedup > 0 ? r.report.speedup / r.expected.speedup : 0.0;
  Outcome o;
  o.passed = r.cached.hit_rate() >= 0.4 && r.report.speedup >= 3.0 && std::abs(ratio - 1.0) <= 0.25 &&
             r.seconds <= 600;
  o.detail = fmt::format(
      "expected {:.2f}x (median {:.3f} -> {:.3f} ms); measured {:.2f}x (median {:.3f} -> {:.3f} ms), {:+.1f}% off; "
      "hit rate {:.3f}; snapshot overhead estimate {:.1f} ms; {:.0f}s",
      r.expected.speedup, r.expected.uncached_median_ms, r.expected.cached_median_ms, r.report.speedup,
      r.report.median_tool_ms_uncached, r.report.median_tool_ms_cached, (ratio - 1.0) * 100.0, r.cached.hit_rate(),
      r.cached.overhead_estimate_ms, r.seconds);
  o.data = {{"expected", bench::to_json(r.expected)}, {"measured", bench::to_json(r.report)},
            {"hit_rate", r.cached.hit_rate()},        {"overhead_estimate_ms", r.cached.overhead_estimate_ms},
            {"seconds", r.seconds}};
  return o;
}

Outcome snapshot_policy() {
  const SpeedupRun& r = speedup_run();
  std::size_t decisions = 0, taken = 0, declined = 0, violations = 0, declined_above = 0;
  std::map<std::string, const ExecEvent*> by_snapshot;
  for (const auto& e : r.events) {
    if (e.kind != "snapshot_decision") continue;
    ++decisions;
    const bool above = e.exec_ms > e.overhead_ms;
    if (e.snapshotted) {
      ++taken;
      by_snapshot[e.snapshot_id] = &e;
      if (!above) ++violations;
    } else {
      ++declined;
      if (above) ++declined_above;
    }
  }
  std::size_t nodes = 0, unexplained = 0;
  for (const auto& [task, list] : r.snapshot_nodes) {
    for (const auto& n : list) {
      ++nodes;
      auto it = by_snapshot.find(n.snapshot->snapshot_id);
      if (it == by_snapshot.end() || !(it->second->exec_ms > it->second->overhead_ms)) ++unexplained;
    }
  }
  Outcome o;
  o.passed = violations == 0 && unexplained == 0 && taken > 0 && declined > 0;
  o.detail = fmt::format("{} decisions: {} snapshots, {} declined ({} above threshold after a failed snapshot); {} "
                         "snapshot nodes at the end, {} without a qualifying decision; {} violations",
                         decisions, taken, declined, declined_above, nodes, unexplained, violations);
  o.data = {{"decisions", decisions}, {"taken", taken}, {"declined", declined}, {"violations", violations + unexplained}};
  return o;
}

Outcome stateful_equivalence() {
  const auto t0 = SteadyClock::now();
  FileTreeSandbox env({.seed = {{"a", "1"}, {"b", "2"}}});
  const Trajectory alphabet = {env.describe("write", {{"path", "a"}, {"content", "x"}}),
                               env.describe("append", {{"path", "b"}, {"content", "y"}}),
                               env.describe("read", {{"path", "a"}}), env.describe("read", {{"path", "b"}})};
  Rig strict(env, {.mode = MatchMode::strict});
  Rig skip(env, {.mode = MatchMode::stateful_skip});
  prime_cost(strict.cache.cost_model(), env.kind(), 0.0);
  prime_cost(skip.cache.cost_model(), env.kind(), 0.0);
  std::size_t trajectories = 0, mismatches = 0, fewer = 0, strict_hits = 0, skip_hits = 0;
  std::function<void(Trajectory&)> walk = [&](Trajectory& t) {
    if (!t.empty()) {
      ++trajectories;
      RolloutReport a, b;
      const auto x = strict.rollout("eq", t, &a);
      const auto y = skip.rollout("eq", t, &b);
      if (!same_values(x, y) || !same_values(x, oracle_replay(env, t))) ++mismatches;
      if (b.hits < a.hits) ++fewer;
      strict_hits += a.hits;
      skip_hits += b.hits;
    }
    if (t.size() == 6) return;
    for (const auto& d : alphabet) {
      t.push_back(d);
      walk(t);
      t.pop_back();
    }
  };
  Trajectory t;
  walk(t);

  // Two reads swapped ahead of the same write.
  const auto& w = alphabet[0];
  const auto& ra = alphabet[2];
  const auto& rb = alphabet[3];
  Rig s2(env, {.mode = MatchMode::strict});
  Rig k2(env, {.mode = MatchMode::stateful_skip});
  RolloutReport sa, sb, ka, kb;
  s2.rollout("pair", {ra, rb, w, ra}, &sa);
  k2.rollout("pair", {ra, rb, w, ra}, &ka);
  const auto px = s2.rollout("pair", {rb, ra, w, ra}, &sb);
  const auto py = k2.rollout("pair", {rb, ra, w, ra}, &kb);
  const bool pair_ok = same_values(px, py) && kb.hits > sb.hits;

  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = trajectories == 5460 && mismatches == 0 && fewer == 0 && skip_hits >= strict_hits && pair_ok &&
             secs <= 180;
  o.detail = fmt::format("{} trajectories, {} value mismatches, {} rollouts with fewer skip hits; hits strict {} vs "
                         "skip {}; reordered pair hits strict {} vs skip {}; {:.0f}s",
                         trajectories, mismatches, fewer, strict_hits, skip_hits, sb.hits, kb.hits, secs);
  o.data = {{"trajectories", trajectories}, {"mismatches", mismatches}, {"strict_hits", strict_hits},
            {"skip_hits", skip_hits},       {"pair_strict_hits", sb.hits}, {"pair_skip_hits", kb.hits}};
  return o;
}

Outcome latency() {
  bench::LocalCluster cluster(1);
  bench::KeyCorpus corpus(cluster.addresses(), 8192);
  corpus.preload();
  const bench::SweepCell c = corpus.measure(100, 60);
  Outcome o;
  o.passed = c.p95_ms < 10.0 && c.errors == 0 && c.misses == 0 && !c.saturated;
  o.detail = fmt::format("1 shard, {} keys, 100 RPS open-loop for 60 s: {} requests, achieved {:.1f} RPS, P50 {:.3f} "
                         "P95 {:.3f} P99 {:.3f} ms, {} errors, {} misses; {} hardware threads",
                         corpus.size(), c.requests, c.achieved_rps, c.p50_ms, c.p95_ms, c.p99_ms, c.errors, c.misses,
                         std::thread::hardware_concurrency());
  o.data = bench::to_json(c);
  return o;
}

Outcome sharding() {
  json probes = json::object();
  std::map<std::size_t, double> best;
  for (std::size_t shards : {1, 4}) {
    // Client connections stay within one shard's worker threads, so a
    // single shard is never starved of threads and the comparison is
    // about throughput.
    constexpr std::size_t kThreads = 8;
    bench::LocalCluster cluster(shards, kThreads);
    bench::KeyCorpus corpus(cluster.addresses(), 8192);
    corpus.preload();
    const auto p = bench::find_max_rps(corpus, 10.0, 500, 1.25, 4.0, kThreads);
    best[shards] = bench::max_passing_rps(p, 10.0);
    json list = json::array();
    for (const auto& c : p) list.push_back(bench::to_json(c));
    probes[std::to_string(shards)] = list;
  }
  const double ratio = best[1] > 0 ? best[4] / best[1] : 0.0;
  Outcome o;
  o.passed = best[1] > 0 && ratio >= 3.0;
  o.detail = fmt::format("max unsaturated RPS at P95 < 10 ms: 1 shard {:.0f}, 4 shards {:.0f}, ratio {:.2f} (need 3); "
                         "{} hardware threads shared by every shard and the load generator",
                         best[1], best[4], ratio, std::thread::hardware_concurrency());
  o.data = {{"max_rps_1", best[1]}, {"max_rps_4", best[4]}, {"ratio", ratio}, {"probes", probes}};
  return o;
}

Outcome refcount_eviction() {
  constexpr std::size_t kIterations = 10'000;
  constexpr std::size_t kBudget = 3;
  FileTreeSandbox env;
  LocalCacheOptions co;
  co.snapshot_budget = kBudget;
  LocalCache cache(co);
  ForkPoolConfig pc;
  pc.root_pool_size = 2;
  pc.worker_threads = 2;
  pc.prewarm_budget = 4;
  ForkPool pool(env, pc, [&](const NodeKey& k) { return cache.load_snapshot(k.task_id, k.snapshot_id); },
                &cache.cost_model());

  struct Held {
    std::string task, lease, snapshot;
    NodeId node;
  };
  std::mutex mu;
  std::vector<Held> held;
  std::size_t violations = 0, released_while_held = 0;
  cache.set_release_hook([&](const std::string& task, const std::string& snap) {
    pool.discard_node(task, snap);
    std::lock_guard lock(mu);
    for (const auto& h : held)
      if (h.task == task && h.snapshot == snap) ++released_while_held;
  });

  // Trajectories per task, with each prefix's result and sandbox bytes.
  const std::vector<std::string> tasks = {"rc-0", "rc-1"};
  std::mt19937_64 rng(77);
  std::map<std::string, std::vector<Trajectory>> paths;
  for (const auto& t : tasks)
    for (int j = 0; j < 16; ++j) {
      Trajectory p;
      for (int k = 0; k < 4; ++k) p.push_back(small_filetree_call(rng, env));
      paths[t].push_back(p);
    }
  std::map<std::string, std::size_t> inserted;  // task/j -> inserted length
  std::map<std::string, std::string> bytes_of;  // snapshot id -> bytes
  auto state_after = [&](const Trajectory& p) {
    const SandboxHandle h = env.start();
    ToolResult r;
    for (const auto& d : p) r = execute_tool(env, h, d);
    std::string bytes = env.snapshot(h);
    env.stop(h);
    return std::pair{r, bytes};
  };
  const ToolDescriptor probe = env.describe("ls", {});

  std::size_t matches = 0, leases = 0, releases = 0, evictions = 0, prewarms = 0, acquires = 0, drains = 0,
              over_budget = 0, state_mismatch = 0;
  auto check_held = [&] {
    std::lock_guard lock(mu);
    for (const auto& h : held) {
      const auto n = cache.graph(h.task)->node(h.node);
      if (!n || !n->snapshot || n->snapshot->snapshot_id != h.snapshot || n->ref_count == 0) {
        ++violations;
        continue;
      }
      try {
        (void)cache.load_snapshot(h.task, h.snapshot);
      } catch (const std::exception&) {
        ++violations;
      }
    }
  };
  auto drain_and_check = [&] {
    std::vector<Held> all;
    {
      std::lock_guard lock(mu);
      all.swap(held);
    }
    for (const auto& h : all) cache.release(h.task, h.lease);
    for (const auto& t : tasks) {
      TaskGraph* g = cache.graph(t);
      if (g == nullptr) continue;
      g->evict();
      if (g->snapshot_count() > kBudget || g->active_leases() != 0) ++over_budget;
    }
    ++drains;
  };

  for (std::size_t it = 0; it < kIterations; ++it) {
    const std::string& task = tasks[rng() % tasks.size()];
    const std::size_t j = rng() % 16;
    const Trajectory& p = paths[task][j];
    std::size_t& len = inserted[task + "/" + std::to_string(j)];
    switch (rng() % 6) {
      case 0:
      case 1: {  // insert the next step, or re-offer a snapshot for a stored one
        const std::size_t n = len < p.size() ? len + 1 : 1 + rng() % p.size();
        const Trajectory q(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n));
        auto [result, bytes] = state_after(q);
        const SnapshotRef ref = cache.store_snapshot(task, bytes, env.kind(), 0.1);
        bytes_of[ref.snapshot_id] = bytes;
        cache.put(task, q, result, MatchMode::strict, ref.snapshot_id);
        len = std::max(len, n);
        break;
      }
      case 2: {  // prefix match, keeping any lease
        if (len == 0) break;
        Trajectory q(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(1 + rng() % len));
        q.push_back(probe);
        const PrefixMatchReply m = cache.prefix_match(task, q, MatchMode::strict);
        ++matches;
        if (m.lease_id) {
          ++leases;
          std::lock_guard lock(mu);
          held.push_back({task, *m.lease_id, *m.snapshot_id, *m.snapshot_node_id});
        }
        break;
      }
      case 3: {  // release one held lease
        Held h;
        {
          std::lock_guard lock(mu);
          if (held.empty()) break;
          const std::size_t k = rng() % held.size();
          h = held[k];
          held.erase(held.begin() + static_cast<std::ptrdiff_t>(k));
        }
        cache.release(h.task, h.lease);
        ++releases;
        break;
      }
      case 4:
        if (TaskGraph* g = cache.graph(task)) g->evict();
        break;
      default: {  // prewarm a pinned or an arbitrary snapshot node; sometimes consume it
        std::optional<NodeKey> key;
        {
          std::lock_guard lock(mu);
          if (!held.empty() && rng() % 2 == 0) {
            const Held& h = held[rng() % held.size()];
            key = NodeKey{h.task, h.node, h.snapshot};
          }
        }
        if (!key) {
          if (TaskGraph* g = cache.graph(task)) {
            for (const auto& n : g->nodes())
              if (n.snapshot && rng() % 3 == 0) {
                key = NodeKey{task, n.id, n.snapshot->snapshot_id};
                break;
              }
          }
        }
        if (!key) break;
        pool.prewarm_for_node(*key);
        ++prewarms;
        bool pinned = false;
        {
          std::lock_guard lock(mu);
          for (const auto& h : held) pinned = pinned || (h.task == key->task_id && h.snapshot == key->snapshot_id);
        }
        if (pinned && rng() % 2 == 0) {
          const SandboxHandle h = pool.acquire_for_node(*key);
          if (env.snapshot(h) != bytes_of.at(key->snapshot_id)) ++state_mismatch;
          env.stop(h);
          ++acquires;
        }
      }
    }
    check_held();
    if ((it + 1) % 1000 == 0) drain_and_check();
  }
  drain_and_check();
  for (const auto& t : tasks) evictions += cache.graph(t)->stats().evictions;
  pool.quiesce();
  cache.set_release_hook({});
  pool.drain();

  violations += released_while_held + state_mismatch;
  Outcome o;
  o.passed = violations == 0 && over_budget == 0 && leases > 0 && evictions > 0 && acquires > 0;
  o.detail = fmt::format("{} iterations: {} matches ({} leases), {} releases, {} evicted, {} prewarms, {} pinned "
                         "acquires; {} pinned-snapshot violations, {} of {} drains above budget",
                         kIterations, matches, leases, releases, evictions, prewarms, acquires, violations, over_budget,
                         drains);
  o.data = {{"violations", violations}, {"over_budget", over_budget}, {"leases", leases}, {"evictions", evictions}};
  return o;
}

// Forwards to a remote cache and records every acknowledged put.
class RecordingCache : public CacheClient {
 public:
  struct Entry {
    std::string task;
    Trajectory q;
    ToolResult result;
    std::uint64_t instance;
    bool durable = false;
  };

  explicit RecordingCache(RemoteCache& inner) : inner_(inner) {}

  std::atomic<std::uint64_t> instance{0};  // bumped before every kill

  std::optional<ToolResult> get(const std::string& t, TrajectoryView q, MatchMode m) override {
    return inner_.get(t, q, m);
  }
  PrefixMatchReply prefix_match(const std::string& t, TrajectoryView q, MatchMode m) override {
    return inner_.prefix_match(t, q, m);
  }
  NodeId put(const std::string& t, TrajectoryView q, const ToolResult& r, MatchMode m,
             const std::optional<std::string>& s) override {
    const std::uint64_t before = instance.load();
    const NodeId id = inner_.put(t, q, r, m, s);
    // A put that straddles a kill cannot be attributed to one server.
    if (instance.load() == before) {
      std::lock_guard lock(mu_);
      entries_.push_back({t, Trajectory(q.begin(), q.end()), r, before});
    }
    return id;
  }
  void release(const std::string& t, const std::string& l) override { inner_.release(t, l); }
  SnapshotRef store_snapshot(const std::string& t, std::string_view b, std::string_view k, double ms) override {
    return inner_.store_snapshot(t, b, k, ms);
  }
  std::string load_snapshot(const std::string& t, const std::string& id) override {
    return inner_.load_snapshot(t, id);
  }
  CostModel& cost_model() override { return inner_.cost_model(); }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }
  /// Entries [0, mark) acknowledged by `inst` were in the graph when its
  /// persist cycle ran.
  void mark_durable(std::size_t mark, std::uint64_t inst) {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < mark && i < entries_.size(); ++i)
      if (entries_[i].instance == inst) entries_[i].durable = true;
  }
  std::vector<Entry> durable() const {
    std::lock_guard lock(mu_);
    std::vector<Entry> out;
    for (const auto& e : entries_)
      if (e.durable) out.push_back(e);
    return out;
  }

 private:
  RemoteCache& inner_;
  mutable std::mutex mu_;
  std::vector<Entry> entries_;
};

std::string free_address() {
  ServerConfig c;
  c.listen_address = "127.0.0.1:0";
  Server s(c);
  s.start();
  const std::string a = "127.0.0.1:" + std::to_string(s.port());
  s.stop();
  return a;
}

Outcome persistence(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "tvcache binary not found: '" + cli + "'"};
  const auto t0 = SteadyClock::now();
  const fs::path dir = fs::temp_directory_path() / fmt::format("tvc-accept-persist-{}", ::getpid());
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string addr = free_address();

  std::size_t corrupt = 0, restarts = 0, start_failures = 0;
  auto start = [&]() -> std::unique_ptr<Child> {
    for (int attempt = 0; attempt < 50; ++attempt) {
      auto c = std::make_unique<Child>(std::vector<std::string>{cli, "serve", "--listen", addr, "--persist-dir",
                                                                dir.string(), "--persist-interval-s", "1",
                                                                "--lease-ttl-s", "30"});
      const std::string line = c->read_line();
      if (!line.empty()) {
        HttpEndpoint ep(addr);
        const HttpReply r = ep.send("GET", "/stats");
        corrupt += json::parse(r.body)["global"]["corrupt_graphs"].get<std::size_t>();
        return c;
      }
      ++start_failures;  // port still held; retry
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    throw std::runtime_error("server did not start on " + addr);
  };

  auto server = start();
  RemoteCacheOptions ro;
  ro.addresses = {addr};
  ro.timeout = std::chrono::milliseconds(2000);
  ro.retries = 0;
  RemoteCache remote(ro);
  RecordingCache rec(remote);
  prime_cost(rec.cost_model(), "filetree", 1.0);  // the 20 ms calls get snapshots

  auto env = make_environment("filetree");
  auto oracle_env = make_environment("filetree", {{"cost_scale", 0.0}});
  ForkPoolConfig pc;
  pc.root_pool_size = 2;
  pc.worker_threads = 1;
  ForkPool pool(*env, pc, [&](const NodeKey& k) { return rec.load_snapshot(k.task_id, k.snapshot_id); },
                &rec.cost_model());
  Executor ex(rec, pool, ExecutorOptions{});

  bench::WorkloadSpec spec;
  spec.tasks = 8;
  spec.rollouts_per_task = 8;
  spec.epochs = 40;
  spec.trajectory_len = {4, 10};
  spec.branch_prob = 0.2;
  spec.branch_fanout = 3;
  spec.tool_cost = {1, 20, 0.2};
  spec.seed = 41;
  const bench::Workload w = bench::generate(spec);

  std::atomic<bool> stop{false};
  std::atomic<std::size_t> rollouts{0}, mismatches{0}, cache_errors{0};
  std::atomic<std::size_t> client_errors{0};
  std::string first_client_error;
  std::mutex err_mu;
  auto client = [&](std::size_t from, std::size_t step) {
    for (std::size_t i = from; !stop; i = (i + step) % w.rollouts.size()) try {
      const bench::Rollout& ro = w.rollouts[i];
      auto s = ex.start_rollout(ro.task_id);
      std::vector<ToolResult> got;
      for (const auto& d : ro.calls) got.push_back(s->call_tool(d));
      cache_errors += s->end_rollout().cache_errors;
      std::vector<ToolResult> want;
      {
        const SandboxHandle h = oracle_env->start();
        for (const auto& d : ro.calls) want.push_back(execute_tool(*oracle_env, h, d));
        oracle_env->stop(h);
      }
      if (!same_values(got, want)) ++mismatches;
      ++rollouts;
    } catch (const std::exception& e) {
      std::lock_guard lock(err_mu);
      if (client_errors++ == 0) first_client_error = e.what();
    }
  };
  std::vector<std::thread> clients;
  for (std::size_t k = 0; k < 4; ++k) clients.emplace_back(client, k * 64, 4);

  // Every 2 s a persist cycle is requested; every 10 s the server dies.
  std::size_t cycles = 0, kills = 0;
  const auto deadline = SteadyClock::now() + std::chrono::seconds(120);
  auto next_kill = SteadyClock::now() + std::chrono::seconds(10);
  while (SteadyClock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::seconds(2));
    const std::size_t mark = rec.size();
    const std::uint64_t inst = rec.instance.load();
    try {
      HttpEndpoint ep(addr, std::chrono::milliseconds(5000));
      if (ep.send("POST", "/persist").status == 200 && rec.instance.load() == inst) {
        rec.mark_durable(mark, inst);
        ++cycles;
      }
    } catch (const std::exception&) {
    }
    if (SteadyClock::now() >= next_kill) {
      ++rec.instance;
      server->kill(SIGKILL);
      server->wait();
      ++kills;
      server = start();
      ++restarts;
      next_kill += std::chrono::seconds(10);
    }
  }
  stop = true;
  for (auto& t : clients) t.join();

  // Final crash and restart, then every durable entry must be served.
  ++rec.instance;
  server->kill(SIGKILL);
  server->wait();
  ++kills;
  server = start();
  ++restarts;
  const auto durable = rec.durable();
  std::size_t missing = 0, wrong = 0;
  for (const auto& e : durable) {
    const auto got = remote.get(e.task, e.q, MatchMode::strict);
    if (!got)
      ++missing;
    else if (!got->same_value(e.result))
      ++wrong;
  }
  // The oracle once more against the restored server.
  const std::size_t before = rollouts.load();
  {
    std::thread final_pass([&] {
      for (std::size_t i = 0; i < 128; ++i) {
        const bench::Rollout& ro = w.rollouts[i];
        auto s = ex.start_rollout(ro.task_id);
        std::vector<ToolResult> got;
        for (const auto& d : ro.calls) got.push_back(s->call_tool(d));
        s->end_rollout();
        if (!same_values(got, oracle_replay(*oracle_env, ro.calls))) ++mismatches;
        ++rollouts;
      }
    });
    final_pass.join();
  }
  const std::size_t final_rollouts = rollouts.load() - before;
  server->kill(SIGTERM);
  server->wait();
  pool.drain();
  fs::remove_all(dir);

  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = missing == 0 && wrong == 0 && corrupt == 0 && mismatches == 0 && client_errors == 0 && !durable.empty() &&
             kills >= 12;
  o.detail = fmt::format("{} kill -9 restarts over {:.0f}s, {} rollouts ({} after the last restart), {} persist cycles "
                         "acknowledged, {} durable entries: {} missing, {} wrong; {} corrupt graphs; {} oracle "
                         "mismatches; {} failed rollouts{}",
                         kills, secs, rollouts.load(), final_rollouts, cycles, durable.size(), missing, wrong, corrupt,
                         mismatches.load(), client_errors.load(),
                         first_client_error.empty() ? "" : " (first: " + first_client_error + ")");
  o.data = {{"kills", kills},       {"cycles", cycles}, {"durable", durable.size()}, {"missing", missing},
            {"wrong", wrong},       {"corrupt", corrupt}, {"mismatches", mismatches.load()},
            {"rollouts", rollouts.load()}, {"start_retries", start_failures}, {"cache_errors", cache_errors.load()}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tvcache acceptance gate"};
  std::string cli, report_file, only;
  app.add_option("--cli", cli, "path to the tvcache binary");
  app.add_option("--report", report_file, "write results as JSON here");
  app.add_option("--only", only, "comma-separated criterion ids");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  const std::vector<Criterion> criteria = {
      {"correctness", "correctness oracle: cached results equal fresh execution", correctness_oracle},
      {"staleness", "staleness negative control", staleness_control},
      {"hit-rate", "hit-rate arithmetic and growth over epochs", hit_rate},
      {"speedup", "median per-call speedup against the closed form", speedup},
      {"equivalence", "stateful matching equivalence, exhaustive to length 6", stateful_equivalence},
      {"latency", "P95 /get latency at 100 RPS", latency},
      {"sharding", "throughput scaling with 4 shards", sharding},
      {"refcount", "refcount and eviction safety", refcount_eviction},
      {"persistence", "persistence across kill -9", [&] { return persistence(cli); }},
      {"snapshot-policy", "selective snapshot policy", snapshot_policy},
  };
  std::set<std::string> selected;
  for (std::size_t a = 0, b; a <= only.size(); a = b + 1) {
    b = only.find(',', a);
    if (b == std::string::npos) b = only.size();
    if (b > a) selected.insert(only.substr(a, b - a));
  }

  json results = json::array();
  std::size_t failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && selected.count(c.id) == 0) continue;
    const auto t0 = SteadyClock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (!o.passed) ++failed;
    std::cout << fmt::format("{} [{}] {}: {}", o.passed ? "PASS" : "FAIL", c.id, c.title, o.detail) << std::endl;
    results.push_back({{"id", c.id}, {"passed", o.passed}, {"detail", o.detail}, {"seconds", secs}, {"data", o.data}});
  }
  std::cout << fmt::format("acceptance: {} of {} criteria passed", results.size() - failed, results.size())
            << std::endl;
  if (!report_file.empty()) std::ofstream(report_file) << results.dump(2) << "\n";
  return failed == 0 ? 0 : 1;
}
