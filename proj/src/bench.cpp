// SPDX-License-Identifier: Apache-2.0
#include "tvcache/bench.hpp"

#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"
#include "tvcache/remote_cache.hpp"
#include "tvcache/sandbox.hpp"
#include "tvcache/server.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_set>

namespace tvcache::bench {

namespace fs = std::filesystem;

double CostMix::sample(std::mt19937_64& rng) const {
  if (slow_frac <= 0) return fast_ms;
  return std::bernoulli_distribution(slow_frac)(rng) ? slow_ms : fast_ms;
}

// ---------------------------------------------------------------------------
// Spec

namespace {

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(fmt::format("{} must be in [0, 1], got {}", name, p));
}

void check_ms(double ms, const char* name) {
  if (!(ms >= 0.0 && ms <= 600000.0)) throw std::invalid_argument(fmt::format("{} must be in [0, 600000] ms", name));
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<T>();
}

}  // namespace

void validate(const WorkloadSpec& s) {
  if (s.tasks == 0) throw std::invalid_argument("tasks must be positive");
  if (s.rollouts_per_task == 0) throw std::invalid_argument("rollouts_per_task must be positive");
  if (s.epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (s.trajectory_len.min == 0 || s.trajectory_len.min > s.trajectory_len.max)
    throw std::invalid_argument("trajectory_len needs 1 <= min <= max");
  check_probability(s.branch_prob, "branch_prob");
  check_probability(s.stateless_frac, "stateless_frac");
  check_probability(s.tool_cost.slow_frac, "tool_cost.slow_frac");
  check_ms(s.tool_cost.fast_ms, "tool_cost.fast_ms");
  check_ms(s.tool_cost.slow_ms, "tool_cost.slow_ms");
  check_ms(s.snapshot_ms, "snapshot_ms");
  check_ms(s.restore_ms, "restore_ms");
  if (s.snapshot_budget == 0) throw std::invalid_argument("snapshot_budget must be positive");
  if (s.parallel_tasks == 0) throw std::invalid_argument("parallel_tasks must be positive");
}

nlohmann::json to_json(const WorkloadSpec& s) {
  return {{"tasks", s.tasks},
          {"rollouts_per_task", s.rollouts_per_task},
          {"epochs", s.epochs},
          {"trajectory_len", {{"min", s.trajectory_len.min}, {"max", s.trajectory_len.max}}},
          {"branch_prob", s.branch_prob},
          {"branch_fanout", s.branch_fanout},
          {"tool_cost", {{"fast_ms", s.tool_cost.fast_ms}, {"slow_ms", s.tool_cost.slow_ms}, {"slow_frac", s.tool_cost.slow_frac}}},
          {"stateless_frac", s.stateless_frac},
          {"seed", s.seed},
          {"mode", to_string(s.mode)},
          {"snapshots", s.snapshots},
          {"snapshot_ms", s.snapshot_ms},
          {"restore_ms", s.restore_ms},
          {"snapshot_budget", s.snapshot_budget},
          {"group_rollouts", s.group_rollouts},
          {"parallel_tasks", s.parallel_tasks}};
}

WorkloadSpec workload_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("workload spec must be a JSON object");
  WorkloadSpec s;
  try {
    read_field(j, "tasks", s.tasks);
    read_field(j, "rollouts_per_task", s.rollouts_per_task);
    read_field(j, "epochs", s.epochs);
    if (auto it = j.find("trajectory_len"); it != j.end()) {
      if (it->is_number()) {
        s.trajectory_len.min = s.trajectory_len.max = it->get<std::size_t>();
      } else {
        read_field(*it, "min", s.trajectory_len.min);
        read_field(*it, "max", s.trajectory_len.max);
      }
    }
    read_field(j, "branch_prob", s.branch_prob);
    read_field(j, "branch_fanout", s.branch_fanout);
    if (auto it = j.find("tool_cost"); it != j.end()) {
      read_field(*it, "fast_ms", s.tool_cost.fast_ms);
      read_field(*it, "slow_ms", s.tool_cost.slow_ms);
      read_field(*it, "slow_frac", s.tool_cost.slow_frac);
    }
    read_field(j, "stateless_frac", s.stateless_frac);
    read_field(j, "seed", s.seed);
    if (auto it = j.find("mode"); it != j.end()) s.mode = parse_match_mode(it->get<std::string>());
    read_field(j, "snapshots", s.snapshots);
    read_field(j, "snapshot_ms", s.snapshot_ms);
    read_field(j, "restore_ms", s.restore_ms);
    read_field(j, "snapshot_budget", s.snapshot_budget);
    read_field(j, "group_rollouts", s.group_rollouts);
    read_field(j, "parallel_tasks", s.parallel_tasks);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad workload spec: ") + e.what());
  }
  validate(s);
  return s;
}

WorkloadSpec load_workload(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::invalid_argument("cannot read workload spec " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("workload spec " + file.string() + " is not JSON: " + e.what());
  }
  return workload_from_json(j);
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

ToolDescriptor make_call(const WorkloadSpec& s, std::size_t task, const std::string& choices) {
  static const char* paths[] = {"a", "b", "c", "d"};
  static const char* contents[] = {"x", "y", "zz", "w"};
  const std::uint64_t h = fnv1a64(fmt::format("{}|{}|{}", s.seed, task, choices));
  std::mt19937_64 rng(h);
  const bool stateless = std::bernoulli_distribution(s.stateless_frac)(rng);
  const double cost = s.tool_cost.sample(rng);
  const std::string path = paths[rng() % 4];
  const std::string content = contents[rng() % 4];
  nlohmann::json args = {{"cost_ms", cost}, {"tag", to_hex(h).substr(8)}};
  if (stateless) {
    if (rng() % 2 == 0) {
      args["path"] = path;
      return ToolDescriptor::make("read", args, false);
    }
    return ToolDescriptor::make("ls", args, false);
  }
  args["path"] = path;
  args["content"] = content;
  return ToolDescriptor::make(rng() % 3 == 0 ? "append" : "write", args, true);
}

std::string prefix_key(const Trajectory& calls, std::size_t len) {
  std::string k;
  for (std::size_t i = 0; i < len; ++i) {
    k += calls[i].key();
    k += '\x1e';
  }
  return k;
}

}  // namespace

Workload generate(const WorkloadSpec& spec) {
  validate(spec);
  Workload w{spec, {}};
  std::vector<std::size_t> lengths(spec.tasks);
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    auto rng = seeded({spec.seed, t, 0x6c656e});
    lengths[t] = std::uniform_int_distribution<std::size_t>(spec.trajectory_len.min, spec.trajectory_len.max)(rng);
  }
  std::uint64_t fresh = spec.branch_fanout;  // ids past the fanout are never reused
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    for (std::size_t t = 0; t < spec.tasks; ++t) {
      for (std::size_t r = 0; r < spec.rollouts_per_task; ++r) {
        auto rng = seeded({spec.seed, t, e, r});
        std::bernoulli_distribution diverge(spec.branch_prob);
        Rollout ro{e, t, r, fmt::format("bench-{}-{}", spec.seed, t), {}, lengths[t]};
        std::string choices;
        for (std::size_t i = 0; i < lengths[t]; ++i) {
          std::uint64_t c = 0;
          if (diverge(rng)) {
            c = spec.branch_fanout > 0
                    ? std::uniform_int_distribution<std::uint64_t>(1, spec.branch_fanout)(rng)
                    : ++fresh;
            if (ro.divergence_depth == lengths[t]) ro.divergence_depth = i;
          }
          choices += std::to_string(c);
          choices += '.';
          ro.calls.push_back(make_call(spec, t, choices));
        }
        w.rollouts.push_back(std::move(ro));
      }
    }
  }
  return w;
}

std::vector<EpochCount> prefix_hits_by_epoch(const Workload& w) {
  std::vector<EpochCount> out(w.spec.epochs);
  std::vector<std::unordered_set<std::string>> seen(w.spec.tasks);
  for (const Rollout& ro : w.rollouts) {
    auto& s = seen[ro.task];
    for (std::size_t len = 1; len <= ro.calls.size(); ++len) {
      if (s.count(prefix_key(ro.calls, len)) != 0) ++out[ro.epoch].hits;
      ++out[ro.epoch].calls;
    }
    for (std::size_t len = 1; len <= ro.calls.size(); ++len) s.insert(prefix_key(ro.calls, len));
  }
  return out;
}

double call_cost_ms(const ToolDescriptor& d) {
  const nlohmann::json args = d.args();
  auto it = args.find("cost_ms");
  return it != args.end() && it->is_number() ? it->get<double>() : 0.0;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  q = std::clamp(q, 0.0, 1.0);
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

// ---------------------------------------------------------------------------
// Replay

nlohmann::json to_json(const RunReport& r) {
  return {{"cached", r.cached},
          {"spec", to_json(r.spec)},
          {"calls", r.calls},
          {"hits", r.hits},
          {"hit_rate", r.hit_rate()},
          {"hit_rate_by_epoch", r.hit_rate_by_epoch},
          {"median_tool_ms", r.median_tool_ms},
          {"p95_tool_ms", r.p95_tool_ms},
          {"rollout_wall_ms", r.rollout_wall_ms},
          {"batch_wall_ms", r.batch_wall_ms},
          {"executed_tools", r.executed_tools},
          {"replayed_tools", r.replayed_tools},
          {"snapshots_taken", r.snapshots_taken},
          {"verified_calls", r.verified_calls},
          {"overhead_estimate_ms", r.overhead_estimate_ms},
          {"wall_ms", r.wall_ms}};
}

RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    r.cached = j.at("cached").get<bool>();
    r.spec = workload_from_json(j.at("spec"));
    r.calls = j.at("calls").get<std::size_t>();
    r.hits = j.at("hits").get<std::size_t>();
    r.hit_rate_by_epoch = j.at("hit_rate_by_epoch").get<std::vector<double>>();
    r.median_tool_ms = j.at("median_tool_ms").get<double>();
    r.p95_tool_ms = j.value("p95_tool_ms", 0.0);
    r.rollout_wall_ms = j.at("rollout_wall_ms").get<std::vector<double>>();
    r.batch_wall_ms = j.at("batch_wall_ms").get<std::vector<double>>();
    r.executed_tools = j.value("executed_tools", std::size_t{0});
    r.replayed_tools = j.value("replayed_tools", std::size_t{0});
    r.snapshots_taken = j.value("snapshots_taken", std::size_t{0});
    r.verified_calls = j.value("verified_calls", std::size_t{0});
    r.overhead_estimate_ms = j.value("overhead_estimate_ms", 0.0);
    r.wall_ms = j.value("wall_ms", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad run report: ") + e.what());
  }
  return r;
}

void calibrate_snapshot_cost(Environment& env, CostModel& cost, int rounds) {
  std::vector<double> ser, res;
  const SandboxHandle h = env.start();
  for (int i = 0; i < rounds; ++i) {
    auto t0 = SteadyClock::now();
    const std::string bytes = env.snapshot(h);
    ser.push_back(elapsed_ms(t0));
    t0 = SteadyClock::now();
    const SandboxHandle copy = env.restore(bytes);
    res.push_back(elapsed_ms(t0));
    env.stop(copy);
  }
  env.stop(h);
  // drive the moving averages from the cold default to the measured medians
  const double s = median(ser), r = median(res);
  for (int i = 0; i < 200; ++i) {
    cost.observe_serialize(env.kind(), s);
    cost.observe_restore(env.kind(), r);
  }
}

namespace {

std::uint64_t digest(const ToolResult& r) {
  return fnv1a64(std::string(to_string(r.status)) + '\0' + r.payload);
}

RunReport run_with(const Workload& w, bool cached, const RunOptions& opt, double cost_scale) {
  const WorkloadSpec& spec = w.spec;
  validate(spec);
  auto env = make_environment(
      "filetree", {{"snapshot_ms", spec.snapshot_ms}, {"restore_ms", spec.restore_ms}, {"cost_scale", cost_scale}});
  auto oracle_env = make_environment("filetree", {{"cost_scale", 0.0}});

  RunReport rep;
  rep.cached = cached;
  rep.spec = spec;
  const std::size_t n = w.rollouts.size();
  std::vector<std::size_t> base(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) base[i + 1] = base[i] + w.rollouts[i].calls.size();
  rep.calls = base[n];
  rep.call_ms.assign(rep.calls, 0.0);
  rep.call_hit.assign(rep.calls, 0);
  rep.result_digest.assign(rep.calls, 0);
  rep.rollout_wall_ms.assign(n, 0.0);

  std::unique_ptr<LocalCache> local;
  CacheClient* cache = opt.cache;
  std::unique_ptr<ForkPool> pool;
  std::unique_ptr<Executor> ex;
  std::atomic<std::size_t> snapshots{0}, executed{0}, replayed{0}, verified{0};
  if (cached) {
    if (cache == nullptr) {
      LocalCacheOptions lo;
      lo.snapshot_budget = spec.snapshot_budget;
      local = std::make_unique<LocalCache>(std::move(lo));
      cache = local.get();
    }
    if (spec.snapshots) calibrate_snapshot_cost(*env, cache->cost_model());
    rep.overhead_estimate_ms = cache->cost_model().overhead_ms(env->kind());
    pool = std::make_unique<ForkPool>(
        *env, opt.pool, [cache](const NodeKey& k) { return cache->load_snapshot(k.task_id, k.snapshot_id); },
        &cache->cost_model());
    if (local) {
      ForkPool* p = pool.get();
      local->set_release_hook([p](const std::string& t, const std::string& s) { p->discard_node(t, s); });
    }
    ex = std::make_unique<Executor>(
        *cache, *pool,
        ExecutorOptions{.mode = spec.mode, .snapshots_enabled = spec.snapshots,
                        .background_instantiate = opt.background_instantiate});
    ex->set_event_sink([&](const ExecEvent& e) {
      if (e.kind == "snapshot_decision" && e.snapshotted) ++snapshots;
      if (opt.events) opt.events(e);
    });
  }

  std::mutex fail_mu;
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto fail = [&](std::exception_ptr p) {
    std::lock_guard lock(fail_mu);
    if (!failure) failure = p;
    failed = true;
  };

  auto run_rollout = [&](std::size_t ri) {
    const Rollout& ro = w.rollouts[ri];
    const std::size_t b = base[ri];
    std::vector<ToolResult> results;
    results.reserve(ro.calls.size());
    const auto t0 = SteadyClock::now();
    if (cached) {
      auto s = ex->start_rollout(ro.task_id);
      for (std::size_t i = 0; i < ro.calls.size(); ++i) {
        const std::size_t hits_before = s->report().hits;
        const auto c0 = SteadyClock::now();
        results.push_back(s->call_tool(ro.calls[i]));
        rep.call_ms[b + i] = elapsed_ms(c0);
        rep.call_hit[b + i] = s->report().hits > hits_before ? 1 : 0;
      }
      const RolloutReport rr = s->end_rollout();
      executed += rr.executed_tools;
      replayed += rr.replayed_tools;
    } else {
      const SandboxHandle h = env->start();
      for (std::size_t i = 0; i < ro.calls.size(); ++i) {
        const auto c0 = SteadyClock::now();
        results.push_back(execute_tool(*env, h, ro.calls[i]));
        rep.call_ms[b + i] = elapsed_ms(c0);
      }
      env->stop(h);
      executed += ro.calls.size();
    }
    rep.rollout_wall_ms[ri] = elapsed_ms(t0);
    for (std::size_t i = 0; i < results.size(); ++i) rep.result_digest[b + i] = digest(results[i]);
    if (cached && opt.verify) {
      const std::vector<ToolResult> want = fresh_replay(*oracle_env, ro.calls);
      for (std::size_t i = 0; i < want.size(); ++i) {
        if (!results[i].same_value(want[i]))
          throw BenchMismatch(fmt::format("{} rollout {} epoch {} call {} ({}): cached {} != fresh {}", ro.task_id, ro.index,
                                          ro.epoch, i, ro.calls[i].tool_name, nlohmann::json(results[i].payload).dump(),
                                          nlohmann::json(want[i].payload).dump()));
      }
      verified += want.size();
    }
  };

  auto guarded = [&](std::size_t ri) {
    if (failed) return;
    try {
      run_rollout(ri);
    } catch (...) {
      fail(std::current_exception());
    }
  };

  const auto start = SteadyClock::now();
  const std::size_t per_epoch = spec.tasks * spec.rollouts_per_task;
  for (std::size_t e = 0; e < spec.epochs && !failed; ++e) {
    const std::size_t first = e * per_epoch;
    const auto e0 = SteadyClock::now();
    std::atomic<std::size_t> next_task{0};
    auto worker = [&] {
      for (std::size_t t; (t = next_task++) < spec.tasks && !failed;) {
        const std::size_t lo = first + t * spec.rollouts_per_task;
        if (spec.group_rollouts) {
          std::vector<std::thread> group;
          for (std::size_t r = 0; r < spec.rollouts_per_task; ++r) group.emplace_back(guarded, lo + r);
          for (auto& th : group) th.join();
        } else {
          for (std::size_t r = 0; r < spec.rollouts_per_task; ++r) guarded(lo + r);
        }
      }
    };
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < std::min(spec.parallel_tasks, spec.tasks); ++i) workers.emplace_back(worker);
    for (auto& th : workers) th.join();
    rep.batch_wall_ms.push_back(elapsed_ms(e0));

    std::size_t hits = 0, calls = base[first + per_epoch] - base[first];
    for (std::size_t c = base[first]; c < base[first + per_epoch]; ++c) hits += rep.call_hit[c];
    rep.hits += hits;
    rep.hit_rate_by_epoch.push_back(calls == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(calls));
  }
  rep.wall_ms = elapsed_ms(start);

  ex.reset();
  if (local) local->set_release_hook({});
  if (pool) pool->drain();
  pool.reset();
  if (failure) std::rethrow_exception(failure);

  rep.median_tool_ms = median(rep.call_ms);
  rep.p95_tool_ms = quantile(rep.call_ms, 0.95);
  rep.executed_tools = executed;
  rep.replayed_tools = replayed;
  rep.snapshots_taken = snapshots;
  rep.verified_calls = verified;
  return rep;
}

}  // namespace

RunReport run(const Workload& w, bool cached, const RunOptions& options) { return run_with(w, cached, options, 1.0); }

RunReport run(const WorkloadSpec& spec, bool cached, const RunOptions& options) {
  return run(generate(spec), cached, options);
}

std::vector<double> calibrate_hit_latency(const Workload& w, double time_scale, const RunOptions& options) {
  Workload dry = w;
  if (time_scale > 0) {
    dry.spec.snapshot_ms *= time_scale;
    dry.spec.restore_ms *= time_scale;
  } else {
    dry.spec.snapshots = false;
    dry.spec.snapshot_ms = 0;
    dry.spec.restore_ms = 0;
    dry.spec.parallel_tasks = 1;
    dry.spec.group_rollouts = false;
  }
  RunOptions opt = options;
  opt.verify = false;
  opt.events = {};
  const RunReport r = run_with(dry, true, opt, std::max(0.0, time_scale));
  std::vector<double> out;
  for (std::size_t i = 0; i < r.calls; ++i)
    if (r.call_hit[i] != 0) out.push_back(r.call_ms[i]);
  return out;
}

double calibrate_exec_overhead(double fast_ms, int rounds) {
  auto env = make_environment("filetree");
  const SandboxHandle h = env->start();
  const ToolDescriptor d = ToolDescriptor::make("ls", {{"cost_ms", fast_ms}}, false);
  std::vector<double> ms;
  for (int i = 0; i < rounds; ++i) {
    const auto t0 = SteadyClock::now();
    execute_tool(*env, h, d);
    ms.push_back(elapsed_ms(t0));
  }
  env->stop(h);
  return std::max(0.0, median(ms) - fast_ms);
}

nlohmann::json to_json(const SpeedupExpectation& e) {
  return {{"hit_rate", e.hit_rate},
          {"uncached_median_ms", e.uncached_median_ms},
          {"cached_median_ms", e.cached_median_ms},
          {"speedup", e.speedup}};
}

SpeedupExpectation expected_speedup(const Workload& w, const std::vector<double>& hit_latency_ms,
                                    double exec_overhead_ms) {
  SpeedupExpectation out;
  std::vector<double> uncached, cached;
  std::size_t hits = 0, calls = 0;
  std::vector<std::unordered_set<std::string>> seen(w.spec.tasks);
  std::vector<bool> is_hit;
  for (const Rollout& ro : w.rollouts) {
    for (std::size_t len = 1; len <= ro.calls.size(); ++len) {
      const double cost = call_cost_ms(ro.calls[len - 1]) + exec_overhead_ms;
      uncached.push_back(cost);
      const bool hit = seen[ro.task].count(prefix_key(ro.calls, len)) != 0;
      if (hit)
        ++hits;
      else
        cached.push_back(cost);
      ++calls;
    }
    for (std::size_t len = 1; len <= ro.calls.size(); ++len) seen[ro.task].insert(prefix_key(ro.calls, len));
  }
  // hits take evenly spaced quantiles of the measured hit latency
  for (std::size_t i = 0; i < hits; ++i)
    cached.push_back(quantile(hit_latency_ms, (static_cast<double>(i) + 0.5) / static_cast<double>(hits)));
  out.hit_rate = calls == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(calls);
  out.uncached_median_ms = median(uncached);
  out.cached_median_ms = median(cached);
  out.speedup = out.cached_median_ms > 0 ? out.uncached_median_ms / out.cached_median_ms : 0.0;
  return out;
}

BenchReport compare(const RunReport& u, const RunReport& c) {
  if (u.cached || !c.cached) throw std::invalid_argument("compare needs one uncached and one cached report");
  BenchReport b;
  b.hit_rate_by_epoch = c.hit_rate_by_epoch;
  b.median_tool_ms_cached = c.median_tool_ms;
  b.median_tool_ms_uncached = u.median_tool_ms;
  b.speedup = c.median_tool_ms > 0 ? u.median_tool_ms / c.median_tool_ms : 0.0;
  b.rollout_wall_ms_cached = c.rollout_wall_ms;
  b.rollout_wall_ms_uncached = u.rollout_wall_ms;
  b.batch_wall_ms_cached = c.batch_wall_ms;
  b.batch_wall_ms_uncached = u.batch_wall_ms;
  auto sum = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  };
  auto savings = [&](const std::vector<double>& cached, const std::vector<double>& uncached) {
    const double den = sum(uncached);
    return den > 0 ? 1.0 - sum(cached) / den : 0.0;
  };
  b.rollout_savings = savings(c.rollout_wall_ms, u.rollout_wall_ms);
  b.batch_savings = savings(c.batch_wall_ms, u.batch_wall_ms);
  return b;
}

nlohmann::json to_json(const BenchReport& b) {
  return {{"hit_rate_by_epoch", b.hit_rate_by_epoch},
          {"median_tool_ms_cached", b.median_tool_ms_cached},
          {"median_tool_ms_uncached", b.median_tool_ms_uncached},
          {"speedup", b.speedup},
          {"rollout_wall_ms_cached", b.rollout_wall_ms_cached},
          {"rollout_wall_ms_uncached", b.rollout_wall_ms_uncached},
          {"batch_wall_ms_cached", b.batch_wall_ms_cached},
          {"batch_wall_ms_uncached", b.batch_wall_ms_uncached},
          {"rollout_savings", b.rollout_savings},
          {"batch_savings", b.batch_savings},
          {"p95_get_latency_by_rps", b.p95_get_latency_by_rps}};
}

std::string speedup_table(const std::vector<std::pair<std::string, BenchReport>>& rows) {
  std::string out = fmt::format("{:<24} {:>18} {:>18} {:>10}\n", "Workload", "No Cache (ms/call)", "Cache (ms/call)",
                                "Speedup");
  for (const auto& [label, b] : rows)
    out += fmt::format("{:<24} {:>18.3f} {:>18.3f} {:>9.2f}x\n", label, b.median_tool_ms_uncached,
                       b.median_tool_ms_cached, b.speedup);
  return out;
}

void write_calls_csv(const RunReport& r, const Workload& w, const fs::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "rollout,epoch,task,position,tool,ms,hit\n";
  std::size_t c = 0;
  for (std::size_t i = 0; i < w.rollouts.size(); ++i) {
    const Rollout& ro = w.rollouts[i];
    for (std::size_t p = 0; p < ro.calls.size(); ++p, ++c) {
      if (c >= r.calls) break;
      out << fmt::format("{},{},{},{},{},{:.4f},{}\n", i, ro.epoch, ro.task, p, ro.calls[p].tool_name, r.call_ms[c],
                         static_cast<int>(r.call_hit[c]));
    }
  }
}

// ---------------------------------------------------------------------------
// Latency

nlohmann::json to_json(const SweepCell& c) {
  return {{"shards", c.shards},         {"offered_rps", c.offered_rps}, {"achieved_rps", c.achieved_rps},
          {"requests", c.requests},     {"errors", c.errors},           {"misses", c.misses},
          {"p50_ms", c.p50_ms},         {"p95_ms", c.p95_ms},           {"p99_ms", c.p99_ms},
          {"saturated", c.saturated}};
}

struct LocalCluster::Impl {
  std::vector<std::unique_ptr<Server>> servers;
};

LocalCluster::LocalCluster(std::size_t shards, std::size_t threads) : impl_(std::make_unique<Impl>()) {
  if (shards == 0) throw std::invalid_argument("shard count must be positive");
  for (std::size_t i = 0; i < shards; ++i) {
    ServerConfig c;
    c.listen_address = "127.0.0.1:0";
    c.shard_count = shards;
    c.shard_index = i;
    c.threads = threads;
    c.persist_interval_s = 3600;
    auto s = std::make_unique<Server>(c);
    s->start();
    impl_->servers.push_back(std::move(s));
  }
}

LocalCluster::~LocalCluster() {
  for (auto& s : impl_->servers) s->stop();
}

std::vector<std::string> LocalCluster::addresses() const {
  std::vector<std::string> out;
  for (const auto& s : impl_->servers) out.push_back("127.0.0.1:" + std::to_string(s->port()));
  return out;
}

namespace {

constexpr std::size_t kChainLength = 16;

Trajectory corpus_chain(std::size_t task, std::uint64_t seed) {
  Trajectory chain;
  for (std::size_t i = 0; i < kChainLength; ++i)
    chain.push_back(ToolDescriptor::make(
        "write", {{"path", fmt::format("f{}", i % 4)}, {"content", fmt::format("{}-{}-{}", seed, task, i)}}, true));
  return chain;
}

}  // namespace

KeyCorpus::KeyCorpus(std::vector<std::string> addresses, std::size_t keys, std::uint64_t seed)
    : addresses_(std::move(addresses)) {
  if (addresses_.empty()) throw std::invalid_argument("corpus needs at least one address");
  if (keys == 0) throw std::invalid_argument("corpus needs at least one key");
  const std::size_t tasks = (keys + kChainLength - 1) / kChainLength;
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::string task = fmt::format("corpus-{}-{}", seed, t);
    const Trajectory chain = corpus_chain(t, seed);
    for (std::size_t len = 1; len <= kChainLength && keys_.size() < keys; ++len) {
      Trajectory prefix(chain.begin(), chain.begin() + static_cast<std::ptrdiff_t>(len));
      bodies_.push_back(
          nlohmann::json{{"task_id", task}, {"trajectory", trajectory_to_json(prefix)}, {"mode", "strict"}}.dump());
      shard_of_.push_back(shard_for(task, addresses_.size()));
      keys_.emplace_back(task, std::move(prefix));
    }
  }
}

void KeyCorpus::preload() {
  RemoteCacheOptions o;
  o.addresses = addresses_;
  RemoteCache rc(o);
  for (const auto& [task, traj] : keys_)
    rc.put(task, traj, ToolResult{"v:" + traj.back().args_canonical, ToolStatus::ok, 1.0}, MatchMode::strict);
}

SweepCell KeyCorpus::measure(double rps, double duration_s, std::size_t senders) {
  if (!(rps > 0) || !(duration_s > 0)) throw std::invalid_argument("rps and duration must be positive");
  const auto total = static_cast<std::size_t>(std::max(1.0, std::llround(rps * duration_s) * 1.0));
  std::vector<std::unique_ptr<HttpEndpoint>> eps;
  for (const auto& a : addresses_) eps.push_back(std::make_unique<HttpEndpoint>(a, std::chrono::milliseconds(5000)));

  struct Local {
    std::vector<double> lat;
    std::size_t errors = 0, misses = 0;
    SteadyTime last{};
  };
  std::vector<Local> locals(senders);
  std::atomic<std::size_t> next{0};
  const SteadyTime t0 = SteadyClock::now() + std::chrono::milliseconds(20);
  const auto interval = std::chrono::duration<double>(1.0 / rps);
  auto sender = [&](std::size_t id) {
    Local& me = locals[id];
    std::mt19937_64 rng(0x5eed + id);
    for (std::size_t i; (i = next++) < total;) {
      const SteadyTime at = t0 + std::chrono::duration_cast<SteadyClock::duration>(interval * static_cast<double>(i));
      std::this_thread::sleep_until(at);
      const std::size_t k = rng() % bodies_.size();
      try {
        const HttpReply r = eps[shard_of_[k]]->send("POST", "/get", bodies_[k]);
        if (r.status != 200)
          ++me.errors;
        else if (r.body.find("\"hit\":true") == std::string::npos)
          ++me.misses;
      } catch (const std::exception&) {
        ++me.errors;
      }
      const SteadyTime done = SteadyClock::now();
      me.lat.push_back(elapsed_ms(at, done));
      me.last = std::max(me.last, done);
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < senders; ++i) threads.emplace_back(sender, i);
  for (auto& t : threads) t.join();

  SweepCell c;
  c.shards = addresses_.size();
  c.offered_rps = rps;
  std::vector<double> lat;
  SteadyTime last = t0;
  for (const Local& l : locals) {
    lat.insert(lat.end(), l.lat.begin(), l.lat.end());
    c.errors += l.errors;
    c.misses += l.misses;
    last = std::max(last, l.last);
  }
  c.requests = lat.size();
  const double span_s = std::max(duration_s, elapsed_ms(t0, last) / 1000.0);
  c.achieved_rps = static_cast<double>(c.requests) / span_s;
  c.p50_ms = quantile(lat, 0.50);
  c.p95_ms = quantile(lat, 0.95);
  c.p99_ms = quantile(lat, 0.99);
  c.saturated = c.achieved_rps < 0.95 * rps;
  return c;
}

std::vector<SweepCell> latency_sweep(const SweepOptions& o) {
  std::vector<SweepCell> cells;
  for (std::size_t shards : o.shards) {
    LocalCluster cluster(shards, o.threads_per_shard);
    KeyCorpus corpus(cluster.addresses(), o.keys);
    corpus.preload();
    for (double rps : o.rps) {
      cells.push_back(corpus.measure(rps, o.duration_s, o.senders));
      spdlog::info("sweep shards={} rps={} achieved={:.1f} p95={:.3f}ms{}", shards, rps, cells.back().achieved_rps,
                   cells.back().p95_ms, cells.back().saturated ? " saturated" : "");
    }
  }
  return cells;
}

namespace {

bool passes(const SweepCell& c, double budget) { return !c.saturated && c.errors == 0 && c.p95_ms < budget; }

}  // namespace

std::vector<SweepCell> find_max_rps(KeyCorpus& corpus, double budget, double start_rps, double growth, double probe_s,
                                    std::size_t senders) {
  if (!(growth > 1.0)) throw std::invalid_argument("growth must exceed 1");
  std::vector<SweepCell> probes;
  for (double rps = start_rps; rps < 1e6; rps *= growth) {
    probes.push_back(corpus.measure(rps, probe_s, senders));
    const SweepCell& c = probes.back();
    spdlog::info("probe shards={} rps={:.0f} achieved={:.1f} p95={:.3f}ms errors={}{}", c.shards, rps, c.achieved_rps,
                 c.p95_ms, c.errors, c.saturated ? " saturated" : "");
    if (!passes(c, budget)) break;
  }
  return probes;
}

double max_passing_rps(const std::vector<SweepCell>& probes, double budget) {
  double best = 0;
  for (const SweepCell& c : probes) {
    if (!passes(c, budget)) break;
    best = c.offered_rps;
  }
  return best;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const fs::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "shards,offered_rps,achieved_rps,requests,errors,misses,p50_ms,p95_ms,p99_ms,saturated\n";
  for (const SweepCell& c : cells)
    out << fmt::format("{},{},{:.2f},{},{},{},{:.4f},{:.4f},{:.4f},{}\n", c.shards, c.offered_rps, c.achieved_rps,
                       c.requests, c.errors, c.misses, c.p50_ms, c.p95_ms, c.p99_ms, c.saturated ? 1 : 0);
}

// ---------------------------------------------------------------------------
// Golden traces

std::size_t write_golden_trace(const fs::path& file, std::size_t cases, std::uint64_t seed) {
  if (cases == 0) throw std::invalid_argument("cases must be positive");
  std::error_code ec;
  fs::remove(file, ec);
  WorkloadSpec spec;
  spec.rollouts_per_task = 10;
  spec.tasks = (cases + spec.rollouts_per_task - 1) / spec.rollouts_per_task;
  spec.trajectory_len = {1, 6};
  spec.branch_prob = 0.3;
  spec.branch_fanout = 2;
  spec.stateless_frac = 0.3;
  spec.seed = seed;
  Workload w = generate(spec);
  w.rollouts.resize(cases);

  LocalCluster cluster(1, 4);
  RemoteCacheOptions ro;
  ro.addresses = cluster.addresses();
  ro.trace_path = file;
  RemoteCache cache(ro);
  auto env = make_environment("filetree");
  calibrate_snapshot_cost(*env, cache.cost_model());
  ForkPoolConfig pc;
  pc.prewarm_enabled = false;
  pc.root_pool_size = 1;
  pc.worker_threads = 1;
  ForkPool pool(*env, pc, [&cache](const NodeKey& k) { return cache.load_snapshot(k.task_id, k.snapshot_id); },
                &cache.cost_model());
  Executor ex(cache, pool, ExecutorOptions{.background_instantiate = false});
  for (const Rollout& r : w.rollouts) {
    auto s = ex.start_rollout(r.task_id);
    for (const auto& d : r.calls) s->call_tool(d);
    s->end_rollout();
  }
  pool.drain();
  return cache.trace_steps();
}

}  // namespace tvcache::bench
