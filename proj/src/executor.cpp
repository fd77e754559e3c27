// SPDX-License-Identifier: Apache-2.0
#include "tvcache/executor.hpp"

#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"

#include <spdlog/spdlog.h>

namespace tvcache {

nlohmann::json to_json(const ExecEvent& e) {
  nlohmann::json j = {{"kind", e.kind},
                      {"task_id", e.task_id},
                      {"session_id", e.session_id},
                      {"call_index", e.call_index},
                      {"position", e.position},
                      {"tool", e.tool}};
  if (e.node_id) j["node_id"] = *e.node_id;
  if (e.kind == "prefix_match" || e.kind == "fork") {
    j["matched_len"] = e.matched_len;
    j["snapshot_depth"] = e.snapshot_depth;
  }
  if (e.kind == "execute" || e.kind == "snapshot_decision") j["exec_ms"] = e.exec_ms;
  if (e.kind == "snapshot_decision") {
    j["overhead_ms"] = e.overhead_ms;
    j["snapshotted"] = e.snapshotted;
  }
  if (!e.snapshot_id.empty()) j["snapshot_id"] = e.snapshot_id;
  if (!e.detail.empty()) j["detail"] = e.detail;
  return j;
}

void EventLog::add(const ExecEvent& e) {
  std::lock_guard lock(mu_);
  events_.push_back(e);
}

std::vector<ExecEvent> EventLog::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::function<void(const ExecEvent&)> EventLog::sink() {
  return [this](const ExecEvent& e) { add(e); };
}

nlohmann::json to_json(const RolloutReport& r) {
  return {{"hits", r.hits},
          {"misses", r.misses},
          {"executed_tools", r.executed_tools},
          {"replayed_tools", r.replayed_tools},
          {"total_tool_ms", r.total_tool_ms},
          {"saved_ms_estimate", r.saved_ms_estimate},
          {"lookup_ms", r.lookup_ms},
          {"leases_acquired", r.leases_acquired},
          {"leases_released", r.leases_released},
          {"cache_errors", r.cache_errors}};
}

ToolResult execute_tool(Environment& env, const SandboxHandle& handle, const ToolDescriptor& d) {
  try {
    return env.execute(handle, d);
  } catch (const MalformedArgs& e) {
    return ToolResult{std::string("malformed args: ") + e.what(), ToolStatus::tool_error, 0.0};
  }
}

std::vector<ToolResult> fresh_replay(Environment& env, TrajectoryView trajectory) {
  const SandboxHandle h = env.start();
  std::vector<ToolResult> out;
  try {
    for (const auto& d : trajectory) out.push_back(execute_tool(env, h, d));
  } catch (...) {
    env.stop(h);
    throw;
  }
  env.stop(h);
  return out;
}

// ---------------------------------------------------------------------------

Executor::Executor(CacheClient& cache, ForkPool& pool, ExecutorOptions options)
    : cache_(cache), pool_(pool), options_(options) {}

std::unique_ptr<RolloutSession> Executor::start_rollout(std::string task_id) {
  return std::make_unique<RolloutSession>(*this, std::move(task_id), next_session_.fetch_add(1));
}

RolloutSession::RolloutSession(Executor& executor, std::string task_id, std::uint64_t id)
    : ex_(executor), task_id_(std::move(task_id)), id_(id) {}

RolloutSession::~RolloutSession() {
  try {
    end_rollout();
  } catch (const std::exception& e) {
    spdlog::warn("ending rollout {}: {}", id_, e.what());
  }
}

void RolloutSession::emit(ExecEvent e) {
  if (!ex_.sink_) return;
  e.task_id = task_id_;
  e.session_id = id_;
  e.call_index = history_.size();
  ex_.sink_(e);
}

void RolloutSession::drop_sandbox() {
  if (!sandbox_) return;
  try {
    ex_.environment().stop(*sandbox_);
  } catch (const std::exception&) {
  }
  sandbox_.reset();
  last_snapshot_.reset();
}

void RolloutSession::release_lease(const std::string& lease_id) {
  ++report_.leases_released;
  try {
    ex_.cache_.release(task_id_, lease_id);
    emit({.kind = "lease_released", .detail = lease_id});
  } catch (const std::exception& e) {
    ++report_.cache_errors;
    emit({.kind = "lease_error", .detail = e.what()});
  }
}

ToolResult RolloutSession::execute_guarded(const ToolDescriptor& d) {
  try {
    return execute_tool(ex_.environment(), *sandbox_, d);
  } catch (const std::exception& e) {
    emit({.kind = "sandbox_error", .tool = d.tool_name, .detail = e.what()});
    drop_sandbox();
    return ToolResult{std::string("sandbox failure: ") + e.what(), ToolStatus::tool_error, 0.0};
  }
}

void RolloutSession::backfill() {
  for (std::size_t j = 1; j <= history_.size(); ++j) {
    ex_.cache_.put(task_id_, TrajectoryView(history_).first(j), results_[j - 1], ex_.options_.mode);
  }
}

std::optional<NodeId> RolloutSession::insert(TrajectoryView path, const ToolResult& r,
                                             const std::optional<std::string>& snap) {
  auto& cache = ex_.cache_;
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      return cache.put(task_id_, path, r, ex_.options_.mode, snap);
    } catch (const MissingPrefix& e) {
      // the service lost part of this rollout (restart without a persist)
      if (attempt > 0) {
        emit({.kind = "insert_error", .tool = path.back().tool_name, .detail = e.what()});
        return std::nullopt;
      }
      try {
        backfill();
      } catch (const CacheUnavailable&) {
        offline_ = true;
        return std::nullopt;
      } catch (const std::exception& e2) {
        emit({.kind = "insert_error", .tool = path.back().tool_name, .detail = e2.what()});
        return std::nullopt;
      }
    } catch (const CacheUnavailable& e) {
      ++report_.cache_errors;
      offline_ = true;
      emit({.kind = "cache_unavailable", .detail = e.what()});
      return std::nullopt;
    } catch (const std::exception& e) {
      ++report_.cache_errors;
      emit({.kind = "insert_error", .tool = path.back().tool_name, .detail = e.what()});
      return std::nullopt;
    }
  }
  return std::nullopt;
}

ToolResult RolloutSession::run_step(TrajectoryView put_path, std::size_t position) {
  const ToolDescriptor& d = put_path.back();
  Environment& env = ex_.environment();
  ToolResult r = execute_guarded(d);
  ++report_.executed_tools;
  report_.total_tool_ms += r.exec_ms;
  last_snapshot_.reset();
  emit({.kind = "execute", .position = position, .tool = d.tool_name, .exec_ms = r.exec_ms});
  if (!sandbox_ || offline_) return r;

  std::optional<SnapshotRef> ref;
  const bool eligible = ex_.options_.snapshots_enabled && (ex_.options_.mode == MatchMode::strict || d.mutates_state);
  if (eligible) {
    CostModel& cost = ex_.cache_.cost_model();
    // One read of the estimate, so the logged overhead is the one decided on.
    const double overhead = cost.overhead_ms(env.kind());
    if (r.exec_ms > overhead) {
      try {
        const auto t0 = SteadyClock::now();
        const std::string bytes = env.snapshot(*sandbox_);
        ref = ex_.cache_.store_snapshot(task_id_, bytes, env.kind(), elapsed_ms(t0));
      } catch (const CacheUnavailable& e) {
        ++report_.cache_errors;
        offline_ = true;
        emit({.kind = "cache_unavailable", .detail = e.what()});
        return r;
      } catch (const std::exception& e) {
        spdlog::warn("snapshot after {} failed: {}", d.tool_name, e.what());
      }
    }
    emit({.kind = "snapshot_decision",
          .position = position,
          .tool = d.tool_name,
          .exec_ms = r.exec_ms,
          .overhead_ms = overhead,
          .snapshotted = ref.has_value(),
          .snapshot_id = ref ? ref->snapshot_id : std::string()});
  }
  const auto node = insert(put_path, r, ref ? std::optional<std::string>(ref->snapshot_id) : std::nullopt);
  if (node && ref) {
    NodeKey key{task_id_, *node, ref->snapshot_id};
    if (ex_.options_.background_instantiate) ex_.pool_.background_instantiate(key);
    last_snapshot_ = key;
  }
  return r;
}

ToolResult RolloutSession::run_from_root(TrajectoryView seq, const PrefixMatchReply* m) {
  std::size_t start = 0;
  if (m != nullptr && m->snapshot_id && m->snapshot_node_id) {
    const NodeKey key{task_id_, *m->snapshot_node_id, *m->snapshot_id};
    try {
      sandbox_ = ex_.pool_.acquire_for_node(key);
      start = m->snapshot_depth;
      last_snapshot_ = key;
      emit({.kind = "fork",
            .tool = seq.back().tool_name,
            .node_id = key.node_id,
            .matched_len = m->matched_len,
            .snapshot_depth = m->snapshot_depth,
            .snapshot_id = key.snapshot_id});
    } catch (const std::exception& e) {
      emit({.kind = "sandbox_error", .detail = std::string("fork failed: ") + e.what()});
    }
  }
  if (m != nullptr && m->lease_id) release_lease(*m->lease_id);
  if (!sandbox_) {
    try {
      sandbox_ = ex_.pool_.acquire_root();
      last_snapshot_.reset();
      emit({.kind = "root", .tool = seq.back().tool_name});
    } catch (const std::exception& e) {
      emit({.kind = "sandbox_error", .detail = e.what()});
      return ToolResult{std::string("sandbox failure: ") + e.what(), ToolStatus::tool_error, 0.0};
    }
  }
  ToolResult r;
  for (std::size_t i = start; i < seq.size(); ++i) {
    r = run_step(seq.first(i + 1), i);
    if (i + 1 < seq.size()) ++report_.replayed_tools;
    if (!sandbox_) break;
  }
  return r;
}

ToolResult RolloutSession::call_tool(const ToolDescriptor& descriptor) {
  validate(descriptor);
  if (ended_) throw std::logic_error("rollout already ended");
  Trajectory q = history_;
  q.push_back(descriptor);
  const MatchMode mode = ex_.options_.mode;
  ToolResult r;

  if (diverged_) {
    // once executing privately, the sandbox is authoritative
    ++report_.misses;
    if (sandbox_)
      r = run_step(q, q.size() - 1);
    else
      r = run_from_root(match_query(q, mode), nullptr);
  } else {
    std::optional<PrefixMatchReply> match;
    bool counted_miss = false;
    if (!offline_) {
      try {
        const auto t0 = SteadyClock::now();
        auto hit = ex_.cache_.get(task_id_, q, mode);
        const double lk = elapsed_ms(t0);
        report_.lookup_ms += lk;
        if (hit) {
          ++report_.hits;
          hit_exec_ms_ += hit->exec_ms;
          emit({.kind = "hit", .tool = descriptor.tool_name, .exec_ms = hit->exec_ms});
          history_.push_back(descriptor);
          results_.push_back(*hit);
          return *hit;
        }
        ++report_.misses;
        counted_miss = true;
        emit({.kind = "miss", .tool = descriptor.tool_name});
        const auto t1 = SteadyClock::now();
        match = ex_.cache_.prefix_match(task_id_, q, mode);
        report_.lookup_ms += elapsed_ms(t1);
        if (match->lease_id) ++report_.leases_acquired;
        emit({.kind = "prefix_match",
              .tool = descriptor.tool_name,
              .node_id = match->node_id,
              .matched_len = match->matched_len,
              .snapshot_depth = match->snapshot_depth,
              .snapshot_id = match->snapshot_id.value_or("")});
      } catch (const CacheUnavailable& e) {
        ++report_.cache_errors;
        offline_ = true;
        match.reset();
        emit({.kind = "cache_unavailable", .detail = e.what()});
      }
    }
    if (!counted_miss) ++report_.misses;
    diverged_ = true;
    r = run_from_root(match_query(q, mode), match ? &*match : nullptr);
  }
  history_.push_back(descriptor);
  results_.push_back(r);
  return r;
}

RolloutReport RolloutSession::end_rollout() {
  if (ended_) return report_;
  ended_ = true;
  if (sandbox_) {
    if (last_snapshot_) {
      // adopt() stops the sandbox itself when the slot is already taken
      ex_.pool_.adopt(*last_snapshot_, *sandbox_);
      sandbox_.reset();
    } else {
      drop_sandbox();
    }
  }
  report_.saved_ms_estimate = hit_exec_ms_ - report_.lookup_ms;
  return report_;
}

// ---------------------------------------------------------------------------

namespace {
std::string control_key(const std::string& task_id, const ToolDescriptor& d) {
  return task_id + kRecordSeparator + d.key();
}
}  // namespace

std::optional<ToolResult> StatelessControlCache::get(const std::string& task_id, const ToolDescriptor& d) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(control_key(task_id, d));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void StatelessControlCache::put(const std::string& task_id, const ToolDescriptor& d, const ToolResult& r) {
  std::lock_guard lock(mu_);
  entries_.emplace(control_key(task_id, d), r);
}

ControlSession::ControlSession(StatelessControlCache& cache, Environment& env, std::string task_id)
    : cache_(cache), env_(env), task_id_(std::move(task_id)) {}

ControlSession::~ControlSession() {
  if (sandbox_) {
    try {
      env_.stop(*sandbox_);
    } catch (const std::exception&) {
    }
  }
}

ToolResult ControlSession::call_tool(const ToolDescriptor& d) {
  if (auto hit = cache_.get(task_id_, d)) {
    ++hits_;
    return *hit;
  }
  if (!sandbox_) sandbox_ = env_.start();
  ToolResult r = execute_tool(env_, *sandbox_, d);
  cache_.put(task_id_, d, r);
  return r;
}

}  // namespace tvcache
