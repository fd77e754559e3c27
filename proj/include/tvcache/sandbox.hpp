// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/descriptor.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/result.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

namespace tvcache {

struct SandboxHandle {
  std::uint64_t id = 0;
  std::string backend_kind;

  friend bool operator==(const SandboxHandle&, const SandboxHandle&) = default;
};

/// Simulated costs of lifecycle operations, in milliseconds.
struct EnvironmentLatency {
  double start_ms = 0;
  double fork_ms = 0;
  double snapshot_ms = 0;
  double restore_ms = 0;
  double execute_ms = 0;  // added to every tool call
};

/// The sandbox lifecycle contract. Implementations must be safe for
/// concurrent use on distinct handles.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string_view kind() const = 0;
  virtual SandboxHandle start() = 0;
  virtual void stop(const SandboxHandle& handle) = 0;
  virtual SandboxHandle fork(const SandboxHandle& handle) = 0;
  virtual ToolResult execute(const SandboxHandle& handle, const ToolDescriptor& descriptor) = 0;
  virtual bool will_mutate_state(const ToolDescriptor& descriptor) const = 0;
  virtual std::string snapshot(const SandboxHandle& handle) = 0;
  virtual SandboxHandle restore(std::string_view bytes) = 0;
  virtual bool is_alive(const SandboxHandle& handle) const = 0;
  virtual std::size_t live_count() const = 0;

  /// A random well-formed call, used to generate conformance workloads.
  virtual ToolDescriptor sample_call(std::mt19937_64& rng) const = 0;

  /// Builds a descriptor whose statefulness flag comes from this backend.
  ToolDescriptor describe(std::string tool_name, const nlohmann::json& args) const;
};

namespace detail {

void sleep_ms(double ms);

/// Handle registry shared by the in-process backends. State must be
/// copyable; each handle owns its own copy.
template <class State>
class HandleTable {
 public:
  explicit HandleTable(std::string kind) : kind_(std::move(kind)) {}

  SandboxHandle add(State state) {
    auto slot = std::make_shared<Slot>();
    slot->state = std::move(state);
    std::lock_guard lock(mu_);
    SandboxHandle h{next_id_++, kind_};
    slots_.emplace(h.id, std::move(slot));
    return h;
  }

  void remove(const SandboxHandle& h) {
    std::lock_guard lock(mu_);
    if (slots_.erase(h.id) == 0) throw SandboxDead("sandbox " + std::to_string(h.id) + " is not alive");
  }

  // Runs fn(State&) with the handle's slot locked.
  template <class Fn>
  auto with(const SandboxHandle& h, Fn&& fn) {
    std::shared_ptr<Slot> slot;
    {
      std::lock_guard lock(mu_);
      auto it = h.backend_kind == kind_ ? slots_.find(h.id) : slots_.end();
      if (it == slots_.end()) throw SandboxDead("sandbox " + std::to_string(h.id) + " is not alive");
      slot = it->second;
    }
    std::lock_guard lock(slot->mu);
    return fn(slot->state);
  }

  bool alive(const SandboxHandle& h) const {
    std::lock_guard lock(mu_);
    return h.backend_kind == kind_ && slots_.count(h.id) != 0;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return slots_.size();
  }

 private:
  struct Slot {
    std::mutex mu;
    State state;
  };

  std::string kind_;
  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  std::unordered_map<std::uint64_t, std::shared_ptr<Slot>> slots_;
};

}  // namespace detail

struct FileTreeOptions {
  EnvironmentLatency latency;
  std::map<std::string, std::string> seed;  // initial files
  // Negative control: `read` bumps a hidden counter yet is still reported
  // as not mutating state.
  bool leaky_reads = false;
  // Multiplies the optional `cost_ms` argument every tool accepts.
  double cost_scale = 1.0;
};

/// In-memory file map with write/append/read/ls/rm and a sleep_ms tool that
/// models expensive calls; any tool also takes `cost_ms`, slept before it
/// runs. Snapshots are canonical ("FTS1" + sorted, length-prefixed
/// path/content pairs) so byte equality is state equality.
class FileTreeSandbox : public Environment {
 public:
  explicit FileTreeSandbox(FileTreeOptions options = {});

  std::string_view kind() const override { return options_.leaky_reads ? "leaky-read" : "filetree"; }
  SandboxHandle start() override;
  void stop(const SandboxHandle& handle) override;
  SandboxHandle fork(const SandboxHandle& handle) override;
  ToolResult execute(const SandboxHandle& handle, const ToolDescriptor& descriptor) override;
  bool will_mutate_state(const ToolDescriptor& descriptor) const override;
  std::string snapshot(const SandboxHandle& handle) override;
  SandboxHandle restore(std::string_view bytes) override;
  bool is_alive(const SandboxHandle& handle) const override { return table_.alive(handle); }
  std::size_t live_count() const override { return table_.size(); }
  ToolDescriptor sample_call(std::mt19937_64& rng) const override;

  /// Reads a {"path": "content", ...} JSON object.
  static std::map<std::string, std::string> load_seed(const std::filesystem::path& file);

  const FileTreeOptions& options() const { return options_; }

 private:
  struct State {
    std::map<std::string, std::string> files;
    std::uint64_t reads = 0;  // only observable when leaky_reads
  };

  std::string encode(const State& s) const;
  State decode(std::string_view bytes) const;

  FileTreeOptions options_;
  detail::HandleTable<State> table_;
};

/// A table cell: integer, real or text.
using Value = std::variant<std::int64_t, double, std::string>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;
};

struct QueryOptions {
  EnvironmentLatency latency{.start_ms = 0, .fork_ms = 0, .snapshot_ms = 0, .restore_ms = 0, .execute_ms = 56.6};
  std::map<std::string, Table> tables;  // empty => the built-in example database
};

/// The built-in example database: an `animals` table with 12 pig rows.
std::map<std::string, Table> example_database();

/// Evaluates `SELECT COUNT(*) | SUM(col) FROM t [WHERE col op lit [AND ...]]`.
/// Keywords are case-insensitive; op is one of = != <> < <= > >=; literals are
/// numbers or single-quoted strings. Throws QueryParseError.
std::string evaluate_query(const std::map<std::string, Table>& tables, std::string_view expr);

/// Read-only SQL-ish backend: every call is stateless.
class ReadOnlyQuerySandbox : public Environment {
 public:
  explicit ReadOnlyQuerySandbox(QueryOptions options = {});

  std::string_view kind() const override { return "query"; }
  SandboxHandle start() override;
  void stop(const SandboxHandle& handle) override;
  SandboxHandle fork(const SandboxHandle& handle) override;
  ToolResult execute(const SandboxHandle& handle, const ToolDescriptor& descriptor) override;
  bool will_mutate_state(const ToolDescriptor&) const override { return false; }
  std::string snapshot(const SandboxHandle& handle) override;
  SandboxHandle restore(std::string_view bytes) override;
  bool is_alive(const SandboxHandle& handle) const override { return table_.alive(handle); }
  std::size_t live_count() const override { return table_.size(); }
  ToolDescriptor sample_call(std::mt19937_64& rng) const override;

 private:
  using State = std::shared_ptr<const std::map<std::string, Table>>;

  QueryOptions options_;
  State initial_;
  detail::HandleTable<State> table_;
};

/// Creates a backend by kind: "filetree", "query" or "leaky-read".
/// `options` may carry latency fields (start_ms, fork_ms, snapshot_ms,
/// restore_ms, execute_ms) and, for file trees, `seed_file`.
std::unique_ptr<Environment> make_environment(std::string_view kind, const nlohmann::json& options = {});
std::vector<std::string> environment_kinds();

struct PropertyResult {
  std::string name;
  bool passed = true;
  std::size_t checks = 0;
  std::size_t violations = 0;
  std::string first_violation;
};

struct ContractReport {
  std::string backend_kind;
  std::vector<PropertyResult> properties;
  bool passed() const;
  nlohmann::json to_json() const;
};

struct ContractOptions {
  std::size_t workloads = 5;
  std::size_t ops_per_workload = 200;
  std::uint64_t seed = 1;
};

/// Checks fork isolation, determinism, snapshot/restore equivalence,
/// stateless truthfulness, stateful-filter equivalence and dead-handle
/// rejection on generated workloads.
ContractReport contract_suite(Environment& env, const ContractOptions& options = {});

}  // namespace tvcache
