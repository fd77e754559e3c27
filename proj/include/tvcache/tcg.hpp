// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/clock.hpp"
#include "tvcache/descriptor.hpp"
#include "tvcache/result.hpp"
#include "tvcache/snapshot.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace tvcache {

using NodeId = std::uint64_t;
inline constexpr NodeId kRootId = 0;

struct GraphStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t lpm_hits = 0;  // prefix matches that found a snapshot to resume from
  std::uint64_t inserts = 0;
  std::uint64_t evictions = 0;
  std::uint64_t divergent_inserts = 0;
  std::uint64_t lease_leaks = 0;
  std::uint64_t budget_deferrals = 0;
};

nlohmann::json to_json(const GraphStats& stats);

struct StatelessAttachment {
  ToolDescriptor descriptor;
  ToolResult result;
  std::uint64_t hit_count = 0;
};

/// Copy of one node, for inspection and tests.
struct NodeInfo {
  NodeId id = kRootId;
  std::optional<NodeId> parent;
  std::optional<ToolDescriptor> descriptor;
  std::optional<ToolResult> result;
  std::optional<SnapshotRef> snapshot;
  std::vector<NodeId> children;  // ordered by descriptor key
  std::uint32_t ref_count = 0;
  std::uint64_t hit_count = 0;
  std::uint32_t depth = 0;
  std::int64_t created_at_ms = 0;
  std::vector<StatelessAttachment> stateless;  // ordered by descriptor key
};

/// Outcome of a longest-prefix match. matched_len is always shorter than the
/// query; a full match is a cache hit and is served by lookup_exact instead.
struct PrefixMatch {
  std::size_t matched_len = 0;
  NodeId node_id = kRootId;
  // Deepest snapshot-bearing node on the matched path, its depth and ref.
  std::optional<NodeId> snapshot_node_id;
  std::size_t snapshot_depth = 0;
  std::optional<SnapshotRef> snapshot;
  // Present iff snapshot_node_id is; pins that node until released.
  std::optional<std::string> lease_id;
};

struct GraphOptions {
  std::size_t snapshot_budget = 8;
  std::chrono::milliseconds lease_ttl{300'000};
  ClockFn clock;  // defaults to SteadyClock::now
  // Called outside the graph lock for every snapshot ref the graph gives up
  // (evicted, replaced, or offered for a node that already had one).
  std::function<void(NodeId, const SnapshotRef&)> on_snapshot_released;
};

/// Per-task tree of observed tool-call trajectories. Each non-root node holds
/// the tool descriptor, its result and optionally a sandbox snapshot taken
/// right after the call. Thread-safe: structural mutations and refcount
/// changes serialize on one lock; exact lookups share it.
class TaskGraph {
 public:
  explicit TaskGraph(std::string task_id, GraphOptions options = {});
  ~TaskGraph();

  TaskGraph(const TaskGraph&) = delete;
  TaskGraph& operator=(const TaskGraph&) = delete;

  const std::string& task_id() const { return task_id_; }

  /// Adds the final step of `trajectory` under its (existing) parent path.
  /// Idempotent: re-inserting returns the existing node and keeps the first
  /// stored result. A snapshot is adopted if the node has none yet.
  /// Throws MissingPrefix if the all-but-last path is absent; on any throw
  /// the snapshot is not adopted.
  NodeId insert(TrajectoryView trajectory, const ToolResult& result, std::optional<SnapshotRef> snapshot = {});

  std::optional<ToolResult> lookup_exact(TrajectoryView trajectory);

  /// Longest stored proper prefix of `trajectory`. When a snapshot lies on the
  /// matched path, the deepest one is pinned and a lease is minted.
  PrefixMatch longest_prefix_match(TrajectoryView trajectory);

  /// Lookup over the state-mutating subsequence of `history`: stateless
  /// targets are found among the attachments of the node it reaches,
  /// stateful targets as ordinary children of it.
  std::optional<ToolResult> lookup_stateful(TrajectoryView history, const ToolDescriptor& target);

  /// Stores a stateless call's result under the node reached by
  /// `stateful_prefix`. Returns that node's id.
  NodeId attach_stateless(TrajectoryView stateful_prefix, const ToolDescriptor& descriptor, const ToolResult& result);

  /// Throws UnknownLease, or LeaseExpired for a lease that outlived its TTL.
  void release(std::string_view lease_id);

  /// Drops snapshots of unreferenced subtrees, lowest reuse score first,
  /// until the snapshot count is within budget. Results are never evicted.
  std::vector<NodeId> evict();

  /// Reclaims leases past their TTL; returns how many were reclaimed.
  std::size_t expire_leases();

  /// Adopts `ref` for an existing node. Returns false (releasing the ref) if
  /// the node already has a snapshot; throws std::out_of_range for unknown ids.
  bool attach_snapshot(NodeId node, SnapshotRef ref);

  /// Forgets a snapshot ref that no longer resolves in the store.
  void invalidate_snapshot(NodeId node, std::string_view snapshot_id);

  std::string export_dot() const;

  void persist(std::ostream& out) const;
  static std::unique_ptr<TaskGraph> restore(std::istream& in, GraphOptions options = {});

  std::size_t node_count() const;
  std::size_t snapshot_count() const;
  std::size_t active_leases() const;
  std::size_t snapshot_budget() const;
  void set_snapshot_budget(std::size_t budget);
  GraphStats stats() const;
  std::optional<NodeInfo> node(NodeId id) const;
  std::optional<NodeId> find(TrajectoryView trajectory) const;
  std::vector<NodeInfo> nodes() const;  // breadth-first, children by key

  /// Bumped on every change to persisted content; used for dirty tracking.
  std::uint64_t generation() const { return generation_.load(std::memory_order_acquire); }

 private:
  struct Attachment {
    ToolDescriptor descriptor;
    ToolResult result;
    mutable std::atomic<std::uint64_t> hit_count{0};
  };

  struct Node {
    NodeId id = kRootId;
    std::optional<NodeId> parent;
    std::optional<ToolDescriptor> descriptor;
    std::optional<ToolResult> result;
    std::optional<SnapshotRef> snapshot;
    std::map<std::string, NodeId> children;
    std::uint32_t ref_count = 0;
    mutable std::atomic<std::uint64_t> hit_count{0};
    std::uint32_t depth = 0;
    std::int64_t created_at_ms = 0;
    std::map<std::string, Attachment> stateless;
  };

  struct Lease {
    NodeId node;
    SteadyTime expires_at;
  };

  using Released = std::vector<std::pair<NodeId, SnapshotRef>>;

  SteadyTime now() const;
  const Node* walk_locked(TrajectoryView path) const;
  Node& new_node_locked(const Node& parent, const ToolDescriptor& d, const ToolResult& r);
  std::vector<NodeId> evict_locked(Released& released);
  std::size_t expire_leases_locked();
  void remember_expired_locked(const std::string& lease_id);
  void fire(Released& released) const;
  void touch() { generation_.fetch_add(1, std::memory_order_acq_rel); }
  NodeInfo info_locked(const Node& n) const;

  std::string task_id_;
  GraphOptions options_;

  mutable std::shared_mutex mu_;
  std::deque<Node> nodes_;  // index == NodeId; nodes are never removed
  std::size_t snapshot_count_ = 0;
  std::unordered_map<std::string, Lease> leases_;
  std::multimap<SteadyTime, std::string> lease_expiry_;
  std::unordered_set<std::string> expired_;
  std::deque<std::string> expired_order_;

  struct AtomicStats {
    std::atomic<std::uint64_t> hits{0}, misses{0}, lpm_hits{0}, inserts{0}, evictions{0}, divergent_inserts{0},
        lease_leaks{0}, budget_deferrals{0};
  } stats_;
  std::atomic<std::uint64_t> generation_{0};
};

}  // namespace tvcache
