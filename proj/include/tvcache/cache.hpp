// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/descriptor.hpp"
#include "tvcache/result.hpp"
#include "tvcache/snapshot.hpp"
#include "tvcache/tcg.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

namespace tvcache {

enum class MatchMode { strict, stateful_skip };

std::string_view to_string(MatchMode mode);
MatchMode parse_match_mode(std::string_view text);  // throws MalformedArgs

struct PrefixMatchReply {
  std::size_t matched_len = 0;
  NodeId node_id = kRootId;
  std::optional<NodeId> snapshot_node_id;
  std::size_t snapshot_depth = 0;
  std::optional<std::string> snapshot_id;
  std::optional<std::string> lease_id;
};

nlohmann::json to_json(const PrefixMatchReply& reply);
PrefixMatchReply prefix_match_reply_from_json(const nlohmann::json& j);

/// The operations a rollout needs from the cache, in-process or remote.
/// In stateful_skip mode the trajectory's last element is the target call
/// and everything before it is history.
class CacheClient {
 public:
  virtual ~CacheClient() = default;

  virtual std::optional<ToolResult> get(const std::string& task_id, TrajectoryView q, MatchMode mode) = 0;
  virtual PrefixMatchReply prefix_match(const std::string& task_id, TrajectoryView q, MatchMode mode) = 0;
  /// Returns the node id the result now lives under.
  virtual NodeId put(const std::string& task_id, TrajectoryView q, const ToolResult& result, MatchMode mode,
                     const std::optional<std::string>& snapshot_id = {}) = 0;
  virtual void release(const std::string& task_id, const std::string& lease_id) = 0;
  virtual SnapshotRef store_snapshot(const std::string& task_id, std::string_view bytes, std::string_view backend_kind,
                                     double serialize_ms) = 0;
  virtual std::string load_snapshot(const std::string& task_id, const std::string& snapshot_id) = 0;
  virtual CostModel& cost_model() = 0;
};

/// The query actually matched against the graph: the whole trajectory in
/// strict mode, otherwise the stateful history followed by the target.
Trajectory match_query(TrajectoryView q, MatchMode mode);

struct LocalCacheOptions {
  std::size_t snapshot_budget = 8;
  std::chrono::milliseconds lease_ttl{300'000};
  ClockFn clock;
  SnapshotStoreOptions store;
};

struct PersistReport {
  std::size_t written = 0;
  std::size_t skipped_clean = 0;
  std::size_t failed = 0;
};

/// Registry of per-task graphs sharing one snapshot store. This is the
/// engine behind the HTTP server and also usable directly in-process.
class LocalCache : public CacheClient {
 public:
  explicit LocalCache(LocalCacheOptions options = {});
  ~LocalCache() override;

  std::optional<ToolResult> get(const std::string& task_id, TrajectoryView q, MatchMode mode) override;
  PrefixMatchReply prefix_match(const std::string& task_id, TrajectoryView q, MatchMode mode) override;
  NodeId put(const std::string& task_id, TrajectoryView q, const ToolResult& result, MatchMode mode,
             const std::optional<std::string>& snapshot_id = {}) override;
  void release(const std::string& task_id, const std::string& lease_id) override;
  SnapshotRef store_snapshot(const std::string& task_id, std::string_view bytes, std::string_view backend_kind,
                             double serialize_ms) override;
  std::string load_snapshot(const std::string& task_id, const std::string& snapshot_id) override;
  CostModel& cost_model() override { return cost_model_; }

  /// Called for every snapshot a graph gives up, after the store dropped it.
  void set_release_hook(std::function<void(const std::string& task_id, const std::string& snapshot_id)> hook);

  /// nullptr when the task has never been written.
  TaskGraph* graph(std::string_view task_id) const;
  std::vector<std::string> task_ids() const;
  SnapshotStore& store() { return store_; }

  void put_blob(const std::string& task_id, std::string blob);
  std::optional<std::string> get_blob(const std::string& task_id) const;

  /// Global counters summed over tasks plus a per-task breakdown.
  nlohmann::json stats() const;

  /// Expires leases in every graph; returns how many were reclaimed.
  std::size_t expire_leases();

  /// Writes every graph whose generation moved since its last write (all of
  /// them when `only_dirty` is false) to `dir` via temp file, fsync, rename.
  PersistReport persist(const std::filesystem::path& dir, bool only_dirty = true);

  /// Loads every graph file in `dir`. Unreadable files are counted, renamed
  /// aside with a `.corrupt` suffix, and skipped.
  std::size_t restore(const std::filesystem::path& dir);
  std::size_t corrupt_graphs() const { return corrupt_graphs_.load(); }

  static std::string graph_file_name(std::string_view task_id);

 private:
  TaskGraph& graph_or_create(const std::string& task_id);
  GraphOptions graph_options(const std::string& task_id);
  void on_release(const std::string& task_id, const SnapshotRef& ref);

  LocalCacheOptions options_;
  CostModel cost_model_;
  SnapshotStore store_;

  mutable std::shared_mutex mu_;
  std::map<std::string, std::unique_ptr<TaskGraph>, std::less<>> graphs_;
  std::map<std::string, std::uint64_t> persisted_generation_;
  std::map<std::string, std::string> blobs_;
  std::uint64_t blob_generation_ = 0;
  std::uint64_t blobs_persisted_ = 0;
  std::function<void(const std::string&, const std::string&)> release_hook_;
  std::mutex hook_mu_;
  std::mutex persist_mu_;
  std::atomic<std::size_t> corrupt_graphs_{0};
};

}  // namespace tvcache
