// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tvcache {

struct SnapshotRef {
  std::string snapshot_id;
  std::uint64_t size_bytes = 0;
  double serialize_ms = 0.0;
  std::int64_t created_at_ms = 0;  // unix epoch milliseconds
  std::string backend_kind;

  friend bool operator==(const SnapshotRef&, const SnapshotRef&) = default;
};

nlohmann::json to_json(const SnapshotRef& ref);
SnapshotRef snapshot_ref_from_json(const nlohmann::json& j);

/// Per-backend exponentially weighted estimates of snapshot serialize and
/// restore cost. Estimates start at a pessimistic cold default so cheap
/// tools are not snapshotted before anything has been measured.
class CostModel {
 public:
  struct Estimate {
    double serialize_ms;
    double restore_ms;
    double overhead_ms() const { return serialize_ms + restore_ms; }
  };

  explicit CostModel(double ema_alpha = 0.2, double cold_start_ms = 1000.0);

  double alpha() const { return alpha_; }
  double cold_start_ms() const { return cold_start_ms_; }

  void observe_serialize(std::string_view backend_kind, double serialize_ms);
  void observe_restore(std::string_view backend_kind, double restore_ms);

  Estimate estimate(std::string_view backend_kind) const;
  double overhead_ms(std::string_view backend_kind) const { return estimate(backend_kind).overhead_ms(); }

 private:
  double alpha_;
  double cold_start_ms_;
  mutable std::mutex mu_;
  std::map<std::string, Estimate, std::less<>> by_kind_;
};

/// True iff executing the tool cost strictly more than serializing and later
/// restoring a snapshot of the sandbox it ran in.
bool should_snapshot(double exec_ms, const CostModel& model, std::string_view backend_kind);

struct SnapshotStoreOptions {
  std::filesystem::path root;  // empty => memory only
  std::uint64_t byte_cap = 1ULL << 32;
};

/// Snapshot bytes keyed by opaque id. On disk the layout is
/// <root>/<backend_kind>/<snapshot_id>.bin plus <root>/index.jsonl.
class SnapshotStore {
 public:
  explicit SnapshotStore(SnapshotStoreOptions options = {}, CostModel* cost_model = nullptr);

  SnapshotStore(const SnapshotStore&) = delete;
  SnapshotStore& operator=(const SnapshotStore&) = delete;

  /// serialize_ms is the caller-measured time to produce the bytes; the time
  /// spent writing them is added before recording and feeding the cost model.
  SnapshotRef store(std::string_view bytes, std::string_view backend_kind, double serialize_ms = 0.0);
  std::string load(std::string_view snapshot_id) const;
  void drop(std::string_view snapshot_id);

  bool contains(std::string_view snapshot_id) const;
  std::optional<SnapshotRef> find(std::string_view snapshot_id) const;
  std::size_t count() const;
  std::uint64_t bytes_used() const;
  std::uint64_t byte_cap() const { return options_.byte_cap; }
  bool persistent() const { return !options_.root.empty(); }

 private:
  struct Entry {
    SnapshotRef ref;
    std::string bytes;  // populated only for memory-only stores
  };

  std::filesystem::path file_for(const SnapshotRef& ref) const;
  void load_index();
  void append_index(const SnapshotRef& ref);
  void rewrite_index_locked();

  SnapshotStoreOptions options_;
  CostModel* cost_model_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, Entry> entries_;
  std::uint64_t bytes_used_ = 0;
  std::uint64_t next_seq_ = 1;
};

}  // namespace tvcache
