// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/cache.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace httplib {
class Client;
}

namespace tvcache {

/// Appends {step, endpoint, request, response} JSON lines.
class TraceRecorder {
 public:
  explicit TraceRecorder(const std::filesystem::path& path);
  void record(std::string_view endpoint, const nlohmann::json& request, const nlohmann::json& response);
  std::uint64_t steps() const;

 private:
  mutable std::mutex mu_;
  std::ofstream out_;
  std::uint64_t step_ = 0;
};

struct HttpReply {
  int status = 0;
  std::string body;
  std::string content_type;
};

/// Keep-alive connections to one server, usable from many threads.
class HttpEndpoint {
 public:
  /// `address` is host:port, optionally prefixed with http://.
  explicit HttpEndpoint(std::string address, std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  ~HttpEndpoint();

  const std::string& address() const { return address_; }

  /// Throws CacheUnavailable on connection failure.
  HttpReply send(const std::string& method, const std::string& path, const std::string& body = {},
                 const std::string& content_type = "application/json",
                 const std::vector<std::pair<std::string, std::string>>& headers = {});

 private:
  std::unique_ptr<httplib::Client> checkout();
  void checkin(std::unique_ptr<httplib::Client> c);

  std::string address_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::vector<std::unique_ptr<httplib::Client>> idle_;
};

struct RemoteCacheOptions {
  std::vector<std::string> addresses;  // one per shard, in shard order
  std::chrono::milliseconds timeout{5000};
  std::size_t retries = 2;  // extra attempts on connection errors and 503
  std::optional<std::filesystem::path> trace_path;
};

/// CacheClient over the HTTP wire protocol. Task ids are routed to shard
/// fnv1a64(task_id) mod shard count.
class RemoteCache : public CacheClient {
 public:
  explicit RemoteCache(RemoteCacheOptions options);
  ~RemoteCache() override;

  std::optional<ToolResult> get(const std::string& task_id, TrajectoryView q, MatchMode mode) override;
  PrefixMatchReply prefix_match(const std::string& task_id, TrajectoryView q, MatchMode mode) override;
  NodeId put(const std::string& task_id, TrajectoryView q, const ToolResult& result, MatchMode mode,
             const std::optional<std::string>& snapshot_id = {}) override;
  void release(const std::string& task_id, const std::string& lease_id) override;
  SnapshotRef store_snapshot(const std::string& task_id, std::string_view bytes, std::string_view backend_kind,
                             double serialize_ms) override;
  std::string load_snapshot(const std::string& task_id, const std::string& snapshot_id) override;
  CostModel& cost_model() override { return cost_model_; }

  std::size_t shard_count() const { return endpoints_.size(); }
  /// Lines written to the trace so far; 0 without a trace.
  std::uint64_t trace_steps() const { return trace_ ? trace_->steps() : 0; }
  HttpEndpoint& endpoint_for(std::string_view task_id);
  HttpEndpoint& endpoint(std::size_t shard) { return *endpoints_.at(shard); }

 private:
  // POST/PUT a JSON body; maps error statuses to exceptions.
  nlohmann::json call(std::string_view task_id, const std::string& method, const std::string& path,
                      const nlohmann::json& body);
  HttpReply send_with_retry(HttpEndpoint& ep, const std::string& method, const std::string& path,
                            const std::string& body, const std::string& content_type,
                            const std::vector<std::pair<std::string, std::string>>& headers = {});

  RemoteCacheOptions options_;
  std::vector<std::unique_ptr<HttpEndpoint>> endpoints_;
  CostModel cost_model_;
  std::unique_ptr<TraceRecorder> trace_;
};

/// Throws the exception matching an error reply ({"error", "kind"} body).
[[noreturn]] void throw_for_status(const HttpReply& reply, std::string_view what);

nlohmann::json trajectory_to_json(TrajectoryView q);
Trajectory trajectory_from_json(const nlohmann::json& j);

}  // namespace tvcache
