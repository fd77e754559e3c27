// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tvcache/cache.hpp"

#include <json.hpp>

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace tvcache {

struct ServerConfig {
  std::string listen_address = "127.0.0.1:8470";  // port 0 picks a free port
  std::size_t shard_count = 1;
  std::size_t shard_index = 0;
  double persist_interval_s = 5.0;
  std::filesystem::path persist_dir;  // empty disables persistence
  std::size_t default_snapshot_budget = 8;
  double lease_ttl_s = 300.0;
  std::size_t threads = 8;
  std::size_t max_in_flight = 512;
  std::uint64_t snapshot_byte_cap = 1ULL << 32;
  std::filesystem::path request_log;  // empty disables the JSONL request log
};

/// Applies `key = value` lines (# starts a comment). Keys: listen,
/// shards, shard_index, persist_interval_s, persist_dir, budget,
/// lease_ttl_s, threads, max_in_flight, snapshot_byte_cap, request_log.
/// Throws std::invalid_argument on unknown keys or bad values.
void apply_config_file(ServerConfig& config, const std::filesystem::path& file);
void apply_config_value(ServerConfig& config, std::string_view key, std::string_view value);

/// TVC_LISTEN, TVC_PERSIST_DIR, TVC_SHARDS, TVC_BUDGET, TVC_LEASE_TTL_S.
void apply_env(ServerConfig& config);

nlohmann::json to_json(const ServerConfig& config);

/// Splits "host:port"; a missing host means 0.0.0.0.
std::pair<std::string, int> split_address(std::string_view address);

/// The cache HTTP service for one shard.
class Server {
 public:
  explicit Server(ServerConfig config, ClockFn clock = {});
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Restores persisted graphs, binds and starts serving in the background.
  /// Throws std::runtime_error if the address cannot be bound.
  void start();
  void stop();
  /// Blocks until stop() is called (from another thread or a signal).
  void wait();

  int port() const { return port_; }
  const ServerConfig& config() const { return config_; }
  LocalCache& cache() { return *cache_; }

  /// Runs one persistence cycle now; returns its cycle number.
  std::uint64_t persist_now();
  std::uint64_t persist_cycles() const { return cycles_.load(); }

  /// Optional source of the "pool" section of /stats.
  void set_pool_stats(std::function<nlohmann::json()> fn);

  nlohmann::json stats() const;

 private:
  void install_routes();
  void persist_loop();
  void log_request(std::string_view endpoint, std::string_view task_id, double latency_us, std::string_view outcome);

  ServerConfig config_;
  std::unique_ptr<LocalCache> cache_;
  std::unique_ptr<httplib::Server> http_;
  std::thread listener_;
  std::thread persister_;
  int port_ = 0;

  std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  bool running_ = false;

  std::atomic<std::uint64_t> cycles_{0};
  std::mutex cycle_mu_;
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::uint64_t> requests_{0}, rejected_{0}, wrong_shard_{0}, persist_failures_{0};
  std::chrono::steady_clock::time_point started_at_;

  std::mutex log_mu_;
  std::ofstream log_;

  mutable std::mutex pool_mu_;
  std::function<nlohmann::json()> pool_stats_;
};

}  // namespace tvcache
