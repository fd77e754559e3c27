// SPDX-License-Identifier: Apache-2.0
#include "tvcache/server.hpp"

#include "tvcache/base64.hpp"
#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/forkpool.hpp"
#include "tvcache/hash.hpp"
#include "tvcache/remote_cache.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <charconv>
#include <cstdlib>

namespace tvcache {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_positive_int(std::string_view key, std::string_view value, bool allow_zero = false) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || (!allow_zero && v == 0))
    throw std::invalid_argument(std::string(key) + ": expected a positive integer, got '" + std::string(value) + "'");
  return v;
}

double parse_positive_double(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(value), &used);
    if (used == value.size() && v > 0) return v;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument(std::string(key) + ": expected a positive number, got '" + std::string(value) + "'");
}

class WrongShard : public Error {
 public:
  using Error::Error;
};

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, std::string_view message) {
  send_json(res, status, {{"error", message}, {"kind", kind}});
}

nlohmann::json parse_body(const httplib::Request& req) {
  auto j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw MalformedArgs("request body must be a JSON object");
  return j;
}

std::string required_string(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_string() || it->get_ref<const std::string&>().empty())
    throw MalformedArgs(std::string(field) + " must be a non-empty string");
  return it->get<std::string>();
}

MatchMode mode_of(const nlohmann::json& j) {
  auto it = j.find("mode");
  if (it == j.end()) return MatchMode::strict;
  if (!it->is_string()) throw MalformedArgs("mode must be a string");
  return parse_match_mode(it->get<std::string>());
}

}  // namespace

void apply_config_value(ServerConfig& c, std::string_view key, std::string_view raw) {
  const std::string value = trim(raw);
  if (key == "listen") {
    split_address(value);
    c.listen_address = value;
  } else if (key == "shards") {
    c.shard_count = parse_positive_int(key, value);
  } else if (key == "shard_index") {
    c.shard_index = parse_positive_int(key, value, true);
  } else if (key == "persist_interval_s") {
    c.persist_interval_s = parse_positive_double(key, value);
  } else if (key == "persist_dir") {
    c.persist_dir = value;
  } else if (key == "budget") {
    c.default_snapshot_budget = parse_positive_int(key, value);
  } else if (key == "lease_ttl_s") {
    c.lease_ttl_s = parse_positive_double(key, value);
  } else if (key == "threads") {
    c.threads = parse_positive_int(key, value);
  } else if (key == "max_in_flight") {
    c.max_in_flight = parse_positive_int(key, value);
  } else if (key == "snapshot_byte_cap") {
    c.snapshot_byte_cap = parse_positive_int(key, value);
  } else if (key == "request_log") {
    c.request_log = value;
  } else {
    throw std::invalid_argument("unknown config key: " + std::string(key));
  }
}

void apply_config_file(ServerConfig& c, const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::invalid_argument("cannot read config file " + file.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(file.string() + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      apply_config_value(c, trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_env(ServerConfig& c) {
  static const std::pair<const char*, const char*> vars[] = {{"TVC_LISTEN", "listen"},
                                                             {"TVC_PERSIST_DIR", "persist_dir"},
                                                             {"TVC_SHARDS", "shards"},
                                                             {"TVC_BUDGET", "budget"},
                                                             {"TVC_LEASE_TTL_S", "lease_ttl_s"}};
  for (const auto& [env, key] : vars) {
    if (const char* v = std::getenv(env); v != nullptr && *v != '\0') {
      try {
        apply_config_value(c, key, v);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string(env) + ": " + e.what());
      }
    }
  }
}

nlohmann::json to_json(const ServerConfig& c) {
  return {{"listen", c.listen_address},
          {"shards", c.shard_count},
          {"shard_index", c.shard_index},
          {"persist_interval_s", c.persist_interval_s},
          {"persist_dir", c.persist_dir.string()},
          {"budget", c.default_snapshot_budget},
          {"lease_ttl_s", c.lease_ttl_s},
          {"threads", c.threads},
          {"max_in_flight", c.max_in_flight},
          {"snapshot_byte_cap", c.snapshot_byte_cap},
          {"request_log", c.request_log.string()}};
}

std::pair<std::string, int> split_address(std::string_view address) {
  if (address.starts_with("http://")) address.remove_prefix(7);
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("address must be host:port");
  std::string host(address.substr(0, colon));
  const std::string_view port_text = address.substr(colon + 1);
  int port = -1;
  const auto [p, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc() || p != port_text.data() + port_text.size() || port < 0 || port > 65535)
    throw std::invalid_argument("bad port in address '" + std::string(address) + "'");
  if (host.empty()) host = "0.0.0.0";
  return {host, port};
}

// ---------------------------------------------------------------------------

Server::Server(ServerConfig config, ClockFn clock) : config_(std::move(config)) {
  if (config_.shard_count == 0) throw std::invalid_argument("shard_count must be at least 1");
  if (config_.shard_index >= config_.shard_count) throw std::invalid_argument("shard_index must be below shard_count");
  LocalCacheOptions opts;
  opts.snapshot_budget = config_.default_snapshot_budget;
  opts.lease_ttl = std::chrono::milliseconds(static_cast<std::int64_t>(config_.lease_ttl_s * 1000.0));
  opts.clock = std::move(clock);
  opts.store.byte_cap = config_.snapshot_byte_cap;
  if (!config_.persist_dir.empty()) opts.store.root = config_.persist_dir / "snapshots";
  cache_ = std::make_unique<LocalCache>(std::move(opts));
  if (!config_.request_log.empty()) {
    log_.open(config_.request_log, std::ios::app);
    if (!log_) throw std::runtime_error("cannot open request log " + config_.request_log.string());
  }
}

Server::~Server() { stop(); }

void Server::set_pool_stats(std::function<nlohmann::json()> fn) {
  std::lock_guard lock(pool_mu_);
  pool_stats_ = std::move(fn);
}

nlohmann::json Server::stats() const {
  nlohmann::json s = cache_->stats();
  {
    std::lock_guard lock(pool_mu_);
    s["pool"] = pool_stats_ ? pool_stats_() : to_json(PoolStats{});
  }
  s["server"] = {{"shard_index", config_.shard_index},
                 {"shard_count", config_.shard_count},
                 {"requests", requests_.load()},
                 {"rejected_overload", rejected_.load()},
                 {"wrong_shard", wrong_shard_.load()},
                 {"in_flight", in_flight_.load()},
                 {"persist_cycles", cycles_.load()},
                 {"persist_failures", persist_failures_.load()},
                 {"uptime_s", running_ ? elapsed_ms(started_at_) / 1000.0 : 0.0}};
  return s;
}

void Server::log_request(std::string_view endpoint, std::string_view task_id, double latency_us,
                         std::string_view outcome) {
  if (!log_.is_open()) return;
  nlohmann::json line = {{"ts", static_cast<double>(unix_millis()) / 1000.0},
                         {"endpoint", endpoint},
                         {"task_id_hash", task_id.empty() ? std::string() : to_hex(fnv1a64(task_id))},
                         {"latency_us", static_cast<std::int64_t>(latency_us)},
                         {"outcome", outcome}};
  std::lock_guard lock(log_mu_);
  log_ << line.dump() << '\n';
  log_.flush();
}

std::uint64_t Server::persist_now() {
  if (config_.persist_dir.empty()) throw MalformedArgs("persistence is disabled (no persist_dir)");
  std::lock_guard lock(cycle_mu_);
  cache_->expire_leases();
  const PersistReport r = cache_->persist(config_.persist_dir);
  if (r.failed > 0) ++persist_failures_;
  return ++cycles_;
}

void Server::persist_loop() {
  const auto interval = std::chrono::duration<double>(config_.persist_interval_s);
  std::unique_lock lock(mu_);
  while (!stopping_) {
    cv_.wait_for(lock, interval, [&] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    try {
      persist_now();
    } catch (const std::exception& e) {
      ++persist_failures_;
      spdlog::error("persistence cycle failed: {}", e.what());
    }
    lock.lock();
  }
}

void Server::install_routes() {
  using Body = std::function<void(const httplib::Request&, httplib::Response&, std::string& task, std::string& outcome)>;
  auto route = [this](std::string endpoint, Body body) {
    return [this, endpoint = std::move(endpoint), body = std::move(body)](const httplib::Request& req,
                                                                          httplib::Response& res) {
      const auto t0 = SteadyClock::now();
      std::string task, outcome;
      ++requests_;
      if (in_flight_.fetch_add(1) >= config_.max_in_flight) {
        --in_flight_;
        ++rejected_;
        send_error(res, 503, "overloaded", "too many requests in flight");
        log_request(endpoint, task, elapsed_ms(t0) * 1000.0, "http_503");
        return;
      }
      try {
        body(req, res, task, outcome);
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, "malformed", e.what());
      } catch (const WrongShard& e) {
        ++wrong_shard_;
        send_error(res, 421, "wrong_shard", e.what());
      } catch (const InvalidDescriptor& e) {
        send_error(res, 400, "invalid_descriptor", e.what());
      } catch (const MalformedArgs& e) {
        send_error(res, 400, "malformed", e.what());
      } catch (const MissingPrefix& e) {
        send_error(res, 409, "missing_prefix", e.what());
      } catch (const UnknownLease& e) {
        send_error(res, 404, "unknown_lease", e.what());
      } catch (const LeaseExpired& e) {
        send_error(res, 410, "lease_expired", e.what());
      } catch (const UnknownSnapshot& e) {
        send_error(res, 404, "unknown_snapshot", e.what());
      } catch (const StorageFull& e) {
        send_error(res, 507, "storage_full", e.what());
      } catch (const std::exception& e) {
        spdlog::error("{}: {}", endpoint, e.what());
        send_error(res, 500, "internal", e.what());
      }
      --in_flight_;
      if (outcome.empty()) outcome = res.status == 200 ? "ok" : "http_" + std::to_string(res.status);
      log_request(endpoint, task, elapsed_ms(t0) * 1000.0, outcome);
    };
  };

  auto check_shard = [this](const std::string& task) {
    if (config_.shard_count > 1 && shard_for(task, config_.shard_count) != config_.shard_index)
      throw WrongShard("task routes to shard " + std::to_string(shard_for(task, config_.shard_count)) +
                       ", this is shard " + std::to_string(config_.shard_index));
  };

  auto put = route("/put", [this, check_shard](const auto& req, auto& res, std::string& task, std::string&) {
    const auto j = parse_body(req);
    task = required_string(j, "task_id");
    check_shard(task);
    const Trajectory q = trajectory_from_json(j.at("trajectory"));
    const ToolResult r = result_from_json(j.at("result"));
    std::optional<std::string> snap;
    if (auto it = j.find("snapshot_id"); it != j.end() && !it->is_null()) snap = it->template get<std::string>();
    NodeId node;
    try {
      node = cache_->put(task, q, r, mode_of(j), snap);
    } catch (const UnknownSnapshot& e) {
      throw MalformedArgs(e.what());
    }
    send_json(res, 200, {{"node_id", node}});
  });
  http_->Put("/put", put);
  http_->Post("/put", put);

  auto get_reply = [this](httplib::Response& res, const std::string& task, const Trajectory& q, MatchMode mode,
                          std::string& outcome) {
    auto hit = cache_->get(task, q, mode);
    outcome = hit ? "hit" : "miss";
    if (hit)
      send_json(res, 200, {{"hit", true}, {"result", to_json(*hit)}});
    else
      send_json(res, 200, {{"hit", false}});
  };

  http_->Post("/get", route("/get", [check_shard, get_reply](const auto& req, auto& res, std::string& task,
                                                              std::string& outcome) {
                const auto j = parse_body(req);
                task = required_string(j, "task_id");
                check_shard(task);
                get_reply(res, task, trajectory_from_json(j.at("trajectory")), mode_of(j), outcome);
              }));

  // GET alias: the trajectory travels base64-encoded in X-TVC-Key, its hash in the query.
  http_->Get("/get", route("/get", [check_shard, get_reply](const auto& req, auto& res, std::string& task,
                                                             std::string& outcome) {
               task = req.get_param_value("task_id");
               if (task.empty()) throw MalformedArgs("task_id query parameter is required");
               check_shard(task);
               const auto key = base64::decode(req.get_header_value("X-TVC-Key"));
               if (!key) throw MalformedArgs("X-TVC-Key must be base64 of the encoded trajectory");
               const Trajectory q = decode_trajectory(*key);
               if (req.get_param_value("hash") != to_hex(trajectory_hash(q)))
                 throw MalformedArgs("hash does not match X-TVC-Key");
               const std::string mode = req.get_param_value("mode");
               get_reply(res, task, q, mode.empty() ? MatchMode::strict : parse_match_mode(mode), outcome);
             }));

  http_->Post("/prefix_match",
              route("/prefix_match", [this, check_shard](const auto& req, auto& res, std::string& task, std::string&) {
                const auto j = parse_body(req);
                task = required_string(j, "task_id");
                check_shard(task);
                const Trajectory q = trajectory_from_json(j.at("trajectory"));
                send_json(res, 200, to_json(cache_->prefix_match(task, q, mode_of(j))));
              }));

  http_->Post("/release",
              route("/release", [this, check_shard](const auto& req, auto& res, std::string& task, std::string&) {
                const auto j = parse_body(req);
                task = required_string(j, "task_id");
                check_shard(task);
                cache_->release(task, required_string(j, "lease_id"));
                send_json(res, 200, {{"released", true}});
              }));

  http_->Get("/stats", route("/stats", [this](const auto&, auto& res, std::string&, std::string&) {
               send_json(res, 200, stats());
             }));

  http_->Get("/graph", route("/graph", [this](const auto& req, auto& res, std::string& task, std::string&) {
               task = req.get_param_value("task_id");
               TaskGraph* g = task.empty() ? nullptr : cache_->graph(task);
               if (g == nullptr) {
                 send_error(res, 404, "unknown_task", "unknown task: " + task);
                 return;
               }
               res.status = 200;
               res.set_content(g->export_dot(), "text/vnd.graphviz");
             }));

  http_->Put("/snapshot", route("/snapshot", [this, check_shard](const auto& req, auto& res, std::string& task,
                                                                 std::string&) {
               task = req.get_param_value("task_id");
               if (task.empty()) throw MalformedArgs("task_id query parameter is required");
               check_shard(task);
               const std::string kind = req.get_param_value("kind");
               if (kind.empty()) throw MalformedArgs("kind query parameter is required");
               double ser = 0;
               if (req.has_param("serialize_ms")) ser = std::stod(req.get_param_value("serialize_ms"));
               send_json(res, 200, to_json(cache_->store_snapshot(task, req.body, kind, ser)));
             }));

  http_->Get("/snapshot", route("/snapshot", [this](const auto& req, auto& res, std::string& task, std::string&) {
               task = req.get_param_value("task_id");
               const std::string id = req.get_param_value("id");
               if (id.empty()) throw MalformedArgs("id query parameter is required");
               res.status = 200;
               res.set_content(cache_->load_snapshot(task, id), "application/octet-stream");
             }));

  http_->Put("/task_blob", route("/task_blob", [this, check_shard](const auto& req, auto& res, std::string& task,
                                                                   std::string&) {
               task = req.get_param_value("task_id");
               if (task.empty()) throw MalformedArgs("task_id query parameter is required");
               check_shard(task);
               cache_->put_blob(task, req.body);
               send_json(res, 200, {{"stored", req.body.size()}});
             }));

  http_->Get("/task_blob", route("/task_blob", [this](const auto& req, auto& res, std::string& task, std::string&) {
               task = req.get_param_value("task_id");
               auto blob = cache_->get_blob(task);
               if (!blob) {
                 send_error(res, 404, "unknown_task", "no blob for task: " + task);
                 return;
               }
               res.status = 200;
               res.set_content(*blob, "application/octet-stream");
             }));

  http_->Post("/persist", route("/persist", [this](const auto&, auto& res, std::string&, std::string&) {
                const std::uint64_t cycle = persist_now();
                send_json(res, 200, {{"cycle", cycle}});
              }));

  http_->Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200,
              {{"ok", true}, {"shard_index", config_.shard_index}, {"shard_count", config_.shard_count}});
  });
}

void Server::start() {
  if (running_) return;
  if (!config_.persist_dir.empty()) {
    std::filesystem::create_directories(config_.persist_dir);
    const std::size_t n = cache_->restore(config_.persist_dir);
    spdlog::info("restored {} task graph(s) from {}", n, config_.persist_dir.string());
  }
  http_ = std::make_unique<httplib::Server>();
  const std::size_t threads = config_.threads;
  http_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  http_->set_keep_alive_max_count(100000);
  http_->set_tcp_nodelay(true);
  install_routes();
  const auto [host, port] = split_address(config_.listen_address);
  if (port == 0) {
    port_ = http_->bind_to_any_port(host);
    if (port_ < 0) throw std::runtime_error("cannot bind " + host);
  } else {
    if (!http_->bind_to_port(host, port)) throw std::runtime_error("cannot bind " + config_.listen_address);
    port_ = port;
  }
  {
    std::lock_guard lock(mu_);
    stopping_ = false;
    running_ = true;
  }
  started_at_ = SteadyClock::now();
  listener_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();  // stop() is a no-op before the accept loop runs
  if (!config_.persist_dir.empty()) persister_ = std::thread([this] { persist_loop(); });
  spdlog::info("shard {}/{} listening on {}:{}", config_.shard_index, config_.shard_count, host, port_);
}

void Server::stop() {
  {
    std::lock_guard lock(mu_);
    if (!running_) return;
    stopping_ = true;
    running_ = false;
  }
  cv_.notify_all();
  http_->stop();
  if (listener_.joinable()) listener_.join();
  if (persister_.joinable()) persister_.join();
  if (!config_.persist_dir.empty()) {
    try {
      persist_now();
    } catch (const std::exception& e) {
      spdlog::error("final persistence cycle failed: {}", e.what());
    }
  }
}

void Server::wait() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return stopping_ || !running_; });
}

}  // namespace tvcache
