// SPDX-License-Identifier: Apache-2.0
#include "tvcache/remote_cache.hpp"

#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <thread>

namespace tvcache {

TraceRecorder::TraceRecorder(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open trace file " + path.string());
}

void TraceRecorder::record(std::string_view endpoint, const nlohmann::json& request, const nlohmann::json& response) {
  std::lock_guard lock(mu_);
  nlohmann::json line = {{"step", step_++}, {"endpoint", endpoint}, {"request", request}, {"response", response}};
  out_ << line.dump() << '\n';
  out_.flush();
}

std::uint64_t TraceRecorder::steps() const {
  std::lock_guard lock(mu_);
  return step_;
}

HttpEndpoint::HttpEndpoint(std::string address, std::chrono::milliseconds timeout)
    : address_(std::move(address)), timeout_(timeout) {
  if (!address_.starts_with("http://")) address_ = "http://" + address_;
}

HttpEndpoint::~HttpEndpoint() = default;

std::unique_ptr<httplib::Client> HttpEndpoint::checkout() {
  {
    std::lock_guard lock(mu_);
    if (!idle_.empty()) {
      auto c = std::move(idle_.back());
      idle_.pop_back();
      return c;
    }
  }
  auto c = std::make_unique<httplib::Client>(address_);
  c->set_keep_alive(true);
  c->set_tcp_nodelay(true);
  c->set_connection_timeout(timeout_);
  c->set_read_timeout(timeout_);
  c->set_write_timeout(timeout_);
  return c;
}

void HttpEndpoint::checkin(std::unique_ptr<httplib::Client> c) {
  std::lock_guard lock(mu_);
  if (idle_.size() < 64) idle_.push_back(std::move(c));
}

HttpReply HttpEndpoint::send(const std::string& method, const std::string& path, const std::string& body,
                             const std::string& content_type,
                             const std::vector<std::pair<std::string, std::string>>& headers) {
  auto client = checkout();
  httplib::Headers h(headers.begin(), headers.end());
  httplib::Result res;
  if (method == "GET")
    res = client->Get(path, h);
  else if (method == "POST")
    res = client->Post(path, h, body, content_type);
  else if (method == "PUT")
    res = client->Put(path, h, body, content_type);
  else
    throw std::invalid_argument("unsupported method " + method);
  if (!res) {
    // drop the connection; it may be half-open
    throw CacheUnavailable(address_ + path + ": " + httplib::to_string(res.error()));
  }
  HttpReply reply{res->status, std::move(res->body), res->get_header_value("Content-Type")};
  checkin(std::move(client));
  return reply;
}

void throw_for_status(const HttpReply& reply, std::string_view what) {
  std::string message = std::string(what) + ": HTTP " + std::to_string(reply.status);
  std::string kind;
  try {
    const auto j = nlohmann::json::parse(reply.body);
    kind = j.value("kind", "");
    message += ": " + j.value("error", "");
  } catch (const std::exception&) {
  }
  if (reply.status >= 500 || reply.status == 421) throw CacheUnavailable(message);
  if (reply.status == 409) throw MissingPrefix(message);
  if (reply.status == 410) throw LeaseExpired(message);
  if (kind == "unknown_lease") throw UnknownLease(message);
  if (kind == "unknown_snapshot") throw UnknownSnapshot(message);
  if (kind == "invalid_descriptor") throw InvalidDescriptor(message);
  if (reply.status == 400) throw MalformedArgs(message);
  throw Error(message);
}

nlohmann::json trajectory_to_json(TrajectoryView q) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : q) arr.push_back(to_json(d));
  return arr;
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidDescriptor("trajectory must be an array");
  Trajectory out;
  out.reserve(j.size());
  for (const auto& d : j) {
    out.push_back(descriptor_from_json(d));
    validate(out.back());
  }
  return out;
}

RemoteCache::RemoteCache(RemoteCacheOptions options) : options_(std::move(options)) {
  if (options_.addresses.empty()) throw std::invalid_argument("at least one server address is required");
  for (const auto& a : options_.addresses) endpoints_.push_back(std::make_unique<HttpEndpoint>(a, options_.timeout));
  if (options_.trace_path) trace_ = std::make_unique<TraceRecorder>(*options_.trace_path);
}

RemoteCache::~RemoteCache() = default;

HttpEndpoint& RemoteCache::endpoint_for(std::string_view task_id) {
  return *endpoints_[shard_for(task_id, endpoints_.size())];
}

HttpReply RemoteCache::send_with_retry(HttpEndpoint& ep, const std::string& method, const std::string& path,
                                       const std::string& body, const std::string& content_type,
                                       const std::vector<std::pair<std::string, std::string>>& headers) {
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      HttpReply r = ep.send(method, path, body, content_type, headers);
      if (r.status != 503 || attempt >= options_.retries) return r;
    } catch (const CacheUnavailable&) {
      if (attempt >= options_.retries) throw;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20 << attempt));
  }
}

nlohmann::json RemoteCache::call(std::string_view task_id, const std::string& method, const std::string& path,
                                 const nlohmann::json& body) {
  const HttpReply r = send_with_retry(endpoint_for(task_id), method, path, body.dump(), "application/json");
  nlohmann::json parsed;
  try {
    parsed = r.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(r.body);
  } catch (const std::exception&) {
    parsed = {{"raw", r.body}};
  }
  if (trace_) trace_->record(path, body, {{"status", r.status}, {"body", parsed}});
  if (r.status != 200) throw_for_status(r, path);
  return parsed;
}

std::optional<ToolResult> RemoteCache::get(const std::string& task_id, TrajectoryView q, MatchMode mode) {
  const auto j = call(task_id, "POST", "/get",
                      {{"task_id", task_id}, {"trajectory", trajectory_to_json(q)}, {"mode", to_string(mode)}});
  if (!j.value("hit", false)) return std::nullopt;
  return result_from_json(j.at("result"));
}

PrefixMatchReply RemoteCache::prefix_match(const std::string& task_id, TrajectoryView q, MatchMode mode) {
  return prefix_match_reply_from_json(
      call(task_id, "POST", "/prefix_match",
           {{"task_id", task_id}, {"trajectory", trajectory_to_json(q)}, {"mode", to_string(mode)}}));
}

NodeId RemoteCache::put(const std::string& task_id, TrajectoryView q, const ToolResult& result, MatchMode mode,
                        const std::optional<std::string>& snapshot_id) {
  nlohmann::json body = {{"task_id", task_id},
                         {"trajectory", trajectory_to_json(q)},
                         {"result", to_json(result)},
                         {"mode", to_string(mode)}};
  if (snapshot_id) body["snapshot_id"] = *snapshot_id;
  return call(task_id, "PUT", "/put", body).at("node_id").get<NodeId>();
}

void RemoteCache::release(const std::string& task_id, const std::string& lease_id) {
  call(task_id, "POST", "/release", {{"task_id", task_id}, {"lease_id", lease_id}});
}

SnapshotRef RemoteCache::store_snapshot(const std::string& task_id, std::string_view bytes,
                                        std::string_view backend_kind, double serialize_ms) {
  const std::string path = "/snapshot?task_id=" + httplib::detail::encode_query_param(task_id) +
                           "&kind=" + httplib::detail::encode_query_param(std::string(backend_kind)) +
                           "&serialize_ms=" + std::to_string(serialize_ms);
  const auto t0 = SteadyClock::now();
  const HttpReply r =
      send_with_retry(endpoint_for(task_id), "PUT", path, std::string(bytes), "application/octet-stream");
  if (r.status != 200) throw_for_status(r, "/snapshot");
  cost_model_.observe_serialize(backend_kind, serialize_ms + elapsed_ms(t0));
  const auto ref = snapshot_ref_from_json(nlohmann::json::parse(r.body));
  if (trace_)
    trace_->record("/snapshot", {{"method", "PUT"},
                                  {"task_id", task_id},
                                  {"kind", backend_kind},
                                  {"serialize_ms", serialize_ms},
                                  {"size_bytes", bytes.size()}},
                   {{"status", r.status}, {"body", {{"snapshot_id", ref.snapshot_id}}}});
  return ref;
}

std::string RemoteCache::load_snapshot(const std::string& task_id, const std::string& snapshot_id) {
  const std::string path = "/snapshot?task_id=" + httplib::detail::encode_query_param(task_id) +
                           "&id=" + httplib::detail::encode_query_param(snapshot_id);
  const HttpReply r = send_with_retry(endpoint_for(task_id), "GET", path, {}, {});
  if (trace_)
    trace_->record("/snapshot", {{"method", "GET"}, {"task_id", task_id}, {"snapshot_id", snapshot_id}},
                   {{"status", r.status}, {"body", {{"size_bytes", r.body.size()}}}});
  if (r.status != 200) throw_for_status(r, "/snapshot");
  return r.body;
}

}  // namespace tvcache
