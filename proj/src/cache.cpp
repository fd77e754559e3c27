// SPDX-License-Identifier: Apache-2.0
#include "tvcache/cache.hpp"

#include "tvcache/base64.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"

#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

namespace tvcache {

namespace fs = std::filesystem;

std::string_view to_string(MatchMode mode) {
  return mode == MatchMode::strict ? "strict" : "stateful_skip";
}

MatchMode parse_match_mode(std::string_view text) {
  if (text == "strict") return MatchMode::strict;
  if (text == "stateful_skip") return MatchMode::stateful_skip;
  throw MalformedArgs("mode must be \"strict\" or \"stateful_skip\"");
}

nlohmann::json to_json(const PrefixMatchReply& r) {
  nlohmann::json j = {{"matched_len", r.matched_len}, {"node_id", r.node_id}, {"snapshot_depth", r.snapshot_depth}};
  if (r.snapshot_node_id) j["snapshot_node_id"] = *r.snapshot_node_id;
  if (r.snapshot_id) j["snapshot_id"] = *r.snapshot_id;
  if (r.lease_id) j["lease_id"] = *r.lease_id;
  return j;
}

PrefixMatchReply prefix_match_reply_from_json(const nlohmann::json& j) {
  PrefixMatchReply r;
  r.matched_len = j.at("matched_len").get<std::size_t>();
  r.node_id = j.at("node_id").get<NodeId>();
  r.snapshot_depth = j.value("snapshot_depth", std::size_t{0});
  if (j.contains("snapshot_node_id")) r.snapshot_node_id = j["snapshot_node_id"].get<NodeId>();
  if (j.contains("snapshot_id")) r.snapshot_id = j["snapshot_id"].get<std::string>();
  if (j.contains("lease_id")) r.lease_id = j["lease_id"].get<std::string>();
  return r;
}

Trajectory match_query(TrajectoryView q, MatchMode mode) {
  if (mode == MatchMode::strict || q.empty()) return Trajectory(q.begin(), q.end());
  Trajectory out = filter_stateful(q.first(q.size() - 1));
  out.push_back(q.back());
  return out;
}

namespace {

void write_all(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("write " + path.string() + ": " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Temp file, fsync, rename, fsync of the directory.
void write_file_atomic(const fs::path& path, std::string_view data) {
  const fs::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("open " + tmp.string() + ": " + std::strerror(errno));
  try {
    write_all(fd, data, tmp);
    if (::fsync(fd) != 0) throw std::runtime_error("fsync " + tmp.string() + ": " + std::strerror(errno));
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  fs::rename(tmp, path);
  const int dfd = ::open(path.parent_path().c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (dfd >= 0) {
    ::fsync(dfd);
    ::close(dfd);
  }
}

constexpr std::string_view kGraphPrefix = "task-";
constexpr std::string_view kGraphSuffix = ".tcg";
constexpr std::string_view kBlobFile = "task_blobs.json";

}  // namespace

LocalCache::LocalCache(LocalCacheOptions options)
    : options_(std::move(options)), store_(options_.store, &cost_model_) {}

LocalCache::~LocalCache() = default;

void LocalCache::set_release_hook(std::function<void(const std::string&, const std::string&)> hook) {
  std::lock_guard lock(hook_mu_);
  release_hook_ = std::move(hook);
}

void LocalCache::on_release(const std::string& task_id, const SnapshotRef& ref) {
  try {
    store_.drop(ref.snapshot_id);
  } catch (const UnknownSnapshot&) {
  }
  std::function<void(const std::string&, const std::string&)> hook;
  {
    std::lock_guard lock(hook_mu_);
    hook = release_hook_;
  }
  if (hook) hook(task_id, ref.snapshot_id);
}

GraphOptions LocalCache::graph_options(const std::string& task_id) {
  GraphOptions g;
  g.snapshot_budget = options_.snapshot_budget;
  g.lease_ttl = options_.lease_ttl;
  g.clock = options_.clock;
  g.on_snapshot_released = [this, task_id](NodeId, const SnapshotRef& ref) { on_release(task_id, ref); };
  return g;
}

TaskGraph* LocalCache::graph(std::string_view task_id) const {
  std::shared_lock lock(mu_);
  auto it = graphs_.find(task_id);
  return it == graphs_.end() ? nullptr : it->second.get();
}

TaskGraph& LocalCache::graph_or_create(const std::string& task_id) {
  if (TaskGraph* g = graph(task_id)) return *g;
  std::unique_lock lock(mu_);
  auto& slot = graphs_[task_id];
  if (!slot) slot = std::make_unique<TaskGraph>(task_id, graph_options(task_id));
  return *slot;
}

std::vector<std::string> LocalCache::task_ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, g] : graphs_) out.push_back(id);
  return out;
}

std::optional<ToolResult> LocalCache::get(const std::string& task_id, TrajectoryView q, MatchMode mode) {
  if (q.empty()) throw InvalidDescriptor("trajectory must not be empty");
  TaskGraph* g = graph(task_id);
  if (g == nullptr) return std::nullopt;
  if (mode == MatchMode::strict) return g->lookup_exact(q);
  return g->lookup_stateful(q.first(q.size() - 1), q.back());
}

PrefixMatchReply LocalCache::prefix_match(const std::string& task_id, TrajectoryView q, MatchMode mode) {
  PrefixMatchReply reply;
  TaskGraph* g = graph(task_id);
  if (g == nullptr || q.empty()) return reply;
  const Trajectory query = match_query(q, mode);
  // A snapshot whose bytes are gone is forgotten and the match retried.
  for (int attempt = 0; attempt < 8; ++attempt) {
    PrefixMatch m = g->longest_prefix_match(query);
    if (m.snapshot && !store_.contains(m.snapshot->snapshot_id)) {
      spdlog::warn("task {}: snapshot {} no longer in the store", task_id, m.snapshot->snapshot_id);
      g->invalidate_snapshot(*m.snapshot_node_id, m.snapshot->snapshot_id);
      if (m.lease_id) {
        try {
          g->release(*m.lease_id);
        } catch (const Error&) {
        }
      }
      continue;
    }
    reply.matched_len = m.matched_len;
    reply.node_id = m.node_id;
    reply.snapshot_node_id = m.snapshot_node_id;
    reply.snapshot_depth = m.snapshot_depth;
    if (m.snapshot) reply.snapshot_id = m.snapshot->snapshot_id;
    reply.lease_id = m.lease_id;
    return reply;
  }
  throw CacheUnavailable("snapshot store keeps losing snapshots for task " + task_id);
}

NodeId LocalCache::put(const std::string& task_id, TrajectoryView q, const ToolResult& result, MatchMode mode,
                       const std::optional<std::string>& snapshot_id) {
  if (q.empty()) throw InvalidDescriptor("trajectory must not be empty");
  for (const auto& d : q) validate(d);
  std::optional<SnapshotRef> ref;
  if (snapshot_id) {
    ref = store_.find(*snapshot_id);
    if (!ref) throw UnknownSnapshot("unknown snapshot id: " + *snapshot_id);
  }
  TaskGraph& g = graph_or_create(task_id);
  if (mode == MatchMode::stateful_skip && !q.back().mutates_state) {
    const NodeId anchor = g.attach_stateless(filter_stateful(q.first(q.size() - 1)), q.back(), result);
    // stateless results live on the anchor; the anchor gets no new snapshot
    if (ref) on_release(task_id, *ref);
    return anchor;
  }
  const Trajectory path = mode == MatchMode::strict ? Trajectory(q.begin(), q.end()) : filter_stateful(q);
  return g.insert(path, result, ref);
}

void LocalCache::release(const std::string& task_id, const std::string& lease_id) {
  TaskGraph* g = graph(task_id);
  if (g == nullptr) throw UnknownLease("unknown lease: " + lease_id);
  g->release(lease_id);
}

SnapshotRef LocalCache::store_snapshot(const std::string&, std::string_view bytes, std::string_view backend_kind,
                                       double serialize_ms) {
  return store_.store(bytes, backend_kind, serialize_ms);
}

std::string LocalCache::load_snapshot(const std::string&, const std::string& snapshot_id) {
  return store_.load(snapshot_id);
}

void LocalCache::put_blob(const std::string& task_id, std::string blob) {
  std::unique_lock lock(mu_);
  blobs_[task_id] = std::move(blob);
  ++blob_generation_;
}

std::optional<std::string> LocalCache::get_blob(const std::string& task_id) const {
  std::shared_lock lock(mu_);
  auto it = blobs_.find(task_id);
  if (it == blobs_.end()) return std::nullopt;
  return it->second;
}

std::size_t LocalCache::expire_leases() {
  std::size_t n = 0;
  for (const auto& id : task_ids())
    if (TaskGraph* g = graph(id)) n += g->expire_leases();
  return n;
}

nlohmann::json LocalCache::stats() const {
  GraphStats total;
  nlohmann::json tasks = nlohmann::json::object();
  std::size_t nodes = 0, snapshots = 0, leases = 0;
  std::vector<std::pair<std::string, TaskGraph*>> gs;
  {
    std::shared_lock lock(mu_);
    for (const auto& [id, g] : graphs_) gs.emplace_back(id, g.get());
  }
  for (const auto& [id, g] : gs) {
    const GraphStats s = g->stats();
    total.hits += s.hits;
    total.misses += s.misses;
    total.lpm_hits += s.lpm_hits;
    total.inserts += s.inserts;
    total.evictions += s.evictions;
    total.divergent_inserts += s.divergent_inserts;
    total.lease_leaks += s.lease_leaks;
    total.budget_deferrals += s.budget_deferrals;
    nlohmann::json t = to_json(s);
    t["nodes"] = g->node_count();
    t["snapshots"] = g->snapshot_count();
    t["active_leases"] = g->active_leases();
    const auto lookups = s.hits + s.misses;
    t["hit_rate"] = lookups == 0 ? 0.0 : static_cast<double>(s.hits) / static_cast<double>(lookups);
    nodes += g->node_count();
    snapshots += g->snapshot_count();
    leases += g->active_leases();
    tasks[id] = std::move(t);
  }
  nlohmann::json global = to_json(total);
  const auto lookups = total.hits + total.misses;
  global["hit_rate"] = lookups == 0 ? 0.0 : static_cast<double>(total.hits) / static_cast<double>(lookups);
  global["tasks"] = gs.size();
  global["nodes"] = nodes;
  global["snapshots"] = snapshots;
  global["active_leases"] = leases;
  global["corrupt_graphs"] = corrupt_graphs_.load();
  return {{"global", global},
          {"tasks", tasks},
          {"snapshot_store", {{"count", store_.count()}, {"bytes", store_.bytes_used()}}}};
}

std::string LocalCache::graph_file_name(std::string_view task_id) {
  return std::string(kGraphPrefix) + to_hex(fnv1a64(task_id)) + std::string(kGraphSuffix);
}

PersistReport LocalCache::persist(const fs::path& dir, bool only_dirty) {
  std::lock_guard persist_lock(persist_mu_);
  fs::create_directories(dir);
  PersistReport report;
  std::vector<std::pair<std::string, TaskGraph*>> gs;
  {
    std::shared_lock lock(mu_);
    for (const auto& [id, g] : graphs_) gs.emplace_back(id, g.get());
  }
  for (const auto& [id, g] : gs) {
    // read before serializing: a concurrent change leaves the graph dirty
    const std::uint64_t gen = g->generation();
    {
      std::shared_lock lock(mu_);
      auto it = persisted_generation_.find(id);
      if (only_dirty && it != persisted_generation_.end() && it->second == gen) {
        ++report.skipped_clean;
        continue;
      }
    }
    try {
      std::ostringstream out;
      g->persist(out);
      write_file_atomic(dir / graph_file_name(id), out.str());
      std::unique_lock lock(mu_);
      persisted_generation_[id] = gen;
      ++report.written;
    } catch (const std::exception& e) {
      spdlog::error("persisting task {}: {}", id, e.what());
      ++report.failed;
    }
  }
  std::string blob_doc;
  std::uint64_t blob_gen;
  {
    std::shared_lock lock(mu_);
    blob_gen = blob_generation_;
    if (blob_gen != blobs_persisted_ || !only_dirty) {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& [id, b] : blobs_) j[id] = base64::encode(b);
      blob_doc = j.dump();
    }
  }
  if (!blob_doc.empty()) {
    try {
      write_file_atomic(dir / kBlobFile, blob_doc);
      std::unique_lock lock(mu_);
      blobs_persisted_ = blob_gen;
    } catch (const std::exception& e) {
      spdlog::error("persisting task blobs: {}", e.what());
      ++report.failed;
    }
  }
  return report;
}

std::size_t LocalCache::restore(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return 0;
  std::size_t loaded = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= kGraphPrefix.size() + kGraphSuffix.size() || !name.starts_with(kGraphPrefix) ||
        !name.ends_with(kGraphSuffix))
      continue;
    try {
      std::ifstream in(entry.path(), std::ios::binary);
      // task id is only known after parsing; the callback looks it up lazily
      auto task_id = std::make_shared<std::string>();
      GraphOptions g;
      g.snapshot_budget = options_.snapshot_budget;
      g.lease_ttl = options_.lease_ttl;
      g.clock = options_.clock;
      g.on_snapshot_released = [this, task_id](NodeId, const SnapshotRef& ref) { on_release(*task_id, ref); };
      auto graph = TaskGraph::restore(in, std::move(g));
      *task_id = graph->task_id();
      const std::uint64_t gen = graph->generation();
      std::unique_lock lock(mu_);
      persisted_generation_[graph->task_id()] = gen;
      graphs_[graph->task_id()] = std::move(graph);
      ++loaded;
    } catch (const std::exception& e) {
      ++corrupt_graphs_;
      spdlog::error("graph file {} is unreadable, moving it aside: {}", name, e.what());
      fs::rename(entry.path(), entry.path().string() + ".corrupt", ec);
    }
  }
  if (std::ifstream in(dir / kBlobFile); in) {
    try {
      const auto j = nlohmann::json::parse(in);
      std::unique_lock lock(mu_);
      for (const auto& [id, b] : j.items()) {
        auto bytes = base64::decode(b.get<std::string>());
        if (bytes) blobs_[id] = std::move(*bytes);
      }
    } catch (const std::exception& e) {
      spdlog::error("task blob file is unreadable: {}", e.what());
    }
  }
  return loaded;
}

}  // namespace tvcache
