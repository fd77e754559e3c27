// SPDX-License-Identifier: Apache-2.0
#include "tvcache/tcg.hpp"

#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <tuple>

namespace tvcache {

namespace {

constexpr std::size_t kExpiredLeaseMemory = 1 << 16;

std::string mint_lease_id() {
  static const std::uint64_t salt = [] {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }();
  static std::atomic<std::uint64_t> counter{0};
  return "ls-" + to_hex(salt).substr(8) + "-" + to_hex(counter.fetch_add(1, std::memory_order_relaxed));
}

}  // namespace

nlohmann::json to_json(const GraphStats& s) {
  return {{"hits", s.hits},
          {"misses", s.misses},
          {"lpm_hits", s.lpm_hits},
          {"inserts", s.inserts},
          {"evictions", s.evictions},
          {"divergent_inserts", s.divergent_inserts},
          {"lease_leaks", s.lease_leaks},
          {"budget_deferrals", s.budget_deferrals}};
}

TaskGraph::TaskGraph(std::string task_id, GraphOptions options)
    : task_id_(std::move(task_id)), options_(std::move(options)) {
  if (options_.snapshot_budget == 0) throw std::invalid_argument("snapshot budget must be positive");
  Node& root = nodes_.emplace_back();
  root.id = kRootId;
  root.created_at_ms = unix_millis();
}

TaskGraph::~TaskGraph() = default;

SteadyTime TaskGraph::now() const { return options_.clock ? options_.clock() : SteadyClock::now(); }

void TaskGraph::fire(Released& released) const {
  if (!options_.on_snapshot_released) return;
  for (const auto& [node, ref] : released) {
    try {
      options_.on_snapshot_released(node, ref);
    } catch (const std::exception& e) {
      spdlog::warn("task {}: snapshot release hook failed for {}: {}", task_id_, ref.snapshot_id, e.what());
    }
  }
  released.clear();
}

const TaskGraph::Node* TaskGraph::walk_locked(TrajectoryView path) const {
  const Node* cur = &nodes_[kRootId];
  for (const auto& step : path) {
    auto it = cur->children.find(step.key());
    if (it == cur->children.end()) return nullptr;
    cur = &nodes_[it->second];
  }
  return cur;
}

TaskGraph::Node& TaskGraph::new_node_locked(const Node& parent, const ToolDescriptor& d, const ToolResult& r) {
  const NodeId id = nodes_.size();
  const NodeId parent_id = parent.id;
  const std::uint32_t depth = parent.depth + 1;
  Node& n = nodes_.emplace_back();
  n.id = id;
  n.parent = parent_id;
  n.descriptor = d;
  n.result = r;
  n.depth = depth;
  n.created_at_ms = unix_millis();
  nodes_[parent_id].children.emplace(d.key(), id);
  return n;
}

NodeId TaskGraph::insert(TrajectoryView trajectory, const ToolResult& result, std::optional<SnapshotRef> snapshot) {
  if (trajectory.empty()) throw InvalidDescriptor("cannot insert an empty trajectory");
  for (const auto& d : trajectory) validate(d);
  if (result.exec_ms < 0) throw std::invalid_argument("exec_ms must be non-negative");

  Released released;
  NodeId id;
  {
    std::unique_lock lock(mu_);
    const Node* parent = walk_locked(trajectory.first(trajectory.size() - 1));
    if (parent == nullptr)
      throw MissingPrefix("task " + task_id_ + ": parent path of length " + std::to_string(trajectory.size() - 1) +
                          " is not in the graph");
    const ToolDescriptor& last = trajectory.back();
    Node* node;
    if (auto it = parent->children.find(last.key()); it != parent->children.end()) {
      node = &nodes_[it->second];
      if (!node->result->same_value(result)) {
        stats_.divergent_inserts.fetch_add(1, std::memory_order_relaxed);
        spdlog::debug("task {}: divergent insert for node {} ignored", task_id_, node->id);
      }
    } else {
      node = &new_node_locked(*parent, last, result);
      stats_.inserts.fetch_add(1, std::memory_order_relaxed);
      touch();
    }
    id = node->id;
    if (snapshot) {
      if (node->snapshot) {
        released.emplace_back(id, std::move(*snapshot));
      } else {
        node->snapshot = std::move(*snapshot);
        ++snapshot_count_;
        touch();
        evict_locked(released);
      }
    }
  }
  fire(released);
  return id;
}

std::optional<ToolResult> TaskGraph::lookup_exact(TrajectoryView trajectory) {
  std::shared_lock lock(mu_);
  const Node* n = trajectory.empty() ? nullptr : walk_locked(trajectory);
  if (n == nullptr) {
    stats_.misses.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  n->hit_count.fetch_add(1, std::memory_order_relaxed);
  stats_.hits.fetch_add(1, std::memory_order_relaxed);
  touch();
  return n->result;
}

PrefixMatch TaskGraph::longest_prefix_match(TrajectoryView trajectory) {
  PrefixMatch m;
  std::unique_lock lock(mu_);
  expire_leases_locked();
  const Node* cur = &nodes_[kRootId];
  const std::size_t limit = trajectory.empty() ? 0 : trajectory.size() - 1;
  for (std::size_t i = 0; i < limit; ++i) {
    auto it = cur->children.find(trajectory[i].key());
    if (it == cur->children.end()) break;
    cur = &nodes_[it->second];
    m.matched_len = i + 1;
    if (cur->snapshot) {
      m.snapshot_node_id = cur->id;
      m.snapshot_depth = i + 1;
    }
  }
  m.node_id = cur->id;
  if (m.snapshot_node_id) {
    Node& snap = nodes_[*m.snapshot_node_id];
    ++snap.ref_count;
    m.snapshot = snap.snapshot;
    m.lease_id = mint_lease_id();
    leases_.emplace(*m.lease_id, Lease{snap.id, now() + options_.lease_ttl});
    lease_expiry_.emplace(now() + options_.lease_ttl, *m.lease_id);
    stats_.lpm_hits.fetch_add(1, std::memory_order_relaxed);
  }
  return m;
}

std::optional<ToolResult> TaskGraph::lookup_stateful(TrajectoryView history, const ToolDescriptor& target) {
  const Trajectory filtered = filter_stateful(history);
  std::shared_lock lock(mu_);
  const Node* anchor = walk_locked(filtered);
  if (anchor != nullptr) {
    if (!target.mutates_state) {
      if (auto it = anchor->stateless.find(target.key()); it != anchor->stateless.end()) {
        it->second.hit_count.fetch_add(1, std::memory_order_relaxed);
        stats_.hits.fetch_add(1, std::memory_order_relaxed);
        touch();
        return it->second.result;
      }
    } else if (auto it = anchor->children.find(target.key()); it != anchor->children.end()) {
      const Node& child = nodes_[it->second];
      child.hit_count.fetch_add(1, std::memory_order_relaxed);
      stats_.hits.fetch_add(1, std::memory_order_relaxed);
      touch();
      return child.result;
    }
  }
  stats_.misses.fetch_add(1, std::memory_order_relaxed);
  return std::nullopt;
}

NodeId TaskGraph::attach_stateless(TrajectoryView stateful_prefix, const ToolDescriptor& descriptor,
                                   const ToolResult& result) {
  validate(descriptor);
  if (descriptor.mutates_state) throw InvalidDescriptor("only stateless tools can be attached");
  for (const auto& d : stateful_prefix)
    if (!d.mutates_state) throw InvalidDescriptor("attachment prefix must consist of stateful steps only");

  std::unique_lock lock(mu_);
  const Node* anchor = walk_locked(stateful_prefix);
  if (anchor == nullptr)
    throw MissingPrefix("task " + task_id_ + ": stateful prefix of length " + std::to_string(stateful_prefix.size()) +
                        " is not in the graph");
  Node& node = nodes_[anchor->id];
  auto [it, created] = node.stateless.try_emplace(descriptor.key());
  if (created) {
    it->second.descriptor = descriptor;
    it->second.result = result;
    stats_.inserts.fetch_add(1, std::memory_order_relaxed);
    touch();
  } else if (!it->second.result.same_value(result)) {
    stats_.divergent_inserts.fetch_add(1, std::memory_order_relaxed);
  }
  return node.id;
}

void TaskGraph::remember_expired_locked(const std::string& lease_id) {
  expired_.insert(lease_id);
  expired_order_.push_back(lease_id);
  while (expired_order_.size() > kExpiredLeaseMemory) {
    expired_.erase(expired_order_.front());
    expired_order_.pop_front();
  }
}

std::size_t TaskGraph::expire_leases_locked() {
  const SteadyTime t = now();
  std::size_t reclaimed = 0;
  while (!lease_expiry_.empty() && lease_expiry_.begin()->first <= t) {
    const std::string id = lease_expiry_.begin()->second;
    lease_expiry_.erase(lease_expiry_.begin());
    auto it = leases_.find(id);
    if (it == leases_.end()) continue;  // released in time
    Node& n = nodes_[it->second.node];
    if (n.ref_count > 0) --n.ref_count;
    leases_.erase(it);
    remember_expired_locked(id);
    stats_.lease_leaks.fetch_add(1, std::memory_order_relaxed);
    spdlog::warn("task {}: lease {} on node {} expired without release", task_id_, id, n.id);
    ++reclaimed;
  }
  return reclaimed;
}

std::size_t TaskGraph::expire_leases() {
  Released released;
  std::size_t n;
  {
    std::unique_lock lock(mu_);
    n = expire_leases_locked();
    if (n > 0) evict_locked(released);
  }
  fire(released);
  return n;
}

void TaskGraph::release(std::string_view lease_id) {
  Released released;
  bool expired = false;
  {
    std::unique_lock lock(mu_);
    const std::string id(lease_id);
    auto it = leases_.find(id);
    if (it == leases_.end()) {
      if (expired_.count(id) != 0) throw LeaseExpired("lease " + id + " expired before release");
      throw UnknownLease("unknown lease " + id);
    }
    Node& n = nodes_[it->second.node];
    if (n.ref_count > 0) --n.ref_count;
    if (it->second.expires_at <= now()) {
      expired = true;
      stats_.lease_leaks.fetch_add(1, std::memory_order_relaxed);
      remember_expired_locked(id);
    }
    leases_.erase(it);
    evict_locked(released);
  }
  fire(released);
  if (expired) throw LeaseExpired("lease " + std::string(lease_id) + " expired before release");
}

std::vector<NodeId> TaskGraph::evict() {
  Released released;
  std::vector<NodeId> evicted;
  {
    std::unique_lock lock(mu_);
    expire_leases_locked();
    evicted = evict_locked(released);
  }
  fire(released);
  return evicted;
}

std::vector<NodeId> TaskGraph::evict_locked(Released& released) {
  std::vector<NodeId> evicted;
  if (snapshot_count_ <= options_.snapshot_budget) return evicted;

  // Children always have larger ids than their parent, so one reverse sweep
  // propagates "some node in my subtree is referenced" up to every ancestor.
  std::vector<char> pinned(nodes_.size(), 0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.ref_count > 0) pinned[i] = 1;
    if (pinned[i] && n.parent) pinned[*n.parent] = 1;
  }

  struct Candidate {
    double score;
    std::int64_t created_at_ms;
    NodeId id;
  };
  std::vector<Candidate> candidates;
  for (const Node& n : nodes_) {
    if (!n.snapshot || pinned[n.id]) continue;
    const double score = static_cast<double>(n.hit_count.load(std::memory_order_relaxed) + 1) *
                         static_cast<double>(n.children.size() + 1) / static_cast<double>(n.depth + 1);
    candidates.push_back({score, n.created_at_ms, n.id});
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.score, a.created_at_ms, a.id) < std::tie(b.score, b.created_at_ms, b.id);
  });

  for (const Candidate& c : candidates) {
    if (snapshot_count_ <= options_.snapshot_budget) break;
    Node& n = nodes_[c.id];
    released.emplace_back(n.id, std::move(*n.snapshot));
    n.snapshot.reset();
    --snapshot_count_;
    evicted.push_back(n.id);
    stats_.evictions.fetch_add(1, std::memory_order_relaxed);
  }
  if (!evicted.empty()) touch();
  if (snapshot_count_ > options_.snapshot_budget) {
    stats_.budget_deferrals.fetch_add(1, std::memory_order_relaxed);
    spdlog::debug("task {}: {} snapshots over budget {} are all referenced; eviction deferred", task_id_,
                  snapshot_count_, options_.snapshot_budget);
  }
  return evicted;
}

bool TaskGraph::attach_snapshot(NodeId node, SnapshotRef ref) {
  Released released;
  bool attached = false;
  {
    std::unique_lock lock(mu_);
    if (node >= nodes_.size() || node == kRootId) throw std::out_of_range("no such node " + std::to_string(node));
    Node& n = nodes_[node];
    if (n.snapshot) {
      released.emplace_back(node, std::move(ref));
    } else {
      n.snapshot = std::move(ref);
      ++snapshot_count_;
      attached = true;
      touch();
      evict_locked(released);
    }
  }
  fire(released);
  return attached;
}

void TaskGraph::invalidate_snapshot(NodeId node, std::string_view snapshot_id) {
  Released released;
  {
    std::unique_lock lock(mu_);
    if (node >= nodes_.size()) return;
    Node& n = nodes_[node];
    if (!n.snapshot || n.snapshot->snapshot_id != snapshot_id) return;
    released.emplace_back(node, std::move(*n.snapshot));
    n.snapshot.reset();
    --snapshot_count_;
    touch();
  }
  fire(released);
}

std::size_t TaskGraph::node_count() const {
  std::shared_lock lock(mu_);
  return nodes_.size();
}

std::size_t TaskGraph::snapshot_count() const {
  std::shared_lock lock(mu_);
  return snapshot_count_;
}

std::size_t TaskGraph::active_leases() const {
  std::shared_lock lock(mu_);
  return leases_.size();
}

std::size_t TaskGraph::snapshot_budget() const {
  std::shared_lock lock(mu_);
  return options_.snapshot_budget;
}

void TaskGraph::set_snapshot_budget(std::size_t budget) {
  if (budget == 0) throw std::invalid_argument("snapshot budget must be positive");
  Released released;
  {
    std::unique_lock lock(mu_);
    options_.snapshot_budget = budget;
    evict_locked(released);
  }
  fire(released);
}

GraphStats TaskGraph::stats() const {
  GraphStats s;
  s.hits = stats_.hits.load();
  s.misses = stats_.misses.load();
  s.lpm_hits = stats_.lpm_hits.load();
  s.inserts = stats_.inserts.load();
  s.evictions = stats_.evictions.load();
  s.divergent_inserts = stats_.divergent_inserts.load();
  s.lease_leaks = stats_.lease_leaks.load();
  s.budget_deferrals = stats_.budget_deferrals.load();
  return s;
}

NodeInfo TaskGraph::info_locked(const Node& n) const {
  NodeInfo info;
  info.id = n.id;
  info.parent = n.parent;
  info.descriptor = n.descriptor;
  info.result = n.result;
  info.snapshot = n.snapshot;
  for (const auto& [key, child] : n.children) info.children.push_back(child);
  info.ref_count = n.ref_count;
  info.hit_count = n.hit_count.load(std::memory_order_relaxed);
  info.depth = n.depth;
  info.created_at_ms = n.created_at_ms;
  for (const auto& [key, a] : n.stateless)
    info.stateless.push_back({a.descriptor, a.result, a.hit_count.load(std::memory_order_relaxed)});
  return info;
}

std::optional<NodeInfo> TaskGraph::node(NodeId id) const {
  std::shared_lock lock(mu_);
  if (id >= nodes_.size()) return std::nullopt;
  return info_locked(nodes_[id]);
}

std::optional<NodeId> TaskGraph::find(TrajectoryView trajectory) const {
  std::shared_lock lock(mu_);
  const Node* n = walk_locked(trajectory);
  if (n == nullptr) return std::nullopt;
  return n->id;
}

std::vector<NodeInfo> TaskGraph::nodes() const {
  std::shared_lock lock(mu_);
  std::vector<NodeInfo> out;
  out.reserve(nodes_.size());
  std::deque<NodeId> queue{kRootId};
  while (!queue.empty()) {
    const Node& n = nodes_[queue.front()];
    queue.pop_front();
    out.push_back(info_locked(n));
    for (const auto& [key, child] : n.children) queue.push_back(child);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DOT export

namespace {

std::string dot_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) out += '?';
        else out += c;
    }
  }
  return out;
}

std::string truncate(std::string_view s, std::size_t max) {
  if (s.size() <= max) return std::string(s);
  // avoid splitting a UTF-8 sequence
  std::size_t cut = max;
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  return std::string(s.substr(0, cut)) + "...";
}

}  // namespace

std::string TaskGraph::export_dot() const {
  const std::vector<NodeInfo> all = nodes();
  std::ostringstream out;
  out << "digraph tcg {\n";
  out << "  graph [label=\"" << dot_escape(task_id_) << "\", labelloc=t];\n";
  out << "  node [shape=box, fontname=\"monospace\"];\n";
  for (const NodeInfo& n : all) {
    out << "  n" << n.id << " [label=\"";
    if (!n.descriptor) {
      out << "root";
    } else {
      out << dot_escape(n.descriptor->tool_name) << ' ' << dot_escape(truncate(n.descriptor->args_canonical, 24))
          << "\\nhits=" << n.hit_count;
    }
    if (!n.stateless.empty()) out << "\\n+" << n.stateless.size() << " stateless";
    out << '"';
    if (n.snapshot) out << ", style=filled, fillcolor=\"gray80\"";
    out << "];\n";
  }
  for (const NodeInfo& n : all)
    for (NodeId c : n.children) out << "  n" << n.id << " -> n" << c << ";\n";
  out << "}\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Persistence
//
//   TVC1\n
//   <len>\n<meta json>\n
//   <len>\n<node json>\n        one per node, breadth-first
//   END <node count> <fnv1a64 of everything after the header line>\n

namespace {

constexpr std::string_view kMagic = "TVC1";

void write_record(std::string& buf, const nlohmann::json& j) {
  const std::string body = j.dump();
  buf += std::to_string(body.size());
  buf += '\n';
  buf += body;
  buf += '\n';
}

nlohmann::json result_fields(const ToolResult& r) {
  return to_json(r);
}

}  // namespace

void TaskGraph::persist(std::ostream& out) const {
  const std::vector<NodeInfo> all = nodes();
  const GraphStats st = stats();
  std::string body;
  write_record(body, {{"task_id", task_id_},
                      {"snapshot_budget", snapshot_budget()},
                      {"node_count", all.size()},
                      {"stats", to_json(st)}});
  for (const NodeInfo& n : all) {
    nlohmann::json j;
    j["node_id"] = n.id;
    j["parent_id"] = n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr);
    if (n.descriptor) {
      j["tool"] = n.descriptor->tool_name;
      j["args_canonical"] = n.descriptor->args_canonical;
      j["mutates_state"] = n.descriptor->mutates_state;
    }
    if (n.result) j.update(result_fields(*n.result));
    j["snapshot_id"] = n.snapshot ? nlohmann::json(n.snapshot->snapshot_id) : nlohmann::json(nullptr);
    if (n.snapshot) j["snapshot"] = to_json(*n.snapshot);
    j["hit_count"] = n.hit_count;
    j["created_at"] = n.created_at_ms;
    nlohmann::json stateless = nlohmann::json::array();
    for (const auto& a : n.stateless) {
      nlohmann::json aj = to_json(a.descriptor);
      aj.update(result_fields(a.result));
      aj["hit_count"] = a.hit_count;
      stateless.push_back(std::move(aj));
    }
    j["stateless"] = std::move(stateless);
    write_record(body, j);
  }
  out << kMagic << '\n' << body << "END " << all.size() << ' ' << to_hex(fnv1a64(body)) << '\n';
}

std::unique_ptr<TaskGraph> TaskGraph::restore(std::istream& in, GraphOptions options) {
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;

  const std::size_t header_end = data.find('\n');
  if (header_end == std::string::npos) throw CorruptFile("missing header line", 0);
  const std::string_view header(data.data(), header_end);
  if (header != kMagic) {
    if (header.size() >= 3 && header.substr(0, 3) == "TVC")
      throw VersionMismatch("unsupported graph file version '" + std::string(header) + "'");
    throw CorruptFile("not a graph file", 0);
  }
  pos = header_end + 1;
  const std::size_t body_start = pos;

  auto read_record = [&](std::size_t& at) -> std::optional<nlohmann::json> {
    if (data.compare(at, 4, "END ") == 0) return std::nullopt;
    const std::size_t nl = data.find('\n', at);
    if (nl == std::string::npos || nl == at || nl - at > 12) throw CorruptFile("bad record length", at);
    std::size_t len = 0;
    for (std::size_t i = at; i < nl; ++i) {
      if (data[i] < '0' || data[i] > '9') throw CorruptFile("bad record length", at);
      len = len * 10 + static_cast<std::size_t>(data[i] - '0');
    }
    const std::size_t body = nl + 1;
    if (body + len + 1 > data.size() || data[body + len] != '\n') throw CorruptFile("truncated record", at);
    try {
      auto j = nlohmann::json::parse(data.begin() + static_cast<std::ptrdiff_t>(body),
                                     data.begin() + static_cast<std::ptrdiff_t>(body + len));
      const std::size_t start = at;
      at = body + len + 1;
      if (!j.is_object()) throw CorruptFile("record is not an object", start);
      return j;
    } catch (const nlohmann::json::exception&) {
      throw CorruptFile("record is not valid JSON", at);
    }
  };

  std::size_t record_at = pos;
  auto meta = read_record(pos);
  if (!meta) throw CorruptFile("missing metadata record", record_at);

  std::unique_ptr<TaskGraph> g;
  std::size_t expected_nodes = 0;
  try {
    options.snapshot_budget = meta->at("snapshot_budget").get<std::size_t>();
    expected_nodes = meta->at("node_count").get<std::size_t>();
    g = std::make_unique<TaskGraph>(meta->at("task_id").get<std::string>(), std::move(options));
    const auto& st = meta->at("stats");
    g->stats_.hits = st.at("hits").get<std::uint64_t>();
    g->stats_.misses = st.at("misses").get<std::uint64_t>();
    g->stats_.lpm_hits = st.at("lpm_hits").get<std::uint64_t>();
    g->stats_.inserts = st.at("inserts").get<std::uint64_t>();
    g->stats_.evictions = st.at("evictions").get<std::uint64_t>();
    g->stats_.divergent_inserts = st.value("divergent_inserts", std::uint64_t{0});
    g->stats_.lease_leaks = st.value("lease_leaks", std::uint64_t{0});
    g->stats_.budget_deferrals = st.value("budget_deferrals", std::uint64_t{0});
  } catch (const CorruptFile&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptFile(std::string("bad metadata record: ") + e.what(), record_at);
  }

  // Records arrive breadth-first, so every parent precedes its children. Ids
  // are dense in creation order, so they are placed by id, not by position.
  std::vector<nlohmann::json> records;
  std::vector<std::size_t> offsets;
  while (true) {
    record_at = pos;
    auto rec = read_record(pos);
    if (!rec) break;
    records.push_back(std::move(*rec));
    offsets.push_back(record_at);
  }
  const std::size_t trailer_at = pos;
  const std::size_t trailer_end = data.find('\n', pos);
  if (trailer_end == std::string::npos || trailer_end + 1 != data.size()) throw CorruptFile("bad trailer", trailer_at);
  {
    std::istringstream trailer(data.substr(pos + 4, trailer_end - pos - 4));
    std::size_t count = 0;
    std::string checksum;
    if (!(trailer >> count >> checksum) || count != records.size() || count != expected_nodes)
      throw CorruptFile("node count mismatch", trailer_at);
    if (checksum != to_hex(fnv1a64(std::string_view(data).substr(body_start, trailer_at - body_start))))
      throw CorruptFile("checksum mismatch", trailer_at);
  }
  if (records.empty()) throw CorruptFile("graph has no root", trailer_at);

  std::vector<std::optional<std::size_t>> slot_of(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const std::size_t id = records[i].at("node_id").get<std::size_t>();
      if (id >= records.size() || slot_of[id]) throw CorruptFile("node ids are not dense and unique", offsets[i]);
      slot_of[id] = i;
    } catch (const CorruptFile&) {
      throw;
    } catch (const std::exception& e) {
      throw CorruptFile(std::string("bad node record: ") + e.what(), offsets[i]);
    }
  }

  g->nodes_.clear();
  for (NodeId id = 0; id < records.size(); ++id) {
    const auto& rec = records[*slot_of[id]];
    const std::size_t at = offsets[*slot_of[id]];
    try {
      Node& n = g->nodes_.emplace_back();
      n.id = id;
      if (rec.at("parent_id").is_null()) {
        if (id != kRootId) throw CorruptFile("non-root node without parent", at);
      } else {
        const NodeId parent = rec.at("parent_id").get<NodeId>();
        if (id == kRootId || parent >= id) throw CorruptFile("parent does not precede child", at);
        n.parent = parent;
        n.descriptor = descriptor_from_json(rec);
        n.result = result_from_json(rec);
        n.depth = g->nodes_[parent].depth + 1;
        if (!g->nodes_[parent].children.emplace(n.descriptor->key(), id).second)
          throw CorruptFile("duplicate child key", at);
      }
      if (!rec.at("snapshot_id").is_null()) {
        n.snapshot = snapshot_ref_from_json(rec.at("snapshot"));
        if (n.snapshot->snapshot_id != rec.at("snapshot_id").get<std::string>())
          throw CorruptFile("snapshot id mismatch", at);
        ++g->snapshot_count_;
      }
      n.hit_count = rec.at("hit_count").get<std::uint64_t>();
      n.created_at_ms = rec.at("created_at").get<std::int64_t>();
      for (const auto& aj : rec.at("stateless")) {
        ToolDescriptor d = descriptor_from_json(aj);
        auto [it, created] = n.stateless.try_emplace(d.key());
        if (!created) throw CorruptFile("duplicate stateless attachment", at);
        it->second.descriptor = std::move(d);
        it->second.result = result_from_json(aj);
        it->second.hit_count = aj.at("hit_count").get<std::uint64_t>();
      }
    } catch (const CorruptFile&) {
      throw;
    } catch (const std::exception& e) {
      throw CorruptFile(std::string("bad node record: ") + e.what(), at);
    }
  }
  return g;
}

}  // namespace tvcache
