// SPDX-License-Identifier: Apache-2.0
#include "tvcache/snapshot.hpp"

#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace tvcache {

namespace fs = std::filesystem;

nlohmann::json to_json(const SnapshotRef& ref) {
  return {{"id", ref.snapshot_id},
          {"size", ref.size_bytes},
          {"serialize_ms", ref.serialize_ms},
          {"backend_kind", ref.backend_kind},
          {"created_at", ref.created_at_ms}};
}

SnapshotRef snapshot_ref_from_json(const nlohmann::json& j) {
  SnapshotRef ref;
  ref.snapshot_id = j.at("id").get<std::string>();
  ref.size_bytes = j.at("size").get<std::uint64_t>();
  ref.serialize_ms = j.at("serialize_ms").get<double>();
  ref.backend_kind = j.at("backend_kind").get<std::string>();
  ref.created_at_ms = j.at("created_at").get<std::int64_t>();
  return ref;
}

CostModel::CostModel(double ema_alpha, double cold_start_ms) : alpha_(ema_alpha), cold_start_ms_(cold_start_ms) {
  if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) throw std::invalid_argument("ema_alpha must be in (0, 1]");
  if (cold_start_ms < 0.0) throw std::invalid_argument("cold start estimate must be non-negative");
}

void CostModel::observe_serialize(std::string_view kind, double ms) {
  if (ms < 0.0) throw std::invalid_argument("serialize duration must be non-negative");
  std::lock_guard lock(mu_);
  auto it = by_kind_.try_emplace(std::string(kind), Estimate{cold_start_ms_, cold_start_ms_}).first;
  it->second.serialize_ms = (1.0 - alpha_) * it->second.serialize_ms + alpha_ * ms;
}

void CostModel::observe_restore(std::string_view kind, double ms) {
  if (ms < 0.0) throw std::invalid_argument("restore duration must be non-negative");
  std::lock_guard lock(mu_);
  auto it = by_kind_.try_emplace(std::string(kind), Estimate{cold_start_ms_, cold_start_ms_}).first;
  it->second.restore_ms = (1.0 - alpha_) * it->second.restore_ms + alpha_ * ms;
}

CostModel::Estimate CostModel::estimate(std::string_view kind) const {
  std::lock_guard lock(mu_);
  if (auto it = by_kind_.find(kind); it != by_kind_.end()) return it->second;
  return {cold_start_ms_, cold_start_ms_};
}

bool should_snapshot(double exec_ms, const CostModel& model, std::string_view backend_kind) {
  return exec_ms > model.overhead_ms(backend_kind);
}

SnapshotStore::SnapshotStore(SnapshotStoreOptions options, CostModel* cost_model)
    : options_(std::move(options)), cost_model_(cost_model) {
  if (persistent()) {
    fs::create_directories(options_.root);
    load_index();
  }
}

fs::path SnapshotStore::file_for(const SnapshotRef& ref) const {
  return options_.root / ref.backend_kind / (ref.snapshot_id + ".bin");
}

void SnapshotStore::load_index() {
  const fs::path index = options_.root / "index.jsonl";
  std::ifstream in(index);
  if (!in) return;
  std::string line;
  std::size_t dropped_missing = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    SnapshotRef ref;
    try {
      ref = snapshot_ref_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      // a torn final line after a crash; earlier lines are complete
      spdlog::warn("snapshot index: skipping unreadable record: {}", e.what());
      continue;
    }
    std::error_code ec;
    if (!fs::exists(file_for(ref), ec) || fs::file_size(file_for(ref), ec) != ref.size_bytes) {
      ++dropped_missing;
      continue;
    }
    if (auto pos = ref.snapshot_id.find('-'); pos != std::string::npos) {
      try {
        next_seq_ = std::max<std::uint64_t>(next_seq_, std::stoull(ref.snapshot_id.substr(0, pos), nullptr, 16) + 1);
      } catch (const std::exception&) {
      }
    }
    bytes_used_ += ref.size_bytes;
    entries_[ref.snapshot_id] = Entry{ref, {}};
  }
  if (dropped_missing > 0) spdlog::warn("snapshot index: {} records had no matching file", dropped_missing);
  rewrite_index_locked();
}

void SnapshotStore::append_index(const SnapshotRef& ref) {
  std::ofstream out(options_.root / "index.jsonl", std::ios::app);
  out << to_json(ref).dump() << '\n';
}

void SnapshotStore::rewrite_index_locked() {
  const fs::path index = options_.root / "index.jsonl";
  const fs::path tmp = options_.root / "index.jsonl.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    std::vector<const SnapshotRef*> refs;
    refs.reserve(entries_.size());
    for (const auto& [id, e] : entries_) refs.push_back(&e.ref);
    std::sort(refs.begin(), refs.end(), [](auto* a, auto* b) { return a->snapshot_id < b->snapshot_id; });
    for (const auto* r : refs) out << to_json(*r).dump() << '\n';
  }
  fs::rename(tmp, index);
}

SnapshotRef SnapshotStore::store(std::string_view bytes, std::string_view backend_kind, double serialize_ms) {
  if (backend_kind.empty() || backend_kind.find('/') != std::string_view::npos || backend_kind.find("..") != std::string_view::npos)
    throw std::invalid_argument("backend kind must be a plain, non-empty name");
  const auto start = SteadyClock::now();
  SnapshotRef ref;
  {
    std::unique_lock lock(mu_);
    if (bytes_used_ + bytes.size() > options_.byte_cap)
      throw StorageFull("snapshot store is full: " + std::to_string(bytes_used_) + " + " +
                        std::to_string(bytes.size()) + " bytes exceeds cap " + std::to_string(options_.byte_cap));
    ref.snapshot_id = to_hex(next_seq_++).substr(8) + "-" + to_hex(fnv1a64(bytes));
    ref.size_bytes = bytes.size();
    ref.backend_kind = std::string(backend_kind);
    ref.created_at_ms = unix_millis();
    // reserve capacity before releasing the lock for disk I/O
    bytes_used_ += bytes.size();
  }
  try {
    if (persistent()) {
      const fs::path path = file_for(ref);
      fs::create_directories(path.parent_path());
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw Error("failed to write snapshot file " + path.string());
    }
  } catch (...) {
    std::unique_lock lock(mu_);
    bytes_used_ -= bytes.size();
    throw;
  }
  ref.serialize_ms = serialize_ms + elapsed_ms(start);
  {
    std::unique_lock lock(mu_);
    entries_[ref.snapshot_id] = Entry{ref, persistent() ? std::string{} : std::string(bytes)};
    if (persistent()) append_index(ref);
  }
  if (cost_model_ != nullptr) cost_model_->observe_serialize(backend_kind, ref.serialize_ms);
  return ref;
}

std::string SnapshotStore::load(std::string_view id) const {
  SnapshotRef ref;
  {
    std::shared_lock lock(mu_);
    auto it = entries_.find(std::string(id));
    if (it == entries_.end()) throw UnknownSnapshot("unknown snapshot '" + std::string(id) + "'");
    if (!persistent()) return it->second.bytes;
    ref = it->second.ref;
  }
  std::ifstream in(file_for(ref), std::ios::binary);
  if (!in) throw UnknownSnapshot("snapshot file missing for '" + ref.snapshot_id + "'");
  std::string bytes(ref.size_bytes, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::uint64_t>(in.gcount()) != ref.size_bytes)
    throw UnknownSnapshot("snapshot file truncated for '" + ref.snapshot_id + "'");
  return bytes;
}

void SnapshotStore::drop(std::string_view id) {
  std::unique_lock lock(mu_);
  auto it = entries_.find(std::string(id));
  if (it == entries_.end()) throw UnknownSnapshot("unknown snapshot '" + std::string(id) + "'");
  bytes_used_ -= it->second.ref.size_bytes;
  if (persistent()) {
    std::error_code ec;
    fs::remove(file_for(it->second.ref), ec);
  }
  entries_.erase(it);
  if (persistent()) rewrite_index_locked();
}

bool SnapshotStore::contains(std::string_view id) const {
  std::shared_lock lock(mu_);
  return entries_.count(std::string(id)) != 0;
}

std::optional<SnapshotRef> SnapshotStore::find(std::string_view id) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(std::string(id));
  if (it == entries_.end()) return std::nullopt;
  return it->second.ref;
}

std::size_t SnapshotStore::count() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

std::uint64_t SnapshotStore::bytes_used() const {
  std::shared_lock lock(mu_);
  return bytes_used_;
}

}  // namespace tvcache
