// SPDX-License-Identifier: Apache-2.0
#include "tvcache/forkpool.hpp"

#include "tvcache/clock.hpp"
#include "tvcache/errors.hpp"

#include <spdlog/spdlog.h>

namespace tvcache {

// ---------------------------------------------------------------------------
// RateLimiter

RateLimiter::RateLimiter(std::size_t max_concurrent) : capacity_(max_concurrent) {
  if (max_concurrent == 0) throw std::invalid_argument("max_concurrent_forks must be at least 1");
}

RateLimiter::Permit& RateLimiter::Permit::operator=(Permit&& other) noexcept {
  if (this != &other) {
    reset();
    owner_ = std::exchange(other.owner_, nullptr);
  }
  return *this;
}

void RateLimiter::Permit::reset() {
  if (owner_ != nullptr) std::exchange(owner_, nullptr)->release();
}

RateLimiter::Permit RateLimiter::acquire() {
  std::unique_lock lock(mu_);
  const std::uint64_t ticket = next_ticket_++;
  cv_.wait(lock, [&] { return ticket == serving_ && in_flight_ < capacity_; });
  ++serving_;
  ++in_flight_;
  high_water_ = std::max(high_water_, in_flight_);
  lock.unlock();
  cv_.notify_all();  // the next ticket may also fit
  return Permit(this);
}

void RateLimiter::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_all();
}

std::size_t RateLimiter::in_flight() const {
  std::lock_guard lock(mu_);
  return in_flight_;
}

std::size_t RateLimiter::high_water() const {
  std::lock_guard lock(mu_);
  return high_water_;
}

std::size_t RateLimiter::waiting() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(next_ticket_ - serving_);
}

// ---------------------------------------------------------------------------
// ForkPool

nlohmann::json to_json(const PoolStats& s) {
  return {{"warm_root_count", s.warm_root_count},
          {"prewarmed_count", s.prewarmed_count},
          {"in_flight_forks", s.in_flight_forks},
          {"max_in_flight_forks", s.max_in_flight_forks},
          {"proactive_hits", s.proactive_hits},
          {"reactive_forks", s.reactive_forks},
          {"background_instantiations", s.background_instantiations},
          {"prewarm_failures", s.prewarm_failures},
          {"discarded_prewarms", s.discarded_prewarms},
          {"root_starts", s.root_starts}};
}

ForkPool::ForkPool(Environment& env, ForkPoolConfig config, SnapshotLoader loader, CostModel* cost_model)
    : env_(env),
      config_(config),
      loader_(std::move(loader)),
      cost_model_(cost_model),
      limiter_(config.max_concurrent_forks) {
  const std::size_t n = std::max<std::size_t>(1, config_.worker_threads);
  for (std::size_t i = 0; i < n; ++i) workers_.emplace_back([this] { worker_loop(); });
}

ForkPool::~ForkPool() {
  drain();
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

void ForkPool::submit(std::function<void()> job) {
  {
    std::lock_guard lock(mu_);
    jobs_.push_back(std::move(job));
  }
  jobs_cv_.notify_one();
}

void ForkPool::worker_loop() {
  while (true) {
    std::function<void()> job;
    {
      std::unique_lock lock(mu_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
      if (jobs_.empty()) return;
      job = std::move(jobs_.front());
      jobs_.pop_front();
      ++running_jobs_;
    }
    try {
      job();
    } catch (const std::exception& e) {
      spdlog::warn("fork pool job failed: {}", e.what());
    }
    {
      std::lock_guard lock(mu_);
      --running_jobs_;
    }
    idle_cv_.notify_all();
  }
}

void ForkPool::stop_quietly(const SandboxHandle& h) {
  try {
    env_.stop(h);
  } catch (const std::exception& e) {
    spdlog::debug("stopping sandbox {}: {}", h.id, e.what());
  }
}

SandboxHandle ForkPool::start_root() {
  for (std::size_t attempt = 0;; ++attempt) {
    auto permit = limiter_.acquire();
    try {
      SandboxHandle h = env_.start();
      root_starts_.fetch_add(1, std::memory_order_relaxed);
      return h;
    } catch (const std::exception& e) {
      if (attempt >= config_.start_retries)
        throw BackendUnavailable(std::string("could not start a sandbox: ") + e.what());
      spdlog::warn("sandbox start failed (attempt {}): {}", attempt + 1, e.what());
    }
  }
}

std::string ForkPool::slot_key(const std::string& task_id, const std::string& snapshot_id) {
  return task_id + '\x1f' + snapshot_id;
}

SandboxHandle ForkPool::restore_now(const NodeKey& key) {
  std::string bytes;
  try {
    bytes = loader_(key);
  } catch (const UnknownSnapshot& e) {
    throw SnapshotMissing(e.what());
  }
  auto permit = limiter_.acquire();
  const auto t0 = SteadyClock::now();
  SandboxHandle h = env_.restore(bytes);
  if (cost_model_ != nullptr) cost_model_->observe_restore(env_.kind(), elapsed_ms(t0));
  return h;
}

void ForkPool::warm_roots(std::size_t count) {
  std::size_t need;
  {
    std::lock_guard lock(mu_);
    const std::size_t have = roots_.size() + roots_pending_;
    need = count > have ? count - have : 0;
    roots_pending_ += need;
  }
  std::atomic<std::size_t> done{0};
  std::mutex err_mu;
  std::optional<std::string> error;
  for (std::size_t i = 0; i < need; ++i) {
    submit([&, this] {
      try {
        SandboxHandle h = start_root();
        std::lock_guard lock(mu_);
        roots_.push_back(h);
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        if (!error) error = e.what();
      }
      {
        std::lock_guard lock(mu_);
        --roots_pending_;
        ++done;
      }
      idle_cv_.notify_all();
    });
  }
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return done.load() == need; });
  if (error) throw BackendUnavailable(*error);
}

void ForkPool::maybe_replenish_locked() {
  const std::size_t target = config_.root_pool_size;
  if (target == 0 || (roots_.size() + roots_pending_) * 2 >= target) return;
  const std::size_t need = target - roots_.size() - roots_pending_;
  roots_pending_ += need;
  for (std::size_t i = 0; i < need; ++i) {
    jobs_.push_back([this] {
      std::optional<SandboxHandle> h;
      try {
        h = start_root();
      } catch (const std::exception& e) {
        spdlog::warn("warm root replenishment failed: {}", e.what());
      }
      std::lock_guard lock(mu_);
      --roots_pending_;
      if (h) roots_.push_back(*h);
    });
  }
  jobs_cv_.notify_all();
}

SandboxHandle ForkPool::acquire_root() {
  {
    std::lock_guard lock(mu_);
    if (!roots_.empty()) {
      SandboxHandle h = roots_.front();
      roots_.pop_front();
      maybe_replenish_locked();
      return h;
    }
    maybe_replenish_locked();
  }
  return start_root();
}

std::size_t ForkPool::task_prewarms_locked(const std::string& task_id) const {
  std::size_t n = 0;
  for (const auto& [id, e] : prewarmed_)
    if (e.task_id == task_id) ++n;
  return n;
}

void ForkPool::schedule_prewarm(const NodeKey& key, bool background, int attempts) {
  std::uint64_t token;
  {
    std::lock_guard lock(mu_);
    if (prewarmed_.count(slot_key(key.task_id, key.snapshot_id)) != 0) return;
    if (task_prewarms_locked(key.task_id) >= config_.prewarm_budget) return;
    token = next_token_++;
    prewarmed_.emplace(slot_key(key.task_id, key.snapshot_id), Entry{key.task_id, key.node_id, std::nullopt, token});
  }
  submit([this, key, background, attempts, token] {
    std::optional<SandboxHandle> h;
    bool missing = false;
    for (int attempt = 0; attempt < attempts && !h && !missing; ++attempt) {
      {
        // cancelled while queued
        std::lock_guard lock(mu_);
        auto it = prewarmed_.find(slot_key(key.task_id, key.snapshot_id));
        if (it == prewarmed_.end() || it->second.token != token) return;
      }
      try {
        h = restore_now(key);
      } catch (const SnapshotMissing&) {
        missing = true;
      } catch (const std::exception& e) {
        prewarm_failures_.fetch_add(1, std::memory_order_relaxed);
        spdlog::warn("prewarm of snapshot {} failed (attempt {}): {}", key.snapshot_id, attempt + 1, e.what());
      }
    }
    std::unique_lock lock(mu_);
    auto it = prewarmed_.find(slot_key(key.task_id, key.snapshot_id));
    const bool current = it != prewarmed_.end() && it->second.token == token;
    if (current && h) {
      it->second.handle = *h;
      if (background) background_instantiations_.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (current) prewarmed_.erase(it);
    lock.unlock();
    if (h) {
      discarded_prewarms_.fetch_add(1, std::memory_order_relaxed);
      stop_quietly(*h);
    }
  });
}

void ForkPool::prewarm_for_node(const NodeKey& key) {
  if (config_.prewarm_enabled) schedule_prewarm(key, false, 1);
}

void ForkPool::background_instantiate(const NodeKey& key) {
  if (config_.prewarm_enabled) schedule_prewarm(key, true, 2);
}

SandboxHandle ForkPool::acquire_for_node(const NodeKey& key) {
  std::optional<SandboxHandle> h;
  {
    std::lock_guard lock(mu_);
    auto it = prewarmed_.find(slot_key(key.task_id, key.snapshot_id));
    if (it != prewarmed_.end() && it->second.handle) {
      h = it->second.handle;
      prewarmed_.erase(it);
    }
  }
  if (h) {
    proactive_hits_.fetch_add(1, std::memory_order_relaxed);
  } else {
    h = restore_now(key);
    reactive_forks_.fetch_add(1, std::memory_order_relaxed);
  }
  prewarm_for_node(key);
  return *h;
}

bool ForkPool::adopt(const NodeKey& key, const SandboxHandle& handle) {
  {
    std::lock_guard lock(mu_);
    if (config_.prewarm_enabled && prewarmed_.count(slot_key(key.task_id, key.snapshot_id)) == 0 &&
        task_prewarms_locked(key.task_id) < config_.prewarm_budget) {
      prewarmed_.emplace(slot_key(key.task_id, key.snapshot_id), Entry{key.task_id, key.node_id, handle, next_token_++});
      return true;
    }
  }
  stop_quietly(handle);
  return false;
}

void ForkPool::discard_node(const std::string& task_id, const std::string& snapshot_id) {
  std::optional<SandboxHandle> h;
  {
    std::lock_guard lock(mu_);
    auto it = prewarmed_.find(slot_key(task_id, snapshot_id));
    if (it == prewarmed_.end()) return;
    h = it->second.handle;
    prewarmed_.erase(it);
  }
  if (h) {
    discarded_prewarms_.fetch_add(1, std::memory_order_relaxed);
    stop_quietly(*h);
  }
}

void ForkPool::quiesce() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return jobs_.empty() && running_jobs_ == 0; });
}

void ForkPool::drain() {
  quiesce();
  std::vector<SandboxHandle> victims;
  {
    std::lock_guard lock(mu_);
    victims.assign(roots_.begin(), roots_.end());
    roots_.clear();
    for (auto& [id, e] : prewarmed_)
      if (e.handle) victims.push_back(*e.handle);
    prewarmed_.clear();
  }
  for (const auto& h : victims) stop_quietly(h);
}

PoolStats ForkPool::stats() const {
  PoolStats s;
  {
    std::lock_guard lock(mu_);
    s.warm_root_count = roots_.size();
    for (const auto& [id, e] : prewarmed_)
      if (e.handle) ++s.prewarmed_count;
  }
  s.in_flight_forks = limiter_.in_flight();
  s.max_in_flight_forks = limiter_.high_water();
  s.proactive_hits = proactive_hits_.load();
  s.reactive_forks = reactive_forks_.load();
  s.background_instantiations = background_instantiations_.load();
  s.prewarm_failures = prewarm_failures_.load();
  s.discarded_prewarms = discarded_prewarms_.load();
  s.root_starts = root_starts_.load();
  return s;
}

std::size_t ForkPool::live_pooled() const {
  const PoolStats s = stats();
  return s.warm_root_count + s.prewarmed_count;
}

}  // namespace tvcache
