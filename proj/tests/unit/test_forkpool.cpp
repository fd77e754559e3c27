// SPDX-License-Identifier: Apache-2.0
#include "tvcache/clock.hpp"
#include "tvcache/forkpool.hpp"

#include "../support/wrapped_env.hpp"

#include <doctest.h>

#include <set>
#include <thread>

using namespace tvcache;
using tvcache::testing::WrappedEnv;

namespace {

struct Fixture {
  FileTreeSandbox base{FileTreeOptions{.latency = {.start_ms = 2, .fork_ms = 0, .snapshot_ms = 0, .restore_ms = 2}}};
  WrappedEnv env{base};
  SnapshotStore store;
  CostModel cost;

  SnapshotRef snapshot_with(const std::string& content) {
    auto h = base.start();
    base.execute(h, base.describe("write", {{"path", "f"}, {"content", content}}));
    auto ref = store.store(base.snapshot(h), base.kind());
    base.stop(h);
    return ref;
  }

  ForkPool::SnapshotLoader loader() {
    return [this](const NodeKey& k) { return store.load(k.snapshot_id); };
  }
};

NodeKey key_for(const SnapshotRef& ref, std::uint64_t node = 1, std::string task = "t") {
  return {std::move(task), node, ref.snapshot_id};
}

}  // namespace

TEST_CASE("rate limiter caps concurrency and admits in arrival order") {
  RateLimiter lim(3);
  std::atomic<int> inside{0}, worst{0};
  std::vector<std::thread> ts;
  for (int i = 0; i < 12; ++i) {
    ts.emplace_back([&] {
      auto p = lim.acquire();
      const int now = ++inside;
      int w = worst.load();
      while (now > w && !worst.compare_exchange_weak(w, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
      --inside;
    });
  }
  for (auto& t : ts) t.join();
  CHECK(worst.load() <= 3);
  CHECK(lim.high_water() <= 3);
  CHECK(lim.in_flight() == 0);

  RateLimiter one(1);
  auto held = one.acquire();
  std::mutex order_mu;
  std::vector<int> order;
  std::vector<std::thread> waiters;
  for (int i = 0; i < 5; ++i) {
    waiters.emplace_back([&, i] {
      auto p = one.acquire();
      std::lock_guard lock(order_mu);
      order.push_back(i);
    });
    while (one.waiting() < static_cast<std::size_t>(i + 1)) std::this_thread::yield();
  }
  held.reset();
  for (auto& t : waiters) t.join();
  CHECK(order == std::vector<int>{0, 1, 2, 3, 4});
  CHECK_THROWS(RateLimiter(0));
}

TEST_CASE("warm_roots fills the pool without exceeding the fork cap") {
  Fixture f;
  ForkPool pool(f.env, {.root_pool_size = 32, .max_concurrent_forks = 4, .worker_threads = 8}, f.loader());
  pool.warm_roots(0);
  CHECK(pool.stats().warm_root_count == 0);
  pool.warm_roots(32);
  auto s = pool.stats();
  CHECK(s.warm_root_count == 32);
  CHECK(s.max_in_flight_forks <= 4);
  CHECK(s.max_in_flight_forks >= 2);
  CHECK(f.env.starts == 32);
}

TEST_CASE("acquire_root: warm path is fast and never hands out a handle twice") {
  Fixture f;
  ForkPool pool(f.env, {.root_pool_size = 100, .max_concurrent_forks = 4, .worker_threads = 4}, f.loader());
  pool.warm_roots(100);
  const auto t0 = SteadyClock::now();
  auto first = pool.acquire_root();
  CHECK(elapsed_ms(t0) < 1.0);
  std::mutex mu;
  std::set<std::uint64_t> ids{first.id};
  std::vector<std::thread> ts;
  for (int i = 0; i < 99; ++i) {
    ts.emplace_back([&] {
      auto h = pool.acquire_root();
      CHECK(f.env.is_alive(h));
      std::lock_guard lock(mu);
      ids.insert(h.id);
    });
  }
  for (auto& t : ts) t.join();
  CHECK(ids.size() == 100);
}

TEST_CASE("acquire_root falls back to a synchronous start and replenishes below half") {
  Fixture f;
  ForkPool pool(f.env, {.root_pool_size = 4, .max_concurrent_forks = 2, .worker_threads = 2}, f.loader());
  auto h = pool.acquire_root();
  CHECK(f.env.is_alive(h));
  pool.quiesce();
  CHECK(pool.stats().warm_root_count == 4);
  pool.acquire_root();
  pool.acquire_root();
  pool.quiesce();
  CHECK(pool.stats().warm_root_count == 2);  // 2 of 4 is not below half
  pool.acquire_root();
  pool.quiesce();
  CHECK(pool.stats().warm_root_count == 4);
}

TEST_CASE("prewarm is idempotent and acquire_for_node consumes it") {
  Fixture f;
  auto ref = f.snapshot_with("A");
  ForkPool pool(f.env, {.root_pool_size = 0, .max_concurrent_forks = 2}, f.loader(), &f.cost);
  pool.prewarm_for_node(key_for(ref));
  pool.prewarm_for_node(key_for(ref));
  pool.quiesce();
  CHECK(pool.stats().prewarmed_count == 1);
  CHECK(f.env.restores == 1);
  auto h = pool.acquire_for_node(key_for(ref));
  CHECK(pool.stats().proactive_hits == 1);
  CHECK(pool.stats().reactive_forks == 0);
  CHECK(f.env.snapshot(h) == f.store.load(ref.snapshot_id));
  pool.quiesce();  // replacement prewarm
  CHECK(pool.stats().prewarmed_count == 1);
  CHECK(f.cost.estimate("filetree").restore_ms < 1000.0);
}

TEST_CASE("acquire_for_node without a prewarm restores synchronously once") {
  Fixture f;
  auto ref = f.snapshot_with("B");
  ForkPool pool(f.env, {.root_pool_size = 0, .max_concurrent_forks = 2, .prewarm_enabled = false}, f.loader());
  auto h = pool.acquire_for_node(key_for(ref));
  CHECK(f.env.restores == 1);
  CHECK(pool.stats().reactive_forks == 1);
  CHECK(f.env.snapshot(h) == f.store.load(ref.snapshot_id));
  f.store.drop(ref.snapshot_id);
  CHECK_THROWS_AS(pool.acquire_for_node(key_for(ref)), SnapshotMissing);
}

TEST_CASE("discarding a node while its prewarm is in flight discards the result") {
  FileTreeSandbox slow(FileTreeOptions{.latency = {.start_ms = 0, .fork_ms = 0, .snapshot_ms = 0, .restore_ms = 30}});
  SnapshotStore store;
  auto h0 = slow.start();
  auto ref = store.store(slow.snapshot(h0), slow.kind());
  slow.stop(h0);
  ForkPool pool(slow, {.root_pool_size = 0, .max_concurrent_forks = 1},
                [&](const NodeKey& k) { return store.load(k.snapshot_id); });
  pool.prewarm_for_node(key_for(ref));
  std::this_thread::sleep_for(std::chrono::milliseconds(10));
  pool.discard_node("t", ref.snapshot_id);
  pool.quiesce();
  CHECK(pool.stats().prewarmed_count == 0);
  CHECK(pool.stats().discarded_prewarms == 1);
  CHECK(slow.live_count() == 0);
}

TEST_CASE("prewarm of a vanished snapshot aborts silently") {
  Fixture f;
  auto ref = f.snapshot_with("C");
  f.store.drop(ref.snapshot_id);
  ForkPool pool(f.env, {.root_pool_size = 0}, f.loader());
  pool.prewarm_for_node(key_for(ref));
  pool.quiesce();
  CHECK(pool.stats().prewarmed_count == 0);
  CHECK(pool.stats().prewarm_failures == 0);
}

TEST_CASE("background_instantiate returns immediately and yields a proactive hit") {
  Fixture f;
  auto ref = f.snapshot_with("D");
  ForkPool pool(f.env, {.root_pool_size = 0}, f.loader());
  const auto t0 = SteadyClock::now();
  pool.background_instantiate(key_for(ref));
  CHECK(elapsed_ms(t0) < 1.0);
  pool.quiesce();
  CHECK(pool.stats().background_instantiations == 1);
  pool.acquire_for_node(key_for(ref));
  CHECK(pool.stats().proactive_hits == 1);
}

TEST_CASE("background instantiation retries once, and a failed node is still reactively usable") {
  Fixture f;
  auto ref = f.snapshot_with("E");
  ForkPool pool(f.env, {.root_pool_size = 0}, f.loader());
  f.env.fail_next_restores = 1;
  pool.background_instantiate(key_for(ref));
  pool.quiesce();
  CHECK(pool.stats().prewarm_failures == 1);
  CHECK(pool.stats().prewarmed_count == 1);

  auto ref2 = f.snapshot_with("F");
  f.env.fail_next_restores = 2;
  pool.background_instantiate(key_for(ref2, 2));
  pool.quiesce();
  CHECK(pool.stats().prewarmed_count == 1);
  auto h = pool.acquire_for_node(key_for(ref2, 2));
  CHECK(f.env.snapshot(h) == f.store.load(ref2.snapshot_id));
  CHECK(pool.stats().reactive_forks == 1);
}

TEST_CASE("per-task prewarm budget") {
  Fixture f;
  ForkPool pool(f.env, {.root_pool_size = 0, .prewarm_budget = 2}, f.loader());
  for (int i = 0; i < 4; ++i) pool.prewarm_for_node(key_for(f.snapshot_with(std::to_string(i)), i));
  pool.prewarm_for_node(key_for(f.snapshot_with("other"), 9, "u"));
  pool.quiesce();
  CHECK(pool.stats().prewarmed_count == 3);
}

TEST_CASE("adopt registers a live sandbox once") {
  Fixture f;
  auto ref = f.snapshot_with("G");
  ForkPool pool(f.env, {.root_pool_size = 0}, f.loader());
  auto h = f.base.restore(f.store.load(ref.snapshot_id));
  CHECK(pool.adopt(key_for(ref), h));
  auto h2 = f.base.restore(f.store.load(ref.snapshot_id));
  CHECK_FALSE(pool.adopt(key_for(ref), h2));
  CHECK_FALSE(f.base.is_alive(h2));
  CHECK(pool.acquire_for_node(key_for(ref)) == h);
}

TEST_CASE("randomized schedules: accounting identity, supply safety and no leaks") {
  Fixture f;
  std::vector<SnapshotRef> refs;
  for (int i = 0; i < 6; ++i) refs.push_back(f.snapshot_with("v" + std::to_string(i)));
  ForkPool pool(f.env, {.root_pool_size = 4, .max_concurrent_forks = 2, .prewarm_budget = 4, .worker_threads = 3},
                f.loader());
  pool.warm_roots(4);
  std::mt19937 rng(1);
  int acquisitions = 0;
  std::vector<SandboxHandle> in_use;
  for (int step = 0; step < 300; ++step) {
    const std::size_t k = rng() % refs.size();
    const NodeKey key = key_for(refs[k], k);
    switch (rng() % 4) {
      case 0:
        pool.prewarm_for_node(key);
        break;
      case 1: {
        auto h = pool.acquire_for_node(key);
        ++acquisitions;
        CHECK(f.env.snapshot(h) == f.store.load(refs[k].snapshot_id));
        in_use.push_back(h);
        break;
      }
      case 2: {
        auto h = pool.acquire_root();
        CHECK(f.env.snapshot(h) == "FTS1\n");
        in_use.push_back(h);
        break;
      }
      default:
        if (!in_use.empty()) {
          f.env.stop(in_use.back());
          in_use.pop_back();
        }
    }
  }
  pool.quiesce();
  auto s = pool.stats();
  CHECK(s.proactive_hits + s.reactive_forks == static_cast<std::uint64_t>(acquisitions));
  CHECK(s.max_in_flight_forks <= 2);
  for (auto& h : in_use) f.env.stop(h);
  CHECK(f.env.live_count() == pool.live_pooled());
  pool.drain();
  CHECK(f.env.live_count() == 0);
}
