// SPDX-License-Identifier: Apache-2.0
// Operator CLI: serve, inspect, export-dot, stats, persist-now,
// contract-check and bench.

#include "tvcache/bench.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"
#include "tvcache/remote_cache.hpp"
#include "tvcache/sandbox.hpp"
#include "tvcache/server.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

namespace {

using tvcache::HttpEndpoint;
using tvcache::HttpReply;
using json = nlohmann::json;
namespace bench = tvcache::bench;

enum Exit : int { kOk = 0, kRuntime = 1, kUsage = 2, kConnection = 3, kCheckFailed = 4 };

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

template <class T>
std::vector<T> parse_numbers(const std::string& s) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v > 0)) throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw std::invalid_argument("not a positive number: " + item);
    }
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

json fetch_json(HttpEndpoint& ep, const std::string& method, const std::string& path) {
  const HttpReply r = ep.send(method, path);
  if (r.status != 200) throw std::runtime_error(fmt::format("{} {} on {}: HTTP {} {}", method, path, ep.address(), r.status, r.body));
  return json::parse(r.body);
}

void write_text(const std::string& file, const std::string& text) {
  if (file.empty() || file == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file);
  out << text;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> flags;  // config key, value
  std::map<std::string, std::string> values;
  bool spawn_shards = false;
  bool print_config = false;
};

int serve(ServeArgs& a, const std::vector<std::pair<std::string, CLI::Option*>>& opts) {
  tvcache::ServerConfig base;
  if (!a.config_file.empty()) tvcache::apply_config_file(base, a.config_file);
  tvcache::apply_env(base);
  for (const auto& [key, opt] : opts)
    if (opt->count() > 0) tvcache::apply_config_value(base, key, a.values[key]);
  if (a.print_config) {
    std::cout << tvcache::to_json(base).dump() << std::endl;
    return kOk;
  }

  std::vector<tvcache::ServerConfig> configs;
  if (a.spawn_shards) {
    const auto [host, port] = tvcache::split_address(base.listen_address);
    for (std::size_t i = 0; i < base.shard_count; ++i) {
      tvcache::ServerConfig c = base;
      c.shard_index = i;
      c.listen_address = fmt::format("{}:{}", host, port == 0 ? 0 : port + static_cast<int>(i));
      if (!base.persist_dir.empty()) c.persist_dir = base.persist_dir / fmt::format("shard-{}", i);
      if (!base.request_log.empty()) c.request_log = base.request_log.string() + fmt::format(".shard-{}", i);
      configs.push_back(std::move(c));
    }
  } else {
    configs.push_back(base);
  }

  // Signals are taken synchronously by sigwait below, so block them before
  // any server thread exists.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  std::vector<std::unique_ptr<tvcache::Server>> servers;
  json listening = json::array();
  for (auto& c : configs) {
    auto s = std::make_unique<tvcache::Server>(c);
    s->start();
    const auto [host, port] = tvcache::split_address(c.listen_address);
    listening.push_back(fmt::format("{}:{}", host, s->port()));
    servers.push_back(std::move(s));
  }
  std::cout << json{{"listening", listening}, {"shard_count", base.shard_count}}.dump() << std::endl;

  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {} received, shutting down", sig);
  for (auto& s : servers) s->stop();
  return kOk;
}

// ---------------------------------------------------------------------------
// remote subcommands

struct Remote {
  std::vector<std::unique_ptr<HttpEndpoint>> eps;

  explicit Remote(const std::string& servers) {
    for (const auto& a : split_list(servers)) eps.push_back(std::make_unique<HttpEndpoint>(a));
    if (eps.empty()) throw std::invalid_argument("--server needs at least one address");
  }
  HttpEndpoint& for_task(const std::string& task) { return *eps[tvcache::shard_for(task, eps.size())]; }
};

int inspect(const std::string& servers, const std::string& task, bool as_json) {
  Remote remote(servers);
  json tasks = json::object();
  for (auto& ep : remote.eps) {
    const json s = fetch_json(*ep, "GET", "/stats");
    for (const auto& [id, t] : s["tasks"].items()) {
      if (!task.empty() && id != task) continue;
      tasks[id] = {{"nodes", t["nodes"]},         {"snapshots", t["snapshots"]}, {"hits", t["hits"]},
                   {"misses", t["misses"]},       {"lpm_hits", t["lpm_hits"]},   {"hit_rate", t["hit_rate"]},
                   {"active_leases", t["active_leases"]}, {"shard", ep->address()}};
    }
  }
  if (!task.empty() && tasks.empty()) throw std::runtime_error("unknown task: " + task);
  if (as_json) {
    std::cout << json{{"tasks", tasks}}.dump() << std::endl;
    return kOk;
  }
  std::cout << fmt::format("{:<32} {:>7} {:>9} {:>8} {:>8} {:>9}\n", "task", "nodes", "snapshots", "hits", "misses",
                           "hit_rate");
  for (const auto& [id, t] : tasks.items())
    std::cout << fmt::format("{:<32} {:>7} {:>9} {:>8} {:>8} {:>9.3f}\n", id, t["nodes"].get<std::size_t>(),
                             t["snapshots"].get<std::size_t>(), t["hits"].get<std::size_t>(),
                             t["misses"].get<std::size_t>(), t["hit_rate"].get<double>());
  return kOk;
}

int export_dot(const std::string& servers, const std::string& task, const std::string& out) {
  Remote remote(servers);
  const HttpReply r = remote.for_task(task).send("GET", "/graph?task_id=" + task);
  if (r.status != 200) throw std::runtime_error(fmt::format("export of task {} failed: HTTP {} {}", task, r.status, r.body));
  write_text(out, r.body);
  return kOk;
}

int stats(const std::string& servers, bool as_json) {
  Remote remote(servers);
  json all = json::array();
  for (auto& ep : remote.eps) all.push_back(fetch_json(*ep, "GET", "/stats"));
  const json out = all.size() == 1 ? all[0] : all;
  std::cout << (as_json ? out.dump() : out.dump(2)) << std::endl;
  return kOk;
}

int persist_now(const std::string& servers) {
  Remote remote(servers);
  for (auto& ep : remote.eps) {
    const json r = fetch_json(*ep, "POST", "/persist");
    std::cout << json{{"server", ep->address()}, {"cycle", r["cycle"]}}.dump() << std::endl;
  }
  return kOk;
}

int contract_check(const std::string& backend, const std::string& options, const tvcache::ContractOptions& co,
                   bool as_json) {
  auto env = tvcache::make_environment(backend, options.empty() ? json::object() : json::parse(options));
  const tvcache::ContractReport report = tvcache::contract_suite(*env, co);
  if (as_json) {
    std::cout << report.to_json().dump() << std::endl;
  } else {
    for (const auto& p : report.properties)
      std::cout << fmt::format("{} {:<28} checks={} violations={}{}\n", p.passed ? "PASS" : "FAIL", p.name, p.checks,
                               p.violations, p.first_violation.empty() ? "" : "  first: " + p.first_violation);
    std::cout << (report.passed() ? "contract: PASS" : "contract: FAIL") << " (" << backend << ")" << std::endl;
  }
  return report.passed() ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// bench

int bench_run(const std::string& spec_file, bool cached, const std::string& out, const std::string& csv,
              const std::string& servers, bool verify) {
  const bench::Workload w = bench::generate(bench::load_workload(spec_file));
  bench::RunOptions o;
  o.verify = verify;
  std::unique_ptr<tvcache::RemoteCache> remote;
  if (!servers.empty()) {
    tvcache::RemoteCacheOptions ro;
    ro.addresses = split_list(servers);
    remote = std::make_unique<tvcache::RemoteCache>(ro);
    o.cache = remote.get();
  }
  bench::RunReport r;
  try {
    r = bench::run(w, cached, o);
  } catch (const bench::BenchMismatch& e) {
    throw CheckFailed(std::string("cached result mismatch: ") + e.what());
  }
  write_text(out, bench::to_json(r).dump(2) + "\n");
  if (!csv.empty()) bench::write_calls_csv(r, w, csv);
  if (!out.empty() && out != "-")
    std::cout << fmt::format("{} calls={} hit_rate={:.4f} median_ms={:.3f} wall_ms={:.0f}\n",
                             cached ? "cached" : "uncached", r.calls, r.hit_rate(), r.median_tool_ms, r.wall_ms);
  return kOk;
}

int bench_expect(const std::string& spec_file, double time_scale, bool http) {
  const bench::Workload w = bench::generate(bench::load_workload(spec_file));
  bench::RunOptions o;
  std::unique_ptr<bench::LocalCluster> cluster;
  std::unique_ptr<tvcache::RemoteCache> remote;
  if (http) {
    cluster = std::make_unique<bench::LocalCluster>(1);
    tvcache::RemoteCacheOptions ro;
    ro.addresses = cluster->addresses();
    remote = std::make_unique<tvcache::RemoteCache>(ro);
    o.cache = remote.get();
  }
  const auto hits = bench::calibrate_hit_latency(w, time_scale, o);
  const double overhead = bench::calibrate_exec_overhead(w.spec.tool_cost.fast_ms);
  std::cout << bench::to_json(bench::expected_speedup(w, hits, overhead)).dump(2) << std::endl;
  return kOk;
}

int bench_sweep(const std::string& rps, const std::string& shards, std::size_t keys, double duration,
                std::size_t senders, const std::string& out, const std::string& csv) {
  bench::SweepOptions o;
  o.rps = parse_numbers<double>(rps);
  o.shards = parse_numbers<std::size_t>(shards);
  o.keys = keys;
  o.duration_s = duration;
  o.senders = senders;
  const auto cells = bench::latency_sweep(o);
  json table = json::array();
  for (const auto& c : cells) table.push_back(bench::to_json(c));
  const json report = {
      {"header",
       {{"load", "open-loop, latency from scheduled send time"},
        {"saturated", "achieved throughput below 95% of offered"},
        {"p95_target_ms", 10},
        {"hardware_threads", std::thread::hardware_concurrency()}}},
      {"p95_get_latency_by_rps", table}};
  write_text(out, report.dump(2) + "\n");
  if (!csv.empty()) bench::write_sweep_csv(cells, csv);
  return kOk;
}

int bench_compare(const std::string& a, const std::string& b, bool as_json) {
  auto load = [](const std::string& f) {
    std::ifstream in(f);
    if (!in) throw std::invalid_argument("cannot read " + f);
    return bench::run_report_from_json(json::parse(in));
  };
  bench::RunReport x = load(a), y = load(b);
  if (x.cached) std::swap(x, y);
  const bench::BenchReport r = bench::compare(x, y);
  if (as_json) {
    std::cout << bench::to_json(r).dump() << std::endl;
  } else {
    std::cout << bench::speedup_table({{fmt::format("seed {}", y.spec.seed), r}});
    std::cout << fmt::format("hit rate {:.4f}; rollout savings {:.3f}; batch savings {:.3f}\n", y.hit_rate(),
                             r.rollout_savings, r.batch_savings);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tvcache: a trajectory-keyed tool value cache for agent rollouts"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  // serve
  ServeArgs sa;
  auto* serve_cmd = app.add_subcommand("serve", "run the cache server (flags override env, env overrides --config)");
  serve_cmd->add_option("--config", sa.config_file, "key = value config file")->check(CLI::ExistingFile);
  std::vector<std::pair<std::string, CLI::Option*>> serve_opts;
  for (const char* key : {"listen", "shards", "shard_index", "persist_interval_s", "persist_dir", "budget",
                          "lease_ttl_s", "threads", "max_in_flight", "snapshot_byte_cap", "request_log"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    serve_opts.emplace_back(key, serve_cmd->add_option(flag, sa.values[key]));
  }
  serve_cmd->add_flag("--spawn-shards", sa.spawn_shards, "run every shard of --shards in this process on consecutive ports");
  serve_cmd->add_flag("--print-config", sa.print_config, "print the effective configuration and exit");

  std::string servers, task, out, csv;
  bool as_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "per-task node, snapshot and hit counts");
  inspect_cmd->add_option("--server", servers, "comma-separated shard addresses")->required();
  inspect_cmd->add_option("--task", task, "only this task");
  inspect_cmd->add_flag("--json", as_json);

  auto* dot_cmd = app.add_subcommand("export-dot", "write a task graph as Graphviz DOT");
  dot_cmd->add_option("--server", servers)->required();
  dot_cmd->add_option("--task", task)->required();
  dot_cmd->add_option("--out", out, "output file, - for stdout")->default_val("-");

  auto* stats_cmd = app.add_subcommand("stats", "print /stats");
  stats_cmd->add_option("--server", servers)->required();
  stats_cmd->add_flag("--json", as_json, "compact single-line JSON");

  auto* persist_cmd = app.add_subcommand("persist-now", "run a persistence cycle now");
  persist_cmd->add_option("--server", servers)->required();

  std::string backend = "filetree", env_options;
  tvcache::ContractOptions co;
  auto* contract_cmd = app.add_subcommand("contract-check", "run the sandbox contract suite against a backend");
  contract_cmd->add_option("--backend", backend)->check(CLI::IsMember(tvcache::environment_kinds()))->capture_default_str();
  contract_cmd->add_option("--options", env_options, "backend options as JSON");
  contract_cmd->add_option("--workloads", co.workloads)->capture_default_str();
  contract_cmd->add_option("--ops", co.ops_per_workload)->capture_default_str();
  contract_cmd->add_option("--seed", co.seed)->capture_default_str();
  contract_cmd->add_flag("--json", as_json);

  auto* bench_cmd = app.add_subcommand("bench", "workload replay and latency benchmarks");
  bench_cmd->require_subcommand(1);
  std::string spec_file;
  bool cached = false, no_cache = false, no_verify = false;
  auto* run_cmd = bench_cmd->add_subcommand("run", "replay a generated workload");
  run_cmd->add_option("--spec", spec_file, "workload spec JSON")->required()->check(CLI::ExistingFile);
  auto* cached_flag = run_cmd->add_flag("--cached", cached, "through the executor and cache");
  auto* no_cache_flag = run_cmd->add_flag("--no-cache", no_cache, "straight against fresh sandboxes");
  cached_flag->excludes(no_cache_flag);
  run_cmd->add_option("--out", out, "report JSON, - for stdout")->default_val("-");
  run_cmd->add_option("--csv", csv, "per-call CSV");
  run_cmd->add_option("--server", servers, "use these shards instead of an in-process cache");
  run_cmd->add_flag("--no-verify", no_verify, "skip the fresh-replay correctness gate");

  auto* expect_cmd = bench_cmd->add_subcommand("expect", "closed-form median speedup expectation for a spec");
  expect_cmd->add_option("--spec", spec_file)->required()->check(CLI::ExistingFile);
  double time_scale = 0;
  bool http = false;
  expect_cmd->add_option("--time-scale", time_scale, "cost multiplier of the hit-latency rehearsal; 0 runs it hot on one thread")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  expect_cmd->add_flag("--http", http, "rehearse against a private server over HTTP, for runs that use --server");

  std::string rps = "1,64,256", shard_list = "1,2,4";
  std::size_t keys = 8192, senders = 8;
  double duration = 10;
  auto* sweep_cmd = bench_cmd->add_subcommand("sweep", "open-loop P50/P95/P99 /get latency by rate and shard count");
  sweep_cmd->add_option("--rps", rps)->capture_default_str();
  sweep_cmd->add_option("--shards", shard_list)->capture_default_str();
  sweep_cmd->add_option("--keys", keys)->capture_default_str();
  sweep_cmd->add_option("--duration-s", duration)->capture_default_str();
  sweep_cmd->add_option("--senders", senders, "concurrent connections; above a shard's thread count, requests queue behind idle keep-alive connections")->capture_default_str();
  sweep_cmd->add_option("--out", out)->default_val("-");
  sweep_cmd->add_option("--csv", csv);

  std::string report_a, report_b;
  auto* compare_cmd = bench_cmd->add_subcommand("compare", "speedup table from an uncached and a cached report");
  compare_cmd->add_option("a", report_a)->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("b", report_b)->required()->check(CLI::ExistingFile);
  compare_cmd->add_flag("--json", as_json);

  std::size_t cases = 200;
  std::uint64_t seed = 11;
  auto* golden_cmd = bench_cmd->add_subcommand("golden", "write the wire-level golden trace");
  golden_cmd->add_option("--out", out)->required();
  golden_cmd->add_option("--cases", cases)->capture_default_str();
  golden_cmd->add_option("--seed", seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*serve_cmd) return serve(sa, serve_opts);
    if (*inspect_cmd) return inspect(servers, task, as_json);
    if (*dot_cmd) return export_dot(servers, task, out);
    if (*stats_cmd) return stats(servers, as_json);
    if (*persist_cmd) return persist_now(servers);
    if (*contract_cmd) return contract_check(backend, env_options, co, as_json);
    if (*run_cmd) {
      if (cached == no_cache) throw std::invalid_argument("bench run needs exactly one of --cached or --no-cache");
      return bench_run(spec_file, cached, out, csv, servers, !no_verify);
    }
    if (*expect_cmd) return bench_expect(spec_file, time_scale, http);
    if (*sweep_cmd) return bench_sweep(rps, shard_list, keys, duration, senders, out, csv);
    if (*compare_cmd) return bench_compare(report_a, report_b, as_json);
    if (*golden_cmd) {
      std::cout << json{{"steps", bench::write_golden_trace(out, cases, seed)}, {"out", out}}.dump() << std::endl;
      return kOk;
    }
  } catch (const tvcache::CacheUnavailable& e) {
    std::cerr << "error: cannot reach server: " << e.what() << std::endl;
    return kConnection;
  } catch (const CheckFailed& e) {
    std::cerr << "check failed: " << e.what() << std::endl;
    return kCheckFailed;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntime;
  }
  return kUsage;
}
