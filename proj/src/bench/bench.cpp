#include "crum/bench/bench.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>

#include "crum/cli/launcher.hpp"
#include "crum/client/session.hpp"

namespace crum::bench {

using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Arena big enough for the workload's allocations.
uint64_t arena_for(const std::string& name, const workloads::Params& p) {
  uint64_t bytes = 0;
  if (name == "dotprod" || name == "redundant") {
    bytes = 2 * p.elements * sizeof(float);
  } else if (name == "bigreg") {
    bytes = 3 * p.region_bytes;
  } else if (name == "tinyker") {
    bytes = uint64_t{p.regions ? p.regions : 64} * (132 << 10);
  }
  return bytes + bytes / 8 + (uint64_t{64} << 20);
}

}  // namespace

BenchResult checkpoint_bench(const std::string& name, const workloads::Params& params, const ckpt::Strategy& strategy,
                             const BenchConfig& config) {
  cli::ProxyOptions po;
  po.arena_bytes = arena_for(name, params);
  cli::ProxyProcess proxy(po);
  auto session = client::Session::open(proxy.shm_name());
  workloads::SessionRuntime rt(*session);
  auto wl = workloads::make_workload(name, params);
  session->set_save_hook([&] { return wl->save_state(); });
  wl->setup(rt);
  for (uint32_t i = 0; i < config.steps_before_ckpt && !wl->done(); ++i) {
    wl->step(rt);
  }

  ckpt::Strategy s = strategy;
  s.sync = config.sync;
  s.throttle_mbps = config.throttle_mbps;
  const std::string path =
      (std::filesystem::path(config.image_dir) / (name + "-" + s.name() + "-" + proxy.session_id() + ".crum")).string();
  auto report = session->checkpoint(path, s);
  if (!report.complete) {
    auto status = session->wait_checkpoint();
    if (status.result != Errc::Ok) {
      throw Error(status.result, status.message);
    }
    report = status.report;
  }
  const auto& stats = session->shadows().stats();

  BenchResult r;
  r.workload = name;
  r.strategy = s.name();
  r.seed = params.seed;
  r.pause_time = report.pause_s;
  r.total_time = report.total_s;
  r.image_bytes = report.image_bytes;
  r.payload_bytes = wl->managed_bytes();
  r.drain_time = report.quiesce_s + report.drain_s + report.stage_s;
  r.faults_taken = stats.read_faults + stats.write_faults;
  r.bulk_bytes = report.bulk_bytes;
  r.quiesce_time = report.quiesce_s;
  r.migrate_time = report.drain_s;
  r.stage_time = report.stage_s;
  r.write_time = report.write_s;
  r.fork_time = report.fork_s;
  r.throttle_mbps = config.throttle_mbps;
  r.synced = config.sync;
  session->close();
  if (!config.keep_images) {
    std::filesystem::remove(path);
  }
  return r;
}

PipelineResult pipeline_bench(uint32_t depth, uint64_t launches, uint32_t sleep_us) {
  cli::ProxyOptions po;
  cli::ProxyProcess proxy(po);
  client::SessionOptions so;
  so.pipeline_depth = depth;
  auto session = client::Session::open(proxy.shm_name(), so);

  PipelineResult r;
  r.depth = depth;
  r.launches = launches;
  r.sleep_us = sleep_us;
  constexpr int kPings = 2000;
  for (int i = 0; i < 100; ++i) {
    session->ping();
  }
  auto t0 = Clock::now();
  for (int i = 0; i < kPings; ++i) {
    session->ping();
  }
  r.round_trip_us = seconds_since(t0) * 1e6 / kPings;

  const uint64_t scalar = sleep_us;
  const std::span<const uint64_t> scalars(&scalar, 1);
  double enqueue = 0;
  t0 = Clock::now();
  for (uint64_t i = 0; i < launches; ++i) {
    const auto c0 = Clock::now();
    session->launch(client::kDefaultStream, "sleep_us", std::span<const client::RegionRef>(), scalars);
    enqueue += std::chrono::duration<double>(Clock::now() - c0).count();
  }
  session->synchronize();
  r.total_s = seconds_since(t0);
  r.enqueue_mean_us = enqueue * 1e6 / static_cast<double>(launches);
  r.throughput = static_cast<double>(launches) / r.total_s;
  session->close();
  return r;
}

OverheadResult overhead_bench(const std::string& name, const workloads::Params& params) {
  OverheadResult r;
  r.workload = name;
  {
    workloads::NativeRuntime rt(device::DeviceConfig{arena_for(name, params), 4096});
    auto wl = workloads::make_workload(name, params);
    const auto t0 = Clock::now();
    wl->setup(rt);
    while (!wl->done()) {
      wl->step(rt);
    }
    r.native_checksum = wl->checksum(rt);
    r.native_s = seconds_since(t0);
  }
  {
    cli::ProxyOptions po;
    po.arena_bytes = arena_for(name, params);
    cli::ProxyProcess proxy(po);
    auto session = client::Session::open(proxy.shm_name());
    workloads::SessionRuntime rt(*session);
    auto wl = workloads::make_workload(name, params);
    const auto t0 = Clock::now();
    wl->setup(rt);
    while (!wl->done()) {
      wl->step(rt);
    }
    r.runtime_checksum = wl->checksum(rt);
    r.runtime_s = seconds_since(t0);
    session->close();
  }
  r.ratio = r.runtime_s / r.native_s;
  return r;
}

void write_csv_header(std::ostream& out) {
  out << "workload,strategy,seed,pause_time,total_time,image_bytes,payload_bytes,drain_time,faults_taken,bulk_bytes,"
         "quiesce_time,migrate_time,stage_time,write_time,fork_time,throttle_mbps,synced\n";
}

void write_csv_row(std::ostream& out, const BenchResult& r) {
  out << r.workload << ',' << r.strategy << ',' << r.seed << ',' << std::setprecision(6) << std::fixed << r.pause_time
      << ',' << r.total_time << ',' << r.image_bytes << ',' << r.payload_bytes << ',' << r.drain_time << ','
      << r.faults_taken << ',' << r.bulk_bytes << ',' << r.quiesce_time << ',' << r.migrate_time << ','
      << r.stage_time << ',' << r.write_time << ',' << r.fork_time << ',' << std::setprecision(1) << r.throttle_mbps
      << ',' << (r.synced ? 1 : 0) << '\n';
  out.unsetf(std::ios::floatfield);
}

void print_table(std::ostream& out, const std::vector<BenchResult>& rows) {
  char line[256];
  std::snprintf(line, sizeof(line), "%-10s %-8s %10s %10s %12s %10s %8s\n", "workload", "strategy", "pause_s",
                "total_s", "image_MiB", "drain_s", "faults");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-10s %-8s %10.3f %10.3f %12.1f %10.3f %8llu\n", r.workload.c_str(),
                  r.strategy.c_str(), r.pause_time, r.total_time, static_cast<double>(r.image_bytes) / (1 << 20),
                  r.drain_time, static_cast<unsigned long long>(r.faults_taken));
    out << line;
  }
}

}  // namespace crum::bench
