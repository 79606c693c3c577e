#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "crum/ckpt/strategy.hpp"
#include "crum/workloads/workloads.hpp"

namespace crum::bench {

struct BenchConfig {
  double throttle_mbps = 0;  // 0: unthrottled
  bool sync = true;
  std::string image_dir = "/tmp";
  bool keep_images = false;
  uint32_t steps_before_ckpt = 1;
};

// One checkpoint measurement. Times in seconds.
struct BenchResult {
  std::string workload;
  std::string strategy;
  uint64_t seed = 0;
  double pause_time = 0;
  double total_time = 0;
  uint64_t image_bytes = 0;
  uint64_t payload_bytes = 0;  // managed + device bytes captured
  // Quiesce + copy of every region into the application: the pause a
  // checkpoint cannot avoid.
  double drain_time = 0;
  uint64_t faults_taken = 0;
  uint64_t bulk_bytes = 0;
  double quiesce_time = 0;
  double migrate_time = 0;
  double stage_time = 0;
  double write_time = 0;
  double fork_time = 0;
  double throttle_mbps = 0;
  bool synced = true;
};

// Runs `workload` under a fresh proxy in this process and checkpoints it once
// after `steps_before_ckpt` iterations.
BenchResult checkpoint_bench(const std::string& workload, const workloads::Params& params,
                             const ckpt::Strategy& strategy, const BenchConfig& config);

struct PipelineResult {
  uint32_t depth = 0;
  uint64_t launches = 0;
  uint32_t sleep_us = 0;
  double enqueue_mean_us = 0;  // client-side cost of one non-blocking launch
  double round_trip_us = 0;    // mean blocking round trip (Ping)
  double total_s = 0;          // launches + the final synchronize
  double throughput = 0;       // launches per second, end to end
};

PipelineResult pipeline_bench(uint32_t depth, uint64_t launches, uint32_t sleep_us);

struct OverheadResult {
  std::string workload;
  double native_s = 0;
  double runtime_s = 0;
  double ratio = 0;  // runtime / native
  uint32_t native_checksum = 0;
  uint32_t runtime_checksum = 0;
};

OverheadResult overhead_bench(const std::string& workload, const workloads::Params& params);

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const BenchResult& r);
void print_table(std::ostream& out, const std::vector<BenchResult>& rows);

}  // namespace crum::bench
