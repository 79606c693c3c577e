// crum: launcher, checkpoint trigger, restart and benchmark front end.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "crum/bench/bench.hpp"
#include "crum/cli/launcher.hpp"

using namespace crum;

namespace {

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

struct BenchArgs {
  std::string workloads = "dotprod,redundant";
  std::string strategies = "naive,gzip,pgzip,lz4,forked";
  uint64_t payload_mib = 64;
  uint64_t seed = 1;
  double redundancy = 0.5;
  double throttle = 100;
  bool no_sync = false;
  std::string csv;
  std::string image_dir = "/tmp";
  bool pipeline = false;
  uint64_t launches = 100000;
  bool overhead = false;
};

workloads::Params params_for(const std::string& workload, const BenchArgs& a) {
  workloads::Params p;
  p.seed = a.seed;
  const uint64_t bytes = a.payload_mib << 20;
  if (workload == "dotprod" || workload == "redundant") {
    p.elements = bytes / 2 / sizeof(float);
    p.redundancy = workload == "redundant" ? a.redundancy : 0;
  } else if (workload == "bigreg") {
    p.region_bytes = bytes / 2;
    p.iterations = 2;
  } else if (workload == "tinyker") {
    p.iterations = 2;
  }
  return p;
}

int run_bench(const BenchArgs& a) {
  if (a.pipeline) {
    std::printf("%-6s %10s %14s %14s %10s %12s\n", "depth", "launches", "enqueue_us", "roundtrip_us", "total_s",
                "launches/s");
    for (uint32_t depth : {1u, 64u}) {
      auto r = bench::pipeline_bench(depth, a.launches, 20);
      std::printf("%-6u %10llu %14.3f %14.3f %10.3f %12.0f\n", r.depth, static_cast<unsigned long long>(r.launches),
                  r.enqueue_mean_us, r.round_trip_us, r.total_s, r.throughput);
    }
    return 0;
  }
  if (a.overhead) {
    workloads::Params p;
    p.seed = a.seed;
    p.iterations = 20;
    auto r = bench::overhead_bench("tinyker", p);
    std::printf("tinyker native_s=%.3f runtime_s=%.3f ratio=%.3f checksums %08x/%08x\n", r.native_s, r.runtime_s,
                r.ratio, r.native_checksum, r.runtime_checksum);
    return r.native_checksum == r.runtime_checksum ? 0 : 1;
  }
  std::vector<bench::BenchResult> rows;
  std::ofstream csv;
  if (!a.csv.empty()) {
    csv.open(a.csv);
    if (!csv) {
      std::fprintf(stderr, "crum-error: WriteFailed: cannot open %s\n", a.csv.c_str());
      return 1;
    }
    bench::write_csv_header(csv);
  }
  bench::BenchConfig config;
  config.throttle_mbps = a.throttle;
  config.sync = !a.no_sync;
  config.image_dir = a.image_dir;
  for (const auto& w : split(a.workloads)) {
    for (const auto& s : split(a.strategies)) {
      auto row = bench::checkpoint_bench(w, params_for(w, a), ckpt::Strategy::parse(s), config);
      if (csv) {
        bench::write_csv_row(csv, row);
        csv.flush();
      }
      rows.push_back(row);
    }
  }
  bench::print_table(std::cout, rows);
  return 0;
}

std::vector<std::string> trailing(const CLI::App& cmd) { return cmd.remaining(); }

// `crum run [opts] -- app ...`: drop the separator before CLI11 sees it, since
// a prefix command already hands everything after the first positional over.
std::vector<std::string> strip_separator(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2 || (args[1] != "run" && args[1] != "restart")) {
    return args;
  }
  for (size_t i = 2; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a == "--") {
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
    if (a == "--mode" || a == "--pipeline-depth" || a == "--session") {
      ++i;
    } else if (a.empty() || a[0] != '-') {
      break;
    }
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crum: checkpoint-restart for UVM applications"};
  app.require_subcommand(1);

  cli::RunOptions run;
  std::string mode = "normal";
  uint32_t depth = 0;
  auto* run_cmd = app.add_subcommand("run", "start a proxy and run an application under it");
  run_cmd->add_option("--mode", mode, "normal | verified")->check(CLI::IsMember({"normal", "verified"}));
  run_cmd->add_option("--pipeline-depth", depth);
  run_cmd->add_option("--session", run.session_id, "session id (default: generated)");
  run_cmd->add_flag("--quiet", run.quiet);
  // Everything from the first positional on belongs to the application.
  run_cmd->prefix_command()->allow_extras();
  run_cmd->footer("usage: crum run [options] [--] <app> [args...]");

  std::string session, strategy = "forked", path;
  unsigned workers = 0;
  auto* ckpt_cmd = app.add_subcommand("ckpt", "ask a running session to checkpoint");
  ckpt_cmd->add_option("--session", session)->required();
  ckpt_cmd->add_option("--strategy", strategy)->check(CLI::IsMember({"forked", "naive", "gzip", "pgzip", "lz4"}));
  ckpt_cmd->add_option("--workers", workers);
  ckpt_cmd->add_option("path", path, "image path")->required();

  cli::RunOptions restart;
  std::string restart_mode = "normal";
  uint32_t restart_depth = 0;
  std::string image;
  auto* restart_cmd = app.add_subcommand("restart", "start a fresh proxy and resume an application from an image");
  restart_cmd->add_option("--mode", restart_mode)->check(CLI::IsMember({"normal", "verified"}));
  restart_cmd->add_option("--pipeline-depth", restart_depth);
  restart_cmd->add_option("--session", restart.session_id);
  restart_cmd->add_flag("--quiet", restart.quiet);
  restart_cmd->prefix_command()->allow_extras();
  restart_cmd->footer("usage: crum restart [options] [--] <image> <app> [args...]");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "checkpoint strategy and channel benchmarks");
  bench_cmd->add_option("--workloads", bench_args.workloads, "comma-separated: dotprod,redundant,bigreg,tinyker");
  bench_cmd->add_option("--strategies", bench_args.strategies);
  bench_cmd->add_option("--payload-mib", bench_args.payload_mib, "managed payload per workload");
  bench_cmd->add_option("--seed", bench_args.seed);
  bench_cmd->add_option("--redundancy", bench_args.redundancy);
  bench_cmd->add_option("--throttle-mbps", bench_args.throttle, "storage bandwidth limit, 0 = none");
  bench_cmd->add_flag("--no-sync", bench_args.no_sync, "skip fsync of images");
  bench_cmd->add_option("--csv", bench_args.csv);
  bench_cmd->add_option("--image-dir", bench_args.image_dir);
  bench_cmd->add_flag("--pipeline", bench_args.pipeline, "measure pipelined launch throughput at depth 1 and 64");
  bench_cmd->add_option("--launches", bench_args.launches);
  bench_cmd->add_flag("--overhead", bench_args.overhead, "tinyker native vs under-runtime wall time");

  auto args = strip_separator(argc, argv);
  std::vector<const char*> cargs;
  for (const auto& a : args) {
    cargs.push_back(a.c_str());
  }
  CLI11_PARSE(app, static_cast<int>(cargs.size()), cargs.data());

  try {
    if (*run_cmd) {
      run.app = trailing(*run_cmd);
      run.verified = mode == "verified";
      if (depth != 0) {
        run.pipeline_depth = depth;
      }
      return cli::run_session(run);
    }
    if (*ckpt_cmd) {
      return cli::request_checkpoint(session, strategy, path, workers);
    }
    if (*restart_cmd) {
      restart.verified = restart_mode == "verified";
      if (restart_depth != 0) {
        restart.pipeline_depth = restart_depth;
      }
      restart.app = trailing(*restart_cmd);
      if (restart.app.empty()) {
        std::fprintf(stderr, "crum-error: InvalidArgument: restart needs an image and an application\n");
        return 1;
      }
      image = restart.app.front();
      restart.app.erase(restart.app.begin());
      restart.restart_image = image;
      return cli::run_session(restart);
    }
    return run_bench(bench_args);
  } catch (const Error& e) {
    std::fprintf(stderr, "crum-error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return 1;
  }
}
