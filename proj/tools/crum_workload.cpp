// Bundled workloads, run under `crum run` (or natively with --native).

#include <chrono>
#include <cstdio>
#include <thread>

#include "CLI11.hpp"
#include "crum/ckpt/strategy.hpp"
#include "crum/client/session.hpp"
#include "crum/workloads/workloads.hpp"

using namespace crum;

namespace {

struct Args {
  std::string name;
  workloads::Params params;
  uint64_t region_mib = 0;
  bool native = false;
  uint32_t ckpt_at = 0;
  std::string ckpt_path;
  std::string strategy = "naive";
  bool stop_after_ckpt = false;
  uint32_t step_delay_ms = 0;
};

void print_result(workloads::Workload& wl, workloads::Runtime& rt) {
  const uint32_t crc = wl.checksum(rt);
  std::printf("result %s iterations=%u checksum=%08x value=%.17g\n", std::string(wl.name()).c_str(), wl.iteration(),
              crc, wl.value());
  std::fflush(stdout);
}

int run(const Args& args) {
  auto wl = workloads::make_workload(args.name, args.params);
  if (args.native) {
    workloads::NativeRuntime rt;
    wl->setup(rt);
    while (!wl->done()) {
      wl->step(rt);
    }
    print_result(*wl, rt);
    return 0;
  }

  auto session = client::Session::from_env();
  workloads::SessionRuntime rt(*session);
  session->set_save_hook([&] { return wl->save_state(); });
  if (session->restored()) {
    wl->load_state(*session->restored());
    std::printf("resumed %s at iteration %u\n", std::string(wl->name()).c_str(), wl->iteration());
  } else {
    wl->setup(rt);
  }
  while (!wl->done()) {
    wl->step(rt);
    if (args.ckpt_at != 0 && wl->iteration() == args.ckpt_at) {
      auto report = session->checkpoint(args.ckpt_path, ckpt::Strategy::parse(args.strategy));
      if (!report.complete) {
        auto status = session->wait_checkpoint();
        if (status.result != Errc::Ok) {
          throw Error(status.result, status.message);
        }
        report = status.report;
      }
      std::printf("checkpoint iteration=%u pause_ms=%.3f total_ms=%.3f bytes=%llu\n", wl->iteration(),
                  report.pause_s * 1e3, report.total_s * 1e3, static_cast<unsigned long long>(report.image_bytes));
      std::fflush(stdout);
      if (args.stop_after_ckpt) {
        session->abandon();
        return 0;
      }
    }
    if (args.step_delay_ms != 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(args.step_delay_ms));
    }
  }
  print_result(*wl, rt);
  session->close();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crum-workload: bundled UVM workloads"};
  Args args;
  app.add_option("workload", args.name, "dotprod | redundant | tinyker | bigreg | violator")->required();
  app.add_option("--seed", args.params.seed);
  app.add_option("--elements", args.params.elements, "floats per vector (dotprod, redundant)");
  app.add_option("--redundancy", args.params.redundancy, "constant fraction (redundant)")->check(CLI::Range(0.0, 1.0));
  app.add_option("--iters", args.params.iterations);
  app.add_option("--region-mib", args.region_mib, "bytes per region in MiB (bigreg)");
  app.add_option("--region-bytes", args.params.region_bytes, "bytes per region (bigreg)");
  app.add_option("--regions", args.params.regions, "region count (tinyker)");
  app.add_option("--kernels", args.params.kernels, "kernels per iteration (tinyker)");
  app.add_flag("--native", args.native, "run against an in-process device, no proxy");
  app.add_option("--ckpt-at", args.ckpt_at, "checkpoint after this iteration");
  app.add_option("--ckpt-path", args.ckpt_path);
  app.add_option("--strategy", args.strategy);
  app.add_flag("--stop-after-ckpt", args.stop_after_ckpt, "exit without shutting the proxy down after checkpointing");
  app.add_option("--step-delay-ms", args.step_delay_ms);
  CLI11_PARSE(app, argc, argv);
  if (args.region_mib != 0) {
    args.params.region_bytes = args.region_mib << 20;
  }
  if (args.ckpt_at != 0 && args.ckpt_path.empty()) {
    std::fprintf(stderr, "crum-error: InvalidArgument: --ckpt-at needs --ckpt-path\n");
    return 1;
  }
  try {
    return run(args);
  } catch (const Error& e) {
    std::fprintf(stderr, "crum-error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return 1;
  }
}
