// End-to-end acceptance checks. One PASS/FAIL line per criterion; the exit
// code is nonzero if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "crum/bench/bench.hpp"
#include "crum/ckpt/engine.hpp"
#include "crum/ckpt/image.hpp"
#include "crum/cli/launcher.hpp"
#include "crum/client/session.hpp"
#include "crum/device/kernels.hpp"
#include "crum/platform/maps.hpp"
#include "crum/workloads/workloads.hpp"
#include "support/programs.hpp"
#include "support/support.hpp"

using namespace crum;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) {
        detail += "; ";
      }
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) {
      detail += "; ";
    }
    detail += what;
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

cli::ProxyOptions arena(uint64_t bytes) {
  cli::ProxyOptions o;
  o.arena_bytes = bytes;
  return o;
}

template <class Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Ok;
}

ckpt::CkptReport checkpoint_and_wait(client::Session& s, const std::string& path, const ckpt::Strategy& st) {
  auto report = s.checkpoint(path, st);
  if (!report.complete) {
    auto status = s.wait_checkpoint();
    if (status.result != Errc::Ok) {
      throw Error(status.result, status.message);
    }
    report = status.report;
  }
  return report;
}

std::string checksum_in(const std::string& out) {
  static const std::regex re("result \\S+ iterations=\\d+ checksum=([0-9a-f]{8})");
  std::smatch m;
  return std::regex_search(out, m, re) ? m[1].str() : std::string();
}

// 1. Random cycle-respecting programs through the runtime equal the oracle.
Verdict shadow_oracle() {
  Verdict v;
  const auto t0 = Clock::now();
  int mismatches = 0;
  constexpr int kPrograms = 1000;
  for (int batch = 0; batch < kPrograms / 100; ++batch) {
    cli::ProxyProcess proxy(arena(uint64_t{256} << 20));
    auto s = client::Session::open(proxy.shm_name());
    workloads::SessionRuntime rt(*s);
    for (int i = 0; i < 100; ++i) {
      const uint64_t seed = 1000003ULL * (batch * 100 + i + 1);
      const auto program = test::random_program(seed);
      const auto want = test::run_oracle(program);
      const auto got = test::run_program(program, rt);
      if (!(got == want)) {
        if (mismatches++ == 0) {
          v.note(fmt("seed %llu: %s", static_cast<unsigned long long>(seed), test::describe(got, want).c_str()));
        }
      }
    }
    s->close();
  }
  const double t = since(t0);
  v.require(mismatches == 0, fmt("%d of %d programs differ", mismatches, kPrograms));
  v.require(t < 120, fmt("took %.1f s (limit 120)", t));
  v.note(fmt("%d programs, %.1f s", kPrograms, t));
  return v;
}

// Window of 1 doubling up to ceil_pow2(pages), clamped to what is left.
uint64_t window_oracle(uint64_t pages) {
  if (pages <= 8) {
    return 1;
  }
  uint64_t cap = 1;
  while (cap < pages) {
    cap <<= 1;
  }
  uint64_t faults = 0, done = 0, window = 1;
  while (done < pages) {
    ++faults;
    done += std::min(window, pages - done);
    window = std::min(window * 2, cap);
  }
  return faults;
}

// 2. Sequential cold reads and the fault counts they cost.
Verdict fault_counts() {
  Verdict v;
  cli::ProxyProcess proxy(arena(uint64_t{64} << 20));
  auto s = client::Session::open(proxy.shm_name());
  const std::map<uint64_t, uint64_t> bound{{64, 7}, {256, 9}};
  for (auto [pages, limit] : bound) {
    auto* p = static_cast<float*>(s->malloc_managed(pages * 4096));
    s->launch(client::kDefaultStream, "fill", {p}, {device::scalar_f64(2.0)});
    s->synchronize();
    const uint64_t before = s->shadows().stats().read_faults;
    double sum = 0;
    std::atomic_signal_fence(std::memory_order_seq_cst);
    for (uint64_t i = 0; i < pages * 1024; ++i) {
      sum += p[i];
    }
    std::atomic_signal_fence(std::memory_order_seq_cst);
    const uint64_t faults = s->shadows().stats().read_faults - before;
    const uint64_t expected = window_oracle(pages);
    v.require(sum == 2.0 * static_cast<double>(pages * 1024), "wrong values read");
    v.require(faults == expected, fmt("%llu pages: %llu faults, expected %llu", static_cast<unsigned long long>(pages),
                                      static_cast<unsigned long long>(faults),
                                      static_cast<unsigned long long>(expected)));
    v.require(faults <= limit, fmt("%llu pages over bound %llu", static_cast<unsigned long long>(pages),
                                   static_cast<unsigned long long>(limit)));
    v.note(fmt("%llu pages -> %llu faults", static_cast<unsigned long long>(pages),
               static_cast<unsigned long long>(faults)));
  }
  s->close();
  return v;
}

// 3. FORKED pause against NAIVE at 512 MiB, 100 MB/s, synced.
Verdict forked_speedup() {
  Verdict v;
  const auto t0 = Clock::now();
  workloads::Params p;
  p.elements = (uint64_t{512} << 20) / 2 / sizeof(float);
  bench::BenchConfig cfg;
  cfg.throttle_mbps = 100;
  cfg.sync = true;
  auto naive = bench::checkpoint_bench("dotprod", p, ckpt::Strategy::parse("naive"), cfg);
  auto forked = bench::checkpoint_bench("dotprod", p, ckpt::Strategy::parse("forked"), cfg);
  const double t = since(t0);
  v.require(forked.pause_time <= naive.pause_time / 5,
            fmt("forked pause %.3f s > naive %.3f s / 5", forked.pause_time, naive.pause_time));
  v.require(forked.pause_time <= 1.5 * forked.drain_time,
            fmt("forked pause %.3f s > 1.5 x drain %.3f s", forked.pause_time, forked.drain_time));
  v.require(t < 180, fmt("took %.1f s (limit 180)", t));
  v.note(fmt("naive %.3f s, forked %.3f s (%.1fx), drain %.3f s, %.1f s total", naive.pause_time, forked.pause_time,
             naive.pause_time / forked.pause_time, forked.drain_time, t));
  return v;
}

// 4. Sentinel writes after a FORKED checkpoint do not reach the image.
Verdict forked_isolation() {
  Verdict v;
  test::TempDir dir;
  cli::ProxyProcess proxy(arena(uint64_t{128} << 20));
  auto s = client::Session::open(proxy.shm_name());
  std::vector<std::vector<std::byte>> before;
  for (uint64_t bytes : {uint64_t{8} << 20, uint64_t{12345}, uint64_t{3} << 20}) {
    auto* p = static_cast<float*>(s->malloc_managed(bytes));
    workloads::fill_vector({p, bytes / 4}, 0.25, bytes);
  }
  auto* q = s->shadows().regions()[2]->data();
  s->launch(client::kDefaultStream, "saxpy", {s->shadows().regions()[0]->data(), q}, {device::scalar_f64(0.5)});
  s->synchronize();
  for (auto& r : s->shadows().regions()) {
    before.emplace_back(r->data(), r->data() + r->length());
  }
  auto st = ckpt::Strategy::parse("forked");
  st.sync = false;
  st.throttle_mbps = 40;  // keep the child writing while the sentinel lands
  auto report = s->checkpoint(dir.file("iso.img"), st);
  for (auto& r : s->shadows().regions()) {
    std::memset(r->data(), 0xa5, r->length());
  }
  s->synchronize();
  v.require(!report.complete, "child finished before the sentinel was written");
  auto status = s->wait_checkpoint();
  v.require(status.result == Errc::Ok, "checkpoint failed: " + status.message);
  auto image = ckpt::read_image(dir.file("iso.img"));
  v.require(image.payloads.size() == before.size(), "region count differs");
  for (size_t i = 0; i < std::min(before.size(), image.payloads.size()); ++i) {
    v.require(image.payloads[i] == before[i], fmt("region %zu differs from pre-checkpoint bytes", i));
  }
  v.require(static_cast<unsigned char>(before[0][0]) != 0xa5 || static_cast<unsigned char>(before[0][1]) != 0xa5,
            "pre-checkpoint bytes look like the sentinel");
  s->close();
  v.note(fmt("%zu regions compared", before.size()));
  return v;
}

// 5. bigreg checkpointed at every k, restarted, run to the end.
Verdict restart_determinism() {
  Verdict v;
  test::TempDir dir;
  const auto t0 = Clock::now();
  const std::vector<std::string> args{test::bin_path("crum-workload"), "bigreg", "--iters", "20", "--region-mib", "64"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = args;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };
  auto golden = test::run_command(with({"--native"}));
  const auto want = checksum_in(golden.out);
  v.require(golden.code == 0 && !want.empty(), "golden run failed: " + golden.out);
  int good = 0;
  for (int k = 1; k <= 19; ++k) {
    const auto image = dir.file("k" + std::to_string(k));
    std::vector<std::string> first{test::bin_path("crum"), "run", "--quiet"};
    for (auto& a : with({"--ckpt-at", std::to_string(k), "--ckpt-path", image, "--strategy", k % 2 ? "forked" : "lz4",
                         "--stop-after-ckpt"})) {
      first.push_back(a);
    }
    auto r1 = test::run_command(first);
    std::vector<std::string> second{test::bin_path("crum"), "restart", "--quiet", image};
    second.insert(second.end(), args.begin(), args.end());
    auto r2 = r1.code == 0 ? test::run_command(second) : test::CommandResult{};
    const auto got = checksum_in(r2.out);
    if (r1.code == 0 && r2.code == 0 && got == want) {
      ++good;
    } else {
      v.require(false, fmt("k=%d: checksum '%s' vs '%s' (exit %d/%d)", k, got.c_str(), want.c_str(), r1.code, r2.code));
    }
    std::filesystem::remove(image);
  }
  v.note(fmt("%d/19 restarts match golden %s, %.1f s", good, want.c_str(), since(t0)));
  return v;
}

struct ReplayFixture {
  std::string path;
  std::string dump;
};

void build_state(client::Session& s) {
  auto* a = static_cast<float*>(s.malloc_managed(10000));
  auto* gone = s.malloc_managed(3 * 4096);
  auto* b = static_cast<float*>(s.malloc_managed(40 * 4096));
  auto d = s.malloc_device(7000);
  auto st = s.stream_create();
  auto ev = s.event_create();
  s.free_managed(gone);
  auto st2 = s.stream_create();
  s.stream_destroy(st2);
  s.launch(st, "fill", {a}, {device::scalar_f64(1.5)});
  s.launch(st, "fill", {b}, {device::scalar_f64(-2)});
  s.launch(st, "saxpy", {a, b}, {device::scalar_f64(3)});
  s.event_record(ev, st);
  std::vector<std::byte> bytes(7000);
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = test::pattern_byte(9, i);
  }
  s.memcpy_h2d(d, 0, bytes);
  s.synchronize();
}

// 6. Replay reproduces every recorded result; a perturbed record is caught.
Verdict replay_determinism() {
  Verdict v;
  test::TempDir dir;
  const auto path = dir.file("replay.img");
  std::string dump;
  {
    cli::ProxyProcess proxy(arena(uint64_t{64} << 20));
    auto s = client::Session::open(proxy.shm_name());
    build_state(*s);
    dump = s->dump_proxy_state();
    auto st = ckpt::Strategy::parse("naive");
    st.sync = false;
    checkpoint_and_wait(*s, path, st);
    s->close();
  }
  const auto good = ckpt::read_image(path);
  auto attempt = [&](const ckpt::ImageContents& c, std::string* after) {
    std::vector<std::span<const std::byte>> payloads(c.payloads.begin(), c.payloads.end());
    ckpt::ImageInput in{c.codec, 1, c.meta, c.replay, c.regions, payloads, c.app_state};
    ckpt::write_image(path, in, ckpt::WriteOptions{false, 0});
    cli::ProxyProcess proxy(arena(uint64_t{64} << 20));
    auto s = client::Session::open(proxy.shm_name());
    const Errc rc = code_of([&] { ckpt::restore(*s, path); });
    if (rc == Errc::Ok && after != nullptr) {
      *after = s->dump_proxy_state();
    }
    s->abandon();
    return rc;
  };
  std::string restored;
  v.require(attempt(good, &restored) == Errc::Ok, "clean restore failed");
  v.require(restored == dump, "restored proxy state differs");

  int mutations = 0, caught = 0;
  for (size_t i = 0; i < good.replay.size(); ++i) {
    const auto op = static_cast<ipc::Opcode>(good.replay[i].opcode);
    std::vector<std::function<void(client::ReplayRecord&)>> edits;
    if (op == ipc::Opcode::DeviceAlloc || op == ipc::Opcode::StreamCreate || op == ipc::Opcode::EventCreate) {
      edits.push_back([](client::ReplayRecord& r) { r.result += 1; });
    }
    if (op == ipc::Opcode::DeviceAlloc) {
      edits.push_back([](client::ReplayRecord& r) { r.offset += 4096; });
    }
    if (op == ipc::Opcode::DeviceAlloc && good.replay[i].shadow != 0) {
      edits.push_back([](client::ReplayRecord& r) { r.shadow += 4096; });
    }
    for (auto& edit : edits) {
      auto bad = good;
      edit(bad.replay[i]);
      ++mutations;
      const Errc rc = attempt(bad, nullptr);
      if (rc == Errc::ReplayDivergence) {
        ++caught;
      } else {
        v.require(false, fmt("record %zu mutation gave %s", i, std::string(errc_name(rc)).c_str()));
      }
    }
  }
  v.require(mutations > 0, "no mutations tried");
  v.note(fmt("%zu records replayed, %d/%d mutations -> ReplayDivergence", good.replay.size(), caught, mutations));
  return v;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return xs[xs.size() / 2];
}

// 7. Codec effect on image size, and on the FORKED pause (none).
Verdict compression() {
  Verdict v;
  workloads::Params redundant;
  redundant.elements = (uint64_t{64} << 20) / 2 / sizeof(float);
  redundant.redundancy = 0.5;
  workloads::Params random = redundant;
  random.redundancy = 0;
  bench::BenchConfig cfg;
  cfg.sync = false;
  auto gz_red = bench::checkpoint_bench("redundant", redundant, ckpt::Strategy::parse("gzip"), cfg);
  auto gz_rnd = bench::checkpoint_bench("dotprod", random, ckpt::Strategy::parse("gzip"), cfg);
  const double r_red = static_cast<double>(gz_red.image_bytes) / static_cast<double>(gz_red.payload_bytes);
  const double r_rnd = static_cast<double>(gz_rnd.image_bytes) / static_cast<double>(gz_rnd.payload_bytes);
  v.require(r_red <= 0.6, fmt("redundant image %.3f x raw > 0.6", r_red));
  v.require(r_rnd >= 0.95, fmt("random image %.3f x raw < 0.95", r_rnd));

  std::vector<double> pauses;
  std::string line;
  for (ckpt::Codec c : {ckpt::Codec::Raw, ckpt::Codec::Deflate, ckpt::Codec::Lz4}) {
    auto st = ckpt::Strategy::parse("forked");
    st.codec = c;
    std::vector<double> runs;
    for (int i = 0; i < 3; ++i) {
      runs.push_back(bench::checkpoint_bench("redundant", redundant, st, cfg).pause_time);
    }
    pauses.push_back(median(runs));
    line += fmt(" %s=%.3f", std::string(ckpt::codec_name(c)).c_str(), pauses.back());
  }
  const double ref = pauses[0];
  for (double p : pauses) {
    v.require(std::fabs(p - ref) <= 0.2 * ref, fmt("forked pause %.3f s vs raw %.3f s outside 20%%", p, ref));
  }
  v.note(fmt("gzip redundant %.3f x, random %.3f x; forked pause s:%s", r_red, r_rnd, line.c_str()));
  return v;
}

// 8. Pipelined launches: cheap enqueue, and depth pays off end to end.
Verdict pipelining() {
  Verdict v;
  auto d64 = bench::pipeline_bench(64, 100000, 20);
  auto d1 = bench::pipeline_bench(1, 100000, 20);
  v.require(d64.enqueue_mean_us < d64.round_trip_us / 4,
            fmt("enqueue %.3f us not < round trip %.3f us / 4", d64.enqueue_mean_us, d64.round_trip_us));
  const double ratio = d64.throughput / d1.throughput;
  v.require(ratio >= 2, fmt("depth 64/1 throughput ratio %.2f < 2", ratio));
  v.note(fmt("depth 64: enqueue %.3f us, round trip %.3f us, %.0f launches/s; depth 1: %.0f launches/s; ratio %.2f",
             d64.enqueue_mean_us, d64.round_trip_us, d64.throughput, d1.throughput, ratio));
  return v;
}

// 9. Verified mode flags the violator and nothing else.
Verdict verified_mode() {
  Verdict v;
  const auto crum = test::bin_path("crum");
  const auto wl = test::bin_path("crum-workload");
  auto bad = test::run_command({crum, "run", "--quiet", "--mode", "verified", wl, "violator", "--iters", "3"});
  v.require(bad.code != 0 && bad.out.find("crum-error: CycleViolation") != std::string::npos,
            "violator not flagged: " + bad.out);
  auto relaxed = test::run_command({crum, "run", "--quiet", wl, "violator", "--iters", "3"});
  v.require(relaxed.code == 0 && relaxed.out.find("crum-error") == std::string::npos,
            "violator failed in normal mode: " + relaxed.out);
  const std::vector<std::vector<std::string>> bundled{
      {"dotprod", "--elements", "4194304", "--iters", "4"},
      {"redundant", "--elements", "4194304", "--redundancy", "0.5", "--iters", "4"},
      {"tinyker", "--iters", "5"},
      {"bigreg", "--region-mib", "8", "--iters", "5"},
  };
  for (const auto& w : bundled) {
    std::vector<std::string> native{wl};
    native.insert(native.end(), w.begin(), w.end());
    native.push_back("--native");
    std::vector<std::string> run{crum, "run", "--quiet", "--mode", "verified", wl};
    run.insert(run.end(), w.begin(), w.end());
    auto want = test::run_command(native);
    auto got = test::run_command(run);
    v.require(got.code == 0 && !checksum_in(got.out).empty() && checksum_in(got.out) == checksum_in(want.out),
              w[0] + " under verified mode: " + got.out);
  }
  v.note("violator flagged, 4 bundled workloads clean");
  return v;
}

// 10. The arena never appears in the application's map; the proxy only
// answers.
Verdict isolation() {
  Verdict v;
  cli::ProxyProcess proxy(arena(uint64_t{256} << 20));
  std::atomic<bool> done{false};
  std::atomic<int> scans{0}, hits{0};
  {
    auto s = client::Session::open(proxy.shm_name());
    std::thread watcher([&] {
      while (!done) {
        if (platform::maps_contain(platform::read_maps(), "crum-arena")) {
          ++hits;
        }
        ++scans;
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    });
    workloads::SessionRuntime rt(*s);
    workloads::Params p;
    p.elements = uint64_t{16} << 20;
    p.iterations = 5;
    auto wl = workloads::make_workload("dotprod", p);
    wl->setup(rt);
    while (!wl->done()) {
      wl->step(rt);
      if (platform::maps_contain(platform::read_maps(), "crum-arena")) {
        ++hits;
      }
    }
    wl->checksum(rt);
    done = true;
    watcher.join();
    v.require(platform::maps_contain(platform::read_maps(proxy.pid()), "crum-arena"),
              "arena not found in the proxy's map");
    s->close();
  }
  const int code = proxy.wait();
  v.require(hits == 0, fmt("arena seen %d times", hits.load()));
  v.require(code == 0, fmt("proxy exit %d", code));
  auto& stats = proxy.header().stats;
  uint64_t blocking = 0;
  for (const auto& info : ipc::kOpcodes) {
    if (info.blocking) {
      blocking += stats.per_opcode[static_cast<uint16_t>(info.opcode)].load();
    }
  }
  v.require(stats.requests.load() == stats.completions.load(),
            fmt("requests %llu != completions %llu", static_cast<unsigned long long>(stats.requests.load()),
                static_cast<unsigned long long>(stats.completions.load())));
  v.require(stats.replies.load() == blocking, "replies differ from blocking requests");
  v.note(fmt("%d map scans; %llu requests, %llu completions, %llu replies to %llu blocking calls", scans.load(),
             static_cast<unsigned long long>(stats.requests.load()),
             static_cast<unsigned long long>(stats.completions.load()),
             static_cast<unsigned long long>(stats.replies.load()), static_cast<unsigned long long>(blocking)));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Verdict (*)()>> criteria{
      {"shadow-sync oracle equivalence", shadow_oracle},
      {"fault-count bound", fault_counts},
      {"forked checkpoint speedup", forked_speedup},
      {"forked isolation", forked_isolation},
      {"round-trip restart determinism", restart_determinism},
      {"replay determinism", replay_determinism},
      {"compression behaviour", compression},
      {"pipelining", pipelining},
      {"verified execution mode", verified_mode},
      {"isolation and passivity", isolation},
  };
  // Optional argument: run only the listed criterion numbers.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) {
    only.push_back(std::atoi(argv[i]));
  }
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) {
      continue;
    }
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    failed += v.pass ? 0 : 1;
    std::printf("criterion %2d %-32s %s  %s\n", n, criteria[i].first, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
