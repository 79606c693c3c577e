#include <gtest/gtest.h>

#include <cstring>
#include <thread>

#include "crum/cli/launcher.hpp"
#include "crum/client/session.hpp"
#include "crum/device/kernels.hpp"
#include "crum/workloads/runtime.hpp"
#include "support/programs.hpp"

using namespace crum;
using client::Session;

namespace {

cli::ProxyOptions options() {
  cli::ProxyOptions o;
  o.arena_bytes = uint64_t{256} << 20;
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

}  // namespace

TEST(Client, MissingProxy) {
  EXPECT_EQ(code_of([] { Session::open("/crum-nobody-" + cli::new_session_id()); }), Errc::NoProxy);
}

TEST(Client, OneSessionPerProcess) {
  cli::ProxyProcess p1(options());
  cli::ProxyProcess p2(options());
  auto s = Session::open(p1.shm_name());
  EXPECT_EQ(code_of([&] { Session::open(p2.shm_name()); }), Errc::InvalidState);
  s->close();
}

TEST(Client, CallsFromAnotherThreadAreRefused) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  Errc seen = Errc::Ok;
  std::thread([&] { seen = code_of([&] { s->malloc_managed(64); }); }).join();
  EXPECT_EQ(seen, Errc::WrongThread);
  EXPECT_NO_THROW(s->malloc_managed(64));
  s->close();
}

TEST(Client, ClosedSessionRejectsCalls) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  s->close();
  EXPECT_EQ(s->state(), client::SessionState::Detached);
  EXPECT_EQ(code_of([&] { s->malloc_managed(64); }), Errc::InvalidState);
  EXPECT_EQ(code_of([&] { s->synchronize(); }), Errc::InvalidState);
  EXPECT_EQ(proxy.wait(), 0);
}

TEST(Client, StateCreatingCallsAreLogged) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  void* m = s->malloc_managed(5000);
  auto d = s->malloc_device(100);
  auto st = s->stream_create();
  auto ev = s->event_create();
  s->free_device(d);
  s->stream_destroy(st);
  m = s->malloc_managed(10);
  (void)ev;
  const auto& log = s->replay_log().records();
  ASSERT_EQ(log.size(), 7u);
  using ipc::Opcode;
  EXPECT_EQ(log[0].opcode, static_cast<uint16_t>(Opcode::DeviceAlloc));
  EXPECT_EQ(log[0].kind, static_cast<uint8_t>(device::RegionKind::Managed));
  EXPECT_EQ(log[0].arg, 5000u);
  EXPECT_EQ(log[0].offset, 0u);
  EXPECT_EQ(log[0].shadow, s->shadows().config().base);
  EXPECT_EQ(log[1].kind, static_cast<uint8_t>(device::RegionKind::Device));
  EXPECT_EQ(log[1].result, d.value);
  EXPECT_EQ(log[1].offset, 8192u);
  EXPECT_EQ(log[1].shadow, 0u);
  EXPECT_EQ(log[2].opcode, static_cast<uint16_t>(Opcode::StreamCreate));
  EXPECT_EQ(log[3].opcode, static_cast<uint16_t>(Opcode::EventCreate));
  EXPECT_EQ(log[4].opcode, static_cast<uint16_t>(Opcode::DeviceFree));
  EXPECT_EQ(log[4].arg, d.value);
  EXPECT_EQ(log[5].opcode, static_cast<uint16_t>(Opcode::StreamDestroy));
  EXPECT_EQ(log[6].shadow, reinterpret_cast<uint64_t>(m));
  // Data movement is not logged.
  static_cast<float*>(m)[0] = 1;
  s->synchronize();
  s->nop(3);
  EXPECT_EQ(s->replay_log().size(), 7u);
  s->close();
}

TEST(Client, PipelinedFailureSurfacesAtNextSynchronize) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  auto* m = static_cast<float*>(s->malloc_managed(4096));
  s->launch(client::kDefaultStream, "fill", {m}, {device::scalar_f64(1)});
  s->launch(client::kDefaultStream, "no_such_kernel", {m}, {});
  try {
    s->synchronize();
    FAIL();
  } catch (const DeferredCallError& e) {
    EXPECT_EQ(e.opcode(), static_cast<uint16_t>(ipc::Opcode::LaunchKernel));
    EXPECT_EQ(e.status(), Errc::UnknownKernel);
  }
  s->synchronize();
  EXPECT_EQ(m[100], 1.0f);
  EXPECT_EQ(code_of([&] { s->launch(client::kDefaultStream, "fill", {m + 4096}, {0}); }), Errc::UnknownRegion);
  s->close();
}

TEST(Client, NopValuesArriveInOrder) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  uint64_t sum = 0;
  for (uint64_t i = 0; i < 5000; ++i) {
    s->nop(i);
    sum += i;
  }
  s->ping();
  EXPECT_EQ(s->header().stats.nop_count.load(), 5000u);
  EXPECT_EQ(s->header().stats.nop_sum.load(), sum);
  s->close();
}

TEST(Client, FreedManagedMemoryIsUnmappedFromTheTable) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  void* m = s->malloc_managed(3 * 4096);
  EXPECT_NE(s->shadows().find(reinterpret_cast<uintptr_t>(m)), nullptr);
  s->free_managed(m);
  EXPECT_EQ(s->shadows().find(reinterpret_cast<uintptr_t>(m)), nullptr);
  EXPECT_EQ(code_of([&] { s->free_managed(m); }), Errc::UnknownRegion);
  s->close();
}

TEST(Client, DeviceMemcpyRoundTrip) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  auto d = s->malloc_device(1 << 20);
  std::vector<std::byte> in(1 << 20), out(1 << 20);
  for (size_t i = 0; i < in.size(); ++i) {
    in[i] = static_cast<std::byte>(i * 13);
  }
  s->memcpy_h2d(d, 0, in);
  s->memcpy_d2h(std::span(out).subspan(100, 1000), d, 100);
  EXPECT_EQ(0, std::memcmp(out.data() + 100, in.data() + 100, 1000));
  s->close();
}

TEST(Client, SaveHookFeedsAppState) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  s->set_save_hook([] { return std::vector<std::byte>{std::byte{1}, std::byte{2}}; });
  EXPECT_EQ(s->save_app_state(), (std::vector<std::byte>{std::byte{1}, std::byte{2}}));
  std::vector<std::byte> got;
  s->deliver_app_state({std::byte{7}});
  s->set_resume_hook([&](std::span<const std::byte> b) { got.assign(b.begin(), b.end()); });
  EXPECT_EQ(got, std::vector<std::byte>{std::byte{7}});
  s->close();
}

// Host reads and final region contents match direct execution on host arrays.
TEST(ClientProperty, OracleEquivalence) {
  for (bool verified : {false, true}) {
    cli::ProxyProcess proxy(options());
    client::SessionOptions so;
    so.shadow.verified = verified;
    auto s = Session::open(proxy.shm_name(), so);
    workloads::SessionRuntime rt(*s);
    for (uint64_t seed = 1; seed <= 150; ++seed) {
      auto program = test::random_program(seed * 7919 + (verified ? 1 : 0));
      auto want = test::run_oracle(program);
      auto got = test::run_program(program, rt);
      ASSERT_EQ(got, want) << "seed " << seed << (verified ? " verified" : "") << ": " << test::describe(got, want);
      ASSERT_TRUE(s->shadows().audit().empty());
    }
    EXPECT_FALSE(s->shadows().violation().has_value());
    s->close();
    EXPECT_EQ(proxy.wait(), 0);
  }
}

TEST(Client, VerifiedModeSurfacesViolationAtNextCall) {
  cli::ProxyProcess proxy(options());
  client::SessionOptions so;
  so.shadow.verified = true;
  auto s = Session::open(proxy.shm_name(), so);
  auto* p = static_cast<float*>(s->malloc_managed(16 * 4096));
  s->synchronize();
  p[0] = 1;
  volatile float v = p[4 * 1024];
  (void)v;
  EXPECT_EQ(code_of([&] { s->synchronize(); }), Errc::CycleViolation);
  s->close();
}
