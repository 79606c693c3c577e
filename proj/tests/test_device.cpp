#include <gtest/gtest.h>

#include <chrono>
#include <cstring>
#include <random>

#include "crum/device/device_state.hpp"
#include "crum/device/kernels.hpp"
#include "crum/error.hpp"
#include "crum/platform/maps.hpp"

using namespace crum;
using namespace crum::device;

namespace {

DeviceConfig small_config() { return DeviceConfig{uint64_t{16} << 20, 4096}; }

std::span<float> floats(DeviceState& d, RegionId id) {
  auto bytes = d.region_bytes(id);
  return {reinterpret_cast<float*>(bytes.data()), bytes.size() / sizeof(float)};
}

KernelTask task(std::string name, std::vector<RegionId> regions, std::vector<uint64_t> scalars = {},
                Grid grid = {}) {
  return KernelTask{std::move(name), std::move(regions), std::move(scalars), grid};
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

TEST(Device, DriverIsNonReentrant) {
  DriverContext ctx;
  {
    auto d = DeviceState::init(ctx, small_config());
    EXPECT_TRUE(d.initialized());
    EXPECT_EQ(code_of([&] { DeviceState::init(ctx, small_config()); }), Errc::AlreadyInitialized);
  }
  // Still refused once the first device is gone.
  EXPECT_EQ(code_of([&] { DeviceState::init(ctx, small_config()); }), Errc::AlreadyInitialized);
  DriverContext other;
  EXPECT_NO_THROW(DeviceState::init(other, small_config()));
}

TEST(Device, AllocationsArePageAlignedAndBounded) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, DeviceConfig{1 << 20, 4096});
  auto a = d.alloc(RegionKind::Managed, 100);
  auto b = d.alloc(RegionKind::Device, 4097);
  EXPECT_EQ(a.offset, 0u);
  EXPECT_EQ(a.length, 100u);
  EXPECT_EQ(b.offset, 4096u);
  EXPECT_EQ(d.alloc_cursor(), 3u * 4096);
  EXPECT_NE(a.id, b.id);
  EXPECT_EQ(code_of([&] { d.alloc(RegionKind::Managed, 0); }), Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { d.alloc(RegionKind::Managed, 1 << 20); }), Errc::OutOfArena);
  EXPECT_EQ(code_of([&] { d.alloc(RegionKind::Managed, ~uint64_t{0}); }), Errc::OutOfArena);
  d.free(a.id);
  EXPECT_EQ(code_of([&] { d.free(a.id); }), Errc::UnknownRegion);
  EXPECT_EQ(code_of([&] { d.region_bytes(a.id); }), Errc::UnknownRegion);
  // Freed space is not reused: allocation is a pure function of the call history.
  auto c = d.alloc(RegionKind::Managed, 10);
  EXPECT_EQ(c.offset, 3u * 4096);
}

TEST(Device, FreshRegionsAreZero) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  auto a = d.alloc(RegionKind::Managed, 3 * 4096);
  for (float f : floats(d, a.id)) {
    ASSERT_EQ(f, 0.0f);
  }
}

// The same call sequence on two fresh devices yields identical tables.
TEST(DeviceProperty, ReplayDeterminism) {
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    auto run = [seed](DriverContext& ctx) {
      auto d = DeviceState::init(ctx, small_config());
      std::mt19937_64 rng(seed);
      std::vector<RegionId> live;
      std::vector<StreamId> streams;
      for (int i = 0; i < 60; ++i) {
        switch (rng() % 5) {
          case 0:
          case 1:
            live.push_back(d.alloc(rng() % 2 ? RegionKind::Managed : RegionKind::Device, 1 + rng() % 40000).id);
            break;
          case 2:
            if (!live.empty()) {
              const size_t k = rng() % live.size();
              d.free(live[k]);
              live.erase(live.begin() + static_cast<ptrdiff_t>(k));
            }
            break;
          case 3:
            streams.push_back(d.stream_create());
            break;
          case 4:
            d.event_create();
            break;
        }
      }
      return std::make_tuple(d.allocations(), d.streams(), d.events(), d.alloc_cursor());
    };
    DriverContext c1, c2;
    ASSERT_EQ(run(c1), run(c2)) << "seed " << seed;
  }
}

TEST(DeviceProperty, KernelPurity) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    DriverContext c1, c2;
    auto d1 = DeviceState::init(c1, small_config());
    auto d2 = DeviceState::init(c2, small_config());
    const uint64_t len = 4 * (1 + rng() % 5000);
    auto x1 = d1.alloc(RegionKind::Managed, len), y1 = d1.alloc(RegionKind::Managed, len);
    auto x2 = d2.alloc(RegionKind::Managed, len), y2 = d2.alloc(RegionKind::Managed, len);
    for (size_t i = 0; i < len / 4; ++i) {
      const float v = static_cast<float>(rng() % 100000) / 7.0f;
      floats(d1, x1.id)[i] = floats(d2, x2.id)[i] = v;
      floats(d1, y1.id)[i] = floats(d2, y2.id)[i] = v * 0.5f;
    }
    const double alpha = static_cast<double>(rng() % 1000) / 64.0;
    // Different grid shapes: the result must not depend on decomposition.
    d1.launch_kernel(kDefaultStream, task("saxpy", {x1.id, y1.id}, {scalar_f64(alpha)}, {1, 1}));
    d1.launch_kernel(kDefaultStream, task("stencil3", {y1.id, x1.id}, {}, {3, 64}));
    d2.launch_kernel(kDefaultStream, task("saxpy", {x2.id, y2.id}, {scalar_f64(alpha)}, {17, 32}));
    d2.launch_kernel(kDefaultStream, task("stencil3", {y2.id, x2.id}, {}, {1, 1}));
    d1.synchronize();
    d2.synchronize();
    ASSERT_EQ(0, std::memcmp(d1.region_bytes(y1.id).data(), d2.region_bytes(y2.id).data(), len));
    ASSERT_EQ(0, std::memcmp(d1.region_bytes(x1.id).data(), d2.region_bytes(x2.id).data(), len));
  }
}

// Each stream's tasks take effect in submission order: compare against a
// sequential interpreter running every stream's list on its own regions.
TEST(DeviceProperty, FifoPerStream) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    DriverContext ctx;
    auto d = DeviceState::init(ctx, small_config());
    const int nstreams = 1 + static_cast<int>(rng() % 4);
    const size_t n = 256;
    std::vector<StreamId> streams{kDefaultStream};
    for (int s = 1; s < nstreams; ++s) {
      streams.push_back(d.stream_create());
    }
    std::vector<std::pair<RegionId, RegionId>> regions;
    std::vector<std::pair<std::vector<float>, std::vector<float>>> oracle;
    for (int s = 0; s < nstreams; ++s) {
      regions.emplace_back(d.alloc(RegionKind::Managed, n * 4).id, d.alloc(RegionKind::Managed, n * 4).id);
      oracle.emplace_back(std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f));
    }
    for (int i = 0; i < 40; ++i) {
      const size_t s = rng() % static_cast<size_t>(nstreams);
      auto [a, b] = regions[s];
      auto& [oa, ob] = oracle[s];
      const float v = static_cast<float>(rng() % 64);
      switch (rng() % 3) {
        case 0:
          d.launch_kernel(streams[s], task("fill", {a}, {scalar_f64(v)}));
          std::fill(oa.begin(), oa.end(), v);
          break;
        case 1:
          d.launch_kernel(streams[s], task("saxpy", {a, b}, {scalar_f64(0.5)}));
          for (size_t k = 0; k < n; ++k) {
            ob[k] = 0.5f * oa[k] + ob[k];
          }
          break;
        case 2:
          d.launch_kernel(streams[s], task("saxpy", {b, a}, {scalar_f64(-1.0)}));
          for (size_t k = 0; k < n; ++k) {
            oa[k] = -1.0f * ob[k] + oa[k];
          }
          break;
      }
    }
    // Deferred until synchronize.
    EXPECT_GT(d.pending_tasks(), 0u);
    d.synchronize();
    EXPECT_EQ(d.pending_tasks(), 0u);
    for (int s = 0; s < nstreams; ++s) {
      auto fa = floats(d, regions[s].first);
      auto fb = floats(d, regions[s].second);
      ASSERT_TRUE(std::equal(fa.begin(), fa.end(), oracle[s].first.begin())) << "trial " << trial;
      ASSERT_TRUE(std::equal(fb.begin(), fb.end(), oracle[s].second.begin())) << "trial " << trial;
    }
  }
}

TEST(Device, KernelsMatchHostReference) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  const size_t n = 1000;
  auto a = d.alloc(RegionKind::Managed, n * 4);
  auto b = d.alloc(RegionKind::Managed, n * 4);
  auto out = d.alloc(RegionKind::Device, 8);
  double expect = 0;
  for (size_t i = 0; i < n; ++i) {
    floats(d, a.id)[i] = static_cast<float>(i) * 0.25f;
    floats(d, b.id)[i] = 3.0f - static_cast<float>(i % 7);
    expect += static_cast<double>(floats(d, a.id)[i]) * floats(d, b.id)[i];
  }
  d.launch_kernel(kDefaultStream, task("dot", {a.id, b.id, out.id}, {}, {4, 64}));
  d.synchronize();
  double got = 0;
  std::memcpy(&got, d.region_bytes(out.id).data(), 8);
  EXPECT_EQ(got, expect);

  d.launch_kernel(kDefaultStream, task("fill", {a.id}, {scalar_f64(2.5)}, {3, 1}));
  d.synchronize();
  for (float f : floats(d, a.id)) {
    ASSERT_EQ(f, 2.5f);
  }
}

TEST(Device, LaunchValidation) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  auto a = d.alloc(RegionKind::Managed, 64);
  EXPECT_EQ(code_of([&] { d.launch_kernel(kDefaultStream, task("nope", {a.id})); }), Errc::UnknownKernel);
  EXPECT_EQ(code_of([&] { d.launch_kernel(kDefaultStream, task("fill", {a.id})); }), Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { d.launch_kernel(kDefaultStream, task("fill", {a.id}, {0}, {0, 1})); }),
            Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { d.launch_kernel(kDefaultStream, task("fill", {RegionId{99}}, {0})); }),
            Errc::UnknownRegion);
  EXPECT_EQ(code_of([&] { d.launch_kernel(StreamId{42}, task("fill", {a.id}, {0})); }), Errc::UnknownStream);
  EXPECT_EQ(d.pending_tasks(), 0u);
}

TEST(Device, SynchronizeReportsFirstFailureAndDrainsEverything) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  auto a = d.alloc(RegionKind::Managed, 64);
  auto tiny = d.alloc(RegionKind::Device, 4);
  auto s = d.stream_create();
  d.launch_kernel(s, task("fill", {a.id}, {scalar_f64(1)}));
  d.launch_kernel(s, task("dot", {a.id, a.id, tiny.id}));
  d.launch_kernel(s, task("fill", {a.id}, {scalar_f64(9)}));
  try {
    d.synchronize();
    FAIL() << "expected a kernel failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::RangeOutOfBounds);
    EXPECT_NE(std::string(e.what()).find("stream " + std::to_string(s.value) + " task 1"), std::string::npos)
        << e.what();
  }
  EXPECT_EQ(d.pending_tasks(), 0u);
  EXPECT_EQ(floats(d, a.id)[0], 9.0f);
  EXPECT_NO_THROW(d.synchronize());
}

TEST(Device, EventsCompleteAtSynchronize) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  auto e = d.event_create();
  EXPECT_EQ(d.event_query(e).recorded, false);
  d.event_record(e, kDefaultStream);
  EXPECT_TRUE(d.event_query(e).recorded);
  EXPECT_FALSE(d.event_query(e).complete);
  d.synchronize();
  EXPECT_TRUE(d.event_query(e).complete);
  EXPECT_EQ(code_of([&] { d.event_query(EventId{77}); }), Errc::UnknownEvent);
  EXPECT_EQ(code_of([&] { d.event_record(EventId{77}, kDefaultStream); }), Errc::UnknownEvent);
}

TEST(Device, StreamLifecycle) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  EXPECT_EQ(code_of([&] { d.stream_destroy(kDefaultStream); }), Errc::InvalidArgument);
  auto a = d.alloc(RegionKind::Managed, 64);
  auto s = d.stream_create();
  d.launch_kernel(s, task("fill", {a.id}, {scalar_f64(4)}));
  d.stream_destroy(s);
  EXPECT_EQ(code_of([&] { d.launch_kernel(s, task("fill", {a.id}, {0})); }), Errc::UnknownStream);
  // Work queued before the destroy still runs.
  d.synchronize();
  EXPECT_EQ(floats(d, a.id)[3], 4.0f);
  EXPECT_EQ(d.streams(), std::vector<StreamId>{kDefaultStream});
}

TEST(Device, SleepKernelTakesItsTime) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  for (int i = 0; i < 50; ++i) {
    d.launch_kernel(kDefaultStream, task("sleep_us", {}, {20}));
  }
  const auto t0 = std::chrono::steady_clock::now();
  d.synchronize();
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::microseconds(1000));
}

TEST(Device, ArenaIsNamedInTheMemoryMap) {
  DriverContext ctx;
  auto d = DeviceState::init(ctx, small_config());
  EXPECT_TRUE(platform::maps_contain(platform::read_maps(), "crum-arena"));
  auto m = platform::mapping_at(platform::read_maps(), reinterpret_cast<uintptr_t>(d.arena_base()));
  ASSERT_TRUE(m.has_value());
  EXPECT_NE(m->path.find("crum-arena"), std::string::npos);
}
