#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>

#include "crum/cli/launcher.hpp"
#include "crum/client/session.hpp"
#include "crum/workloads/workloads.hpp"

using namespace crum;
using namespace crum::workloads;

namespace {

Params small(const std::string& name) {
  Params p;
  p.seed = 11;
  p.elements = 1 << 16;
  p.redundancy = name == "redundant" ? 0.5 : 0;
  p.region_bytes = 256 << 10;
  p.iterations = name == "tinyker" ? 3 : 4;
  return p;
}

uint32_t run_to_end(Workload& wl, Runtime& rt) {
  wl.setup(rt);
  while (!wl.done()) {
    wl.step(rt);
  }
  return wl.checksum(rt);
}

}  // namespace

TEST(Workloads, RuntimeMatchesNative) {
  cli::ProxyProcess proxy;
  auto s = client::Session::open(proxy.shm_name());
  SessionRuntime remote(*s);
  for (const char* name : {"dotprod", "redundant", "tinyker", "bigreg"}) {
    NativeRuntime native;
    auto a = make_workload(name, small(name));
    auto b = make_workload(name, small(name));
    const uint32_t want = run_to_end(*a, native);
    EXPECT_EQ(run_to_end(*b, remote), want) << name;
    EXPECT_EQ(std::bit_cast<uint64_t>(a->value()), std::bit_cast<uint64_t>(b->value())) << name;
    for (auto& [p, len] : b->regions()) {
      remote.free_managed(p);
    }
  }
  s->close();
}

TEST(Workloads, DotProductAgreesWithAHostSum) {
  NativeRuntime rt;
  Params p = small("redundant");
  p.iterations = 1;
  auto wl = make_workload("redundant", p);
  run_to_end(*wl, rt);
  std::vector<float> x(p.elements), y(p.elements);
  fill_vector(x, p.redundancy, p.seed);
  fill_vector(y, p.redundancy, p.seed ^ 0x5bd1e995ULL);
  ASSERT_EQ(wl->regions().size(), 3u);
  ASSERT_EQ(0, std::memcmp(wl->regions()[0].first, x.data(), x.size() * 4));
  double sum = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sum += static_cast<double>(x[i]) * y[i];
  }
  EXPECT_EQ(wl->value(), sum);
}

TEST(Workloads, FillVectorHonoursRedundancy) {
  std::vector<float> v(1 << 14);
  fill_vector(v, 0.25, 3);
  size_t ones = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i % 1024 < 256) {
      ASSERT_EQ(v[i], 1.0f);
      ++ones;
    }
    ASSERT_TRUE(std::isfinite(v[i]));
  }
  EXPECT_EQ(ones, v.size() / 4);
  uint64_t st = 5;
  for (int i = 0; i < 10000; ++i) {
    const float u = random_unit(st);
    ASSERT_GE(u, 0.0f);
    ASSERT_LT(u, 1.0f);
    ASSERT_TRUE(std::isfinite(random_float_bits(st)));
  }
}

TEST(Workloads, StateBlobRoundTrips) {
  NativeRuntime rt;
  auto a = make_workload("bigreg", small("bigreg"));
  a->setup(rt);
  a->step(rt);
  a->step(rt);
  auto blob = a->save_state();
  auto b = make_workload("bigreg", small("bigreg"));
  b->load_state(blob);
  EXPECT_EQ(b->iteration(), 2u);
  EXPECT_EQ(b->regions(), a->regions());
  EXPECT_EQ(b->save_state(), blob);
  blob.pop_back();
  EXPECT_THROW(b->load_state(blob), Error);
}

TEST(Workloads, UnknownNamesAreRejected) {
  try {
    make_workload("nosuch", {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidArgument);
  }
  EXPECT_EQ(workload_names().size(), 5u);
}
