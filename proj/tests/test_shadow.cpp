#include <gtest/gtest.h>

#include <atomic>
#include <cstring>
#include <random>
#include <set>

#include "crum/platform/maps.hpp"
#include "crum/shadow/shadow.hpp"
#include "support/support.hpp"

using namespace crum;
using namespace crum::shadow;

namespace {

constexpr uint64_t kPage = 4096;

ShadowConfig config(bool verified = false) {
  ShadowConfig c;
  c.page_size = kPage;
  c.verified = verified;
  c.base = 0x610000000000ULL;
  return c;
}

struct Harness {
  explicit Harness(bool verified = false) : table(config(verified), transport) {}

  ShadowRegion& make(uint64_t id, uint64_t length) {
    transport.real[id].assign(length, std::byte{0});
    return table.create(id, length);
  }

  test::FakeTransport transport;
  ShadowTable table;
};

// The fault handler updates table state behind the compiler's back; the
// fences keep stats reads from being hoisted across the access.
std::byte load(const ShadowRegion& r, uint64_t offset) {
  std::atomic_signal_fence(std::memory_order_seq_cst);
  const std::byte v = *reinterpret_cast<volatile std::byte*>(r.data() + offset);
  std::atomic_signal_fence(std::memory_order_seq_cst);
  return v;
}

void store(const ShadowRegion& r, uint64_t offset, std::byte v) {
  std::atomic_signal_fence(std::memory_order_seq_cst);
  *reinterpret_cast<volatile std::byte*>(r.data() + offset) = v;
  std::atomic_signal_fence(std::memory_order_seq_cst);
}

// Faults a cold sequential read of n pages takes: each fault fetches the
// current window (clamped to the region end) and the window then doubles.
uint64_t expected_read_faults(uint64_t n) {
  uint64_t faults = 0, window = 1, page = 0;
  while (page < n) {
    ++faults;
    page += std::min(window, n - page);
    window *= 2;
  }
  return faults;
}

std::vector<std::pair<uint64_t, uint64_t>> runs_of(const std::set<uint64_t>& pages) {
  std::vector<std::pair<uint64_t, uint64_t>> runs;
  for (uint64_t p : pages) {
    if (!runs.empty() && runs.back().first + runs.back().second == p) {
      ++runs.back().second;
    } else {
      runs.emplace_back(p, 1);
    }
  }
  return runs;
}

}  // namespace

TEST(Shadow, NewRegionIsWritableAndDirty) {
  Harness h;
  auto& r = h.make(1, 16 * kPage);
  EXPECT_EQ(r.phase(), Phase::WritePhase);
  EXPECT_EQ(r.dirty_count(), 16u);
  EXPECT_TRUE(h.table.audit().empty());
  store(r, 5, std::byte{9});
  EXPECT_EQ(h.table.stats().write_faults, 0u);

  auto& odd = h.make(2, 3 * kPage + 10);
  EXPECT_EQ(odd.length(), 3 * kPage + 10);
  EXPECT_EQ(odd.pages(), 4u);
  EXPECT_GE(odd.base(), r.base() + r.mapped_length());
}

TEST(Shadow, FirstFlushSendsTheWholeRegionOnce) {
  Harness h;
  auto& r = h.make(1, 16 * kPage - 100);
  store(r, 7, std::byte{42});
  EXPECT_EQ(h.table.flush_dirty(), 16u);
  ASSERT_EQ(h.transport.sends.size(), 1u);
  EXPECT_EQ(h.transport.sends[0], std::make_pair(uint64_t{0}, 16 * kPage - 100));
  EXPECT_EQ(h.transport.real[1][7], std::byte{42});
  EXPECT_EQ(r.phase(), Phase::Protected);
  EXPECT_TRUE(h.table.audit().empty());
  // Idempotent: nothing new to send, and no completion round trip.
  const uint64_t completes = h.transport.complete_calls;
  EXPECT_EQ(h.table.flush_dirty(), 0u);
  EXPECT_EQ(h.transport.sends.size(), 1u);
  EXPECT_EQ(h.transport.complete_calls, completes);
}

TEST(Shadow, DirtyRunsAreCoalesced) {
  Harness h;
  auto& r = h.make(1, 16 * kPage);
  h.table.flush_dirty();
  h.transport.sends.clear();
  for (uint64_t p : {3, 4, 5, 9}) {
    store(r, p * kPage + 1, std::byte{static_cast<unsigned char>(p)});
  }
  EXPECT_EQ(h.table.flush_dirty(), 4u);
  ASSERT_EQ(h.transport.sends.size(), 2u);
  EXPECT_EQ(h.transport.sends[0], std::make_pair(3 * kPage, 3 * kPage));
  EXPECT_EQ(h.transport.sends[1], std::make_pair(9 * kPage, kPage));
}

TEST(ShadowProperty, FlushTransfersMatchRunOracle) {
  Harness h;
  std::mt19937_64 rng(5);
  auto& r = h.make(1, 32 * kPage);
  h.table.flush_dirty();
  for (int trial = 0; trial < 200; ++trial) {
    std::set<uint64_t> pages;
    const int writes = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < writes; ++i) {
      const uint64_t p = rng() % 32;
      pages.insert(p);
      store(r, p * kPage + rng() % kPage, static_cast<std::byte>(rng()));
    }
    std::vector<std::byte> shadow(r.data(), r.data() + r.length());
    h.transport.sends.clear();
    ASSERT_EQ(h.table.flush_dirty(), pages.size());
    std::vector<std::pair<uint64_t, uint64_t>> sent;
    for (auto [off, len] : h.transport.sends) {
      sent.emplace_back(off / kPage, len / kPage);
    }
    ASSERT_EQ(sent, runs_of(pages)) << "trial " << trial;
    ASSERT_EQ(h.transport.real[1], shadow);
    ASSERT_EQ(h.table.flush_dirty(), 0u);
  }
}

TEST(Shadow, SequentialReadFaultCounts) {
  EXPECT_EQ(expected_read_faults(64), 7u);
  EXPECT_EQ(expected_read_faults(256), 9u);
  for (uint64_t n : {1, 2, 8, 9, 17, 31, 64, 100, 255, 256, 257, 700}) {
    Harness h;
    auto& r = h.make(1, n * kPage);
    // The first flush pushes the fresh zero pages; device contents come after.
    h.table.flush_dirty();
    for (uint64_t i = 0; i < n * kPage; ++i) {
      h.transport.real[1][i] = test::pattern_byte(n, i);
    }
    h.table.reset_stats();
    for (uint64_t p = 0; p < n; ++p) {
      ASSERT_EQ(load(r, p * kPage + 3), test::pattern_byte(n, p * kPage + 3));
    }
    const uint64_t want = n <= h.table.config().small_region_pages ? 1 : expected_read_faults(n);
    EXPECT_EQ(h.table.stats().read_faults, want) << n << " pages";
    EXPECT_EQ(h.table.stats().pages_fetched, n);
    EXPECT_EQ(r.phase(), Phase::ReadPhase);
    EXPECT_TRUE(h.table.audit().empty());
  }
}

TEST(Shadow, WindowRestartsAfterADeviceCall) {
  Harness h;
  auto& r = h.make(1, 64 * kPage);
  h.table.flush_dirty();
  for (uint64_t p = 0; p < 20; ++p) {
    load(r, p * kPage);
  }
  EXPECT_GT(r.prefetch_window(), 1u);
  h.table.flush_dirty();
  EXPECT_EQ(r.prefetch_window(), 1u);
  EXPECT_EQ(r.phase(), Phase::Protected);
  h.table.reset_stats();
  load(r, 40 * kPage);
  EXPECT_EQ(h.table.stats().read_faults, 1u);
  EXPECT_EQ(h.table.stats().pages_fetched, 1u);
}

TEST(Shadow, ReadsSeeDeviceSideUpdates) {
  Harness h;
  auto& r = h.make(1, 4 * kPage);
  store(r, 0, std::byte{1});
  h.table.flush_dirty();
  // A "kernel" changes the real pages.
  h.transport.real[1][kPage * 2 + 5] = std::byte{77};
  EXPECT_EQ(load(r, kPage * 2 + 5), std::byte{77});
  EXPECT_EQ(load(r, 0), std::byte{1});
  // Write after read: fault, page becomes dirty and is sent at the next flush.
  store(r, kPage * 3, std::byte{8});
  EXPECT_EQ(r.phase(), Phase::WritePhase);
  EXPECT_TRUE(r.dirty(3));
  EXPECT_EQ(h.table.flush_dirty(), 1u);
  EXPECT_EQ(h.transport.real[1][kPage * 3], std::byte{8});
}

TEST(Shadow, DrainCopiesEverythingAndLeavesRegionsReadable) {
  Harness h;
  auto& a = h.make(1, 20 * kPage);
  auto& b = h.make(2, 3 * kPage + 7);
  h.table.flush_dirty();
  for (auto& [id, bytes] : h.transport.real) {
    for (size_t i = 0; i < bytes.size(); ++i) {
      bytes[i] = test::pattern_byte(id, i);
    }
  }
  h.table.reset_stats();
  h.table.drain_to_shadow();
  EXPECT_EQ(h.table.stats().bytes_drained, 20 * kPage + 3 * kPage + 7);
  EXPECT_EQ(a.phase(), Phase::ReadPhase);
  EXPECT_EQ(0, std::memcmp(a.data(), h.transport.real[1].data(), a.length()));
  EXPECT_EQ(0, std::memcmp(b.data(), h.transport.real[2].data(), b.length()));
  EXPECT_EQ(h.table.stats().read_faults, 0u);
  EXPECT_TRUE(h.table.audit().empty());
  store(a, 0, std::byte{1});
  EXPECT_THROW(h.table.drain_to_shadow(), Error);
}

TEST(Shadow, VerifiedModeFlagsWriteThenRead) {
  Harness h(true);
  auto& r = h.make(1, 8 * kPage);
  h.table.flush_dirty();
  load(r, 0);             // read phase
  store(r, kPage, std::byte{1});  // write phase
  store(r, 2 * kPage, std::byte{2});
  // At most one writable page at a time.
  auto m = platform::mapping_at(platform::read_maps(), r.base() + kPage);
  ASSERT_TRUE(m.has_value());
  EXPECT_FALSE(m->write);
  EXPECT_TRUE(h.table.audit().empty());
  EXPECT_NO_THROW(h.table.check_violation());
  load(r, 5 * kPage);  // read after write, no device call in between
  ASSERT_TRUE(h.table.violation().has_value());
  EXPECT_EQ(h.table.violation()->page, 5u);
  try {
    h.table.check_violation();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CycleViolation);
  }
  EXPECT_NO_THROW(h.table.check_violation());
}

TEST(Shadow, NormalModeToleratesWriteThenRead) {
  Harness h(false);
  auto& r = h.make(1, 8 * kPage);
  h.table.flush_dirty();
  store(r, kPage, std::byte{1});
  h.transport.real[1][5 * kPage] = std::byte{6};
  EXPECT_EQ(load(r, 5 * kPage), std::byte{6});
  EXPECT_FALSE(h.table.violation().has_value());
  EXPECT_NO_THROW(h.table.check_violation());
}

// Random accesses and flushes: the table's bookkeeping and the real page
// protections agree after every step.
TEST(ShadowProperty, ProtectionSoundness) {
  for (bool verified : {false, true}) {
    Harness h(verified);
    std::mt19937_64 rng(verified ? 2 : 1);
    std::vector<ShadowRegion*> regions;
    for (uint64_t id = 1; id <= 5; ++id) {
      regions.push_back(&h.make(id, (1 + rng() % 40) * kPage - rng() % 64));
    }
    std::vector<std::vector<std::byte>> expect;
    for (auto* r : regions) {
      expect.emplace_back(r->length(), std::byte{0});
    }
    std::vector<bool> written(regions.size(), false);
    for (int step = 0; step < 400; ++step) {
      const size_t k = rng() % regions.size();
      ShadowRegion& r = *regions[k];
      const uint64_t off = rng() % r.length();
      switch (rng() % 4) {
        case 0:
          if (!written[k] || !verified) {
            load(r, off);
          }
          break;
        case 1:
        case 2:
          expect[k][off] = static_cast<std::byte>(rng());
          store(r, off, expect[k][off]);
          written[k] = true;
          break;
        case 3:
          h.table.flush_dirty();
          std::fill(written.begin(), written.end(), false);
          break;
      }
      auto problems = h.table.audit();
      ASSERT_TRUE(problems.empty()) << "step " << step << ": " << problems.front();
    }
    EXPECT_FALSE(h.table.violation().has_value());
    h.table.flush_dirty();
    for (size_t k = 0; k < regions.size(); ++k) {
      ASSERT_EQ(h.transport.real[k + 1], expect[k]) << "region " << k + 1;
    }
  }
}

TEST(Shadow, LookupAndAddressManagement) {
  Harness h;
  auto& a = h.make(1, 2 * kPage);
  const uintptr_t base = a.base();
  EXPECT_EQ(h.table.find(base + kPage + 9), &a);
  EXPECT_EQ(h.table.find(base - 1), nullptr);
  EXPECT_EQ(h.table.by_region(1), &a);
  try {
    h.table.create_at(2, kPage, base + kPage);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::Overlap);
  }
  const uintptr_t next = h.table.next_address();
  h.transport.real[3].assign(kPage, std::byte{0});
  auto& c = h.table.create_at(3, kPage, next + 16 * kPage);
  EXPECT_EQ(c.base(), next + 16 * kPage);
  h.table.destroy(1);
  EXPECT_EQ(h.table.by_region(1), nullptr);
  EXPECT_EQ(h.table.find(base), nullptr);
}

TEST(ShadowDeath, UnservableFaultAbortsWithDiagnostic) {
  ::testing::GTEST_FLAG(death_test_style) = "threadsafe";
  EXPECT_DEATH(
      {
        Harness h;
        auto& r = h.make(1, 4 * kPage);
        h.table.flush_dirty();
        h.transport.fail = true;
        load(r, 0);
      },
      "crum-error: ProxyGone");
}
