#include <gtest/gtest.h>
#include <sys/mman.h>
#include <zlib.h>

#include <array>
#include <bit>
#include <chrono>
#include <cstring>
#include <random>
#include <thread>

#include "crum/ckpt/codec.hpp"
#include "crum/ckpt/engine.hpp"
#include "crum/ckpt/image.hpp"
#include "crum/cli/launcher.hpp"
#include "crum/client/session.hpp"
#include "crum/device/kernels.hpp"
#include "crum/workloads/workloads.hpp"
#include "support/support.hpp"

using namespace crum;
using namespace crum::ckpt;
using client::Session;

namespace {

cli::ProxyOptions options(uint64_t arena = uint64_t{128} << 20) {
  cli::ProxyOptions o;
  o.arena_bytes = arena;
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

Strategy strategy(const std::string& name, double throttle = 0) {
  auto s = Strategy::parse(name);
  s.sync = false;
  s.throttle_mbps = throttle;
  return s;
}

CkptReport checkpoint_and_wait(Session& s, const std::string& path, const Strategy& st) {
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

// Managed and device regions, a stream, a recorded event, a freed region
// and some kernel results.
struct State {
  float* a = nullptr;
  float* b = nullptr;
  client::DeviceHandle d;
};

State build_state(Session& s) {
  State st;
  st.a = static_cast<float*>(s.malloc_managed(10000));
  auto* gone = s.malloc_managed(4096);
  st.b = static_cast<float*>(s.malloc_managed(20 * 4096));
  st.d = s.malloc_device(5000);
  auto stream = s.stream_create();
  auto ev = s.event_create();
  s.event_create();
  s.free_managed(gone);
  for (int i = 0; i < 2500; ++i) {
    st.a[i] = static_cast<float>(i) * 0.5f;
  }
  s.launch(stream, "fill", {st.b}, {device::scalar_f64(3.0)});
  s.launch(stream, "saxpy", {st.a, st.b}, {device::scalar_f64(2.0)});
  s.event_record(ev, stream);
  std::vector<std::byte> dev(5000);
  for (size_t i = 0; i < dev.size(); ++i) {
    dev[i] = test::pattern_byte(3, i);
  }
  s.memcpy_h2d(st.d, 0, dev);
  s.synchronize();
  return st;
}

void rewrite(const std::string& path, const ImageContents& c) {
  std::vector<std::span<const std::byte>> payloads;
  for (const auto& p : c.payloads) {
    payloads.emplace_back(p);
  }
  ImageInput in{c.codec, 1, c.meta, c.replay, c.regions, payloads, c.app_state};
  write_image(path, in, WriteOptions{false, 0});
}

void expect_same_contents(const ImageContents& x, const ImageContents& y) {
  EXPECT_EQ(x.meta, y.meta);
  EXPECT_EQ(x.replay, y.replay);
  EXPECT_EQ(x.regions, y.regions);
  EXPECT_EQ(x.payloads, y.payloads);
  EXPECT_EQ(x.app_state, y.app_state);
}

uint32_t file_crc(const std::vector<std::byte>& bytes, size_t n) {
  return static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

template <class T>
T at(const std::vector<std::byte>& bytes, size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

}  // namespace

TEST(Codec, RoundTripsEveryCodec) {
  std::mt19937_64 rng(1);
  for (Codec c : {Codec::Raw, Codec::Deflate, Codec::Lz4}) {
    for (size_t n : {size_t{0}, size_t{1}, size_t{4095}, size_t{1} << 20}) {
      std::vector<std::byte> raw(n);
      for (size_t i = 0; i < n; ++i) {
        raw[i] = i % 3 == 0 ? std::byte{0} : static_cast<std::byte>(rng());
      }
      auto enc = encode_chunk(c, raw);
      std::vector<std::byte> back(n);
      decode_chunk(c, enc, back);
      ASSERT_EQ(back, raw) << codec_name(c) << " " << n;
    }
  }
  std::vector<std::byte> junk(100, std::byte{0x55}), out(1000);
  EXPECT_EQ(code_of([&] { decode_chunk(Codec::Deflate, junk, out); }), Errc::FormatError);
}

TEST(Image, RoundTripAndByteLayout) {
  test::TempDir dir;
  std::vector<client::ReplayRecord> replay(3);
  for (size_t i = 0; i < replay.size(); ++i) {
    replay[i].opcode = 5;
    replay[i].arg = 100 * (i + 1);
    replay[i].result = i + 1;
    replay[i].offset = 4096 * i;
    replay[i].shadow = 0x600000000000ULL + i;
  }
  std::vector<RegionEntry> regions{{1, 1, 9 << 20, 0x600000000000ULL}, {2, 0, 0, 0}, {3, 0, 17, 0}};
  std::vector<std::vector<std::byte>> data(3);
  data[0].resize(9 << 20);
  for (size_t i = 0; i < data[0].size(); ++i) {
    data[0][i] = i % 2 ? test::pattern_byte(1, i) : std::byte{0};
  }
  data[2].assign(17, std::byte{0xab});
  std::vector<std::span<const std::byte>> spans(data.begin(), data.end());
  std::vector<std::byte> app{std::byte{1}, std::byte{2}, std::byte{3}};
  for (Codec c : {Codec::Raw, Codec::Deflate, Codec::Lz4}) {
    const auto path = dir.file(std::string(codec_name(c)));
    ImageInput in{c, 3, ImageMeta{4096, 1 << 30, 0x600000000000ULL, 1}, replay, regions, spans, app};
    const uint64_t size = write_image(path, in, {});
    auto bytes = test::read_file(path);
    ASSERT_EQ(bytes.size(), size);
    // Header.
    EXPECT_EQ(0, std::memcmp(bytes.data(), "CRUM", 4));
    EXPECT_EQ(at<uint32_t>(bytes, 4), 1u);
    EXPECT_EQ(at<uint8_t>(bytes, 8), static_cast<uint8_t>(c));
    EXPECT_EQ(at<uint32_t>(bytes, 12), 5u);
    // META section: tag, length, 32-byte body, CRC.
    EXPECT_EQ(at<uint32_t>(bytes, 16), 0x4154454du);
    EXPECT_EQ(at<uint64_t>(bytes, 20), 32u);
    EXPECT_EQ(at<uint64_t>(bytes, 28), 4096u);
    EXPECT_EQ(at<uint64_t>(bytes, 36), uint64_t{1} << 30);
    EXPECT_EQ(at<uint8_t>(bytes, 52), 1u);
    EXPECT_EQ(at<uint32_t>(bytes, 60), file_crc(std::vector<std::byte>(bytes.begin() + 28, bytes.begin() + 60), 32));
    // REPL follows at 64: count then 40-byte records.
    EXPECT_EQ(at<uint32_t>(bytes, 64), 0x4c504552u);
    EXPECT_EQ(at<uint64_t>(bytes, 68), 8u + 3 * 40);
    EXPECT_EQ(at<uint64_t>(bytes, 76), 3u);
    EXPECT_EQ(at<uint16_t>(bytes, 84), 5u);
    EXPECT_EQ(at<uint64_t>(bytes, 84 + 8), 100u);
    // Whole-file CRC trailer.
    EXPECT_EQ(at<uint32_t>(bytes, bytes.size() - 4), file_crc(bytes, bytes.size() - 4));

    auto back = read_image(path);
    EXPECT_EQ(back.codec, c);
    EXPECT_EQ(back.meta, in.meta);
    EXPECT_EQ(back.replay, replay);
    EXPECT_EQ(back.regions, regions);
    ASSERT_EQ(back.payloads.size(), 3u);
    EXPECT_EQ(back.payloads[0], data[0]);
    EXPECT_TRUE(back.payloads[1].empty());
    EXPECT_EQ(back.payloads[2], data[2]);
    EXPECT_EQ(back.app_state, app);
  }
}

TEST(Image, CorruptionIsDetected) {
  test::TempDir dir;
  std::vector<std::byte> payload(100000, std::byte{7});
  std::vector<std::span<const std::byte>> spans{payload};
  std::vector<RegionEntry> regions{{1, 0, payload.size(), 0}};
  ImageInput in{Codec::Raw, 1, ImageMeta{4096, 1 << 20, 0, 0}, {}, regions, spans, {}};
  const auto path = dir.file("img");
  write_image(path, in, {});
  const auto good = test::read_file(path);

  auto truncated = good;
  truncated.pop_back();
  test::write_file(path, truncated);
  EXPECT_EQ(code_of([&] { read_image(path); }), Errc::CrcMismatch);

  auto flipped = good;
  flipped[good.size() / 2] ^= std::byte{1};
  test::write_file(path, flipped);
  EXPECT_EQ(code_of([&] { read_image(path); }), Errc::CrcMismatch);

  // A wrong magic with a consistent trailer is a format problem.
  auto magic = good;
  magic[0] = std::byte{'X'};
  const uint32_t crc = file_crc(magic, magic.size() - 4);
  std::memcpy(magic.data() + magic.size() - 4, &crc, 4);
  test::write_file(path, magic);
  EXPECT_EQ(code_of([&] { read_image(path); }), Errc::FormatError);

  EXPECT_EQ(code_of([&] { read_image(dir.file("missing")); }), Errc::FormatError);
}

TEST(Image, ThrottleBoundsWriteRate) {
  test::TempDir dir;
  std::vector<std::byte> payload(2'000'000, std::byte{1});
  std::vector<std::span<const std::byte>> spans{payload};
  std::vector<RegionEntry> regions{{1, 0, payload.size(), 0}};
  ImageInput in{Codec::Raw, 1, ImageMeta{4096, 1 << 22, 0, 0}, {}, regions, spans, {}};
  const auto t0 = std::chrono::steady_clock::now();
  write_image(dir.file("t"), in, WriteOptions{false, 10});
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(s, 0.19);  // 2 MB at 10 MB/s
  EXPECT_LT(s, 1.0);
}

TEST(Checkpoint, StrategiesProduceTheSameLogicalImage) {
  test::TempDir dir;
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  build_state(*s);
  s->set_save_hook([] { return std::vector<std::byte>{std::byte{42}}; });
  std::vector<ImageContents> images;
  std::vector<uint64_t> sizes;
  for (const char* name : {"naive", "gzip", "pgzip", "lz4", "forked"}) {
    const auto path = dir.file(name);
    auto report = checkpoint_and_wait(*s, path, strategy(name));
    EXPECT_GE(report.total_s, report.pause_s);
    EXPECT_EQ(report.image_bytes, test::read_file(path).size());
    EXPECT_GE(report.bulk_bytes, 10000u + 20 * 4096 + 5000);
    images.push_back(read_image(path));
    sizes.push_back(report.image_bytes);
  }
  for (size_t i = 1; i < images.size(); ++i) {
    expect_same_contents(images[0], images[i]);
  }
  EXPECT_LT(sizes[1], sizes[0]);
  EXPECT_EQ(images[1].codec, Codec::Deflate);
  EXPECT_EQ(images[3].codec, Codec::Lz4);
  // Region table: live regions in id order, device regions carry no address.
  ASSERT_EQ(images[0].regions.size(), 3u);
  EXPECT_EQ(images[0].regions[0].length, 10000u);
  EXPECT_EQ(images[0].regions[2].kind, static_cast<uint8_t>(device::RegionKind::Device));
  EXPECT_EQ(images[0].regions[2].shadow, 0u);
  EXPECT_EQ(images[0].app_state, std::vector<std::byte>{std::byte{42}});
  s->close();
}

// The image holds the state at the moment of the checkpoint, whatever the
// parent does while the child is still writing.
TEST(Checkpoint, ForkedImageIsIsolatedFromLaterWrites) {
  test::TempDir dir;
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  auto st = build_state(*s);
  std::vector<float> a(st.a, st.a + 2500), b(st.b, st.b + 20 * 1024);
  auto report = s->checkpoint(dir.file("f"), strategy("forked", 2));
  EXPECT_FALSE(report.complete);
  for (auto& region : s->shadows().regions()) {
    std::memset(region->data(), 0xee, region->length());
  }
  s->synchronize();
  auto status = s->wait_checkpoint();
  ASSERT_EQ(status.result, Errc::Ok) << status.message;
  auto image = read_image(dir.file("f"));
  EXPECT_EQ(0, std::memcmp(image.payloads[0].data(), a.data(), 10000));
  EXPECT_EQ(0, std::memcmp(image.payloads[1].data(), b.data(), b.size() * 4));
  EXPECT_EQ(st.a[0], std::bit_cast<float>(0xeeeeeeeeu));
  s->close();
}

TEST(Checkpoint, StatusTracksTheForkedChild) {
  test::TempDir dir;
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  EXPECT_EQ(s->ckpt_status().kind, CkptStatus::Kind::Idle);
  auto* m = static_cast<float*>(s->malloc_managed(2 << 20));
  m[0] = 1;
  auto report = s->checkpoint(dir.file("c1"), strategy("forked", 4));
  EXPECT_FALSE(report.complete);
  EXPECT_EQ(s->ckpt_status().kind, CkptStatus::Kind::ChildRunning);
  EXPECT_EQ(code_of([&] { s->checkpoint(dir.file("c2"), strategy("naive")); }), Errc::ConcurrentCheckpoint);
  // The application keeps running meanwhile.
  s->launch(client::kDefaultStream, "fill", {m}, {device::scalar_f64(5)});
  s->synchronize();
  EXPECT_EQ(m[77], 5.0f);
  auto done = s->wait_checkpoint();
  EXPECT_EQ(done.kind, CkptStatus::Kind::LastResult);
  EXPECT_EQ(done.result, Errc::Ok);
  EXPECT_TRUE(done.report.complete);
  EXPECT_GE(done.report.total_s, 0.4);
  EXPECT_GE(done.report.total_s, done.report.pause_s);
  float first = 0;
  std::memcpy(&first, read_image(dir.file("c1")).payloads[0].data(), 4);
  EXPECT_EQ(first, 1.0f);
  EXPECT_NO_THROW(checkpoint_and_wait(*s, dir.file("c3"), strategy("naive")));
  s->close();
}

TEST(Checkpoint, WriteFailuresAreReported) {
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  auto* m = static_cast<float*>(s->malloc_managed(1 << 20));
  m[5] = 2;
  EXPECT_EQ(code_of([&] { s->checkpoint("/dev/full", strategy("naive")); }), Errc::WriteFailed);
  EXPECT_EQ(s->state(), client::SessionState::Running);
  EXPECT_EQ(s->ckpt_status().result, Errc::WriteFailed);

  auto report = s->checkpoint("/dev/full", strategy("forked"));
  EXPECT_FALSE(report.complete);
  auto status = s->wait_checkpoint();
  EXPECT_EQ(status.kind, CkptStatus::Kind::LastResult);
  EXPECT_EQ(status.result, Errc::WriteFailed);
  EXPECT_EQ(s->ckpt_status().result, Errc::WriteFailed);
  // Still usable.
  s->launch(client::kDefaultStream, "fill", {m}, {device::scalar_f64(1)});
  s->synchronize();
  EXPECT_EQ(m[5], 1.0f);
  EXPECT_EQ(code_of([&] { s->checkpoint("/nonexistent-dir/x", strategy("lz4")); }), Errc::WriteFailed);
  s->close();
}

// Pause accounting: throttled storage costs the naive pause P/B, the forked
// pause none of it.
TEST(Checkpoint, ForkedPauseExcludesTheWrite) {
  test::TempDir dir;
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  const uint64_t bytes = 8'000'000;
  auto* m = static_cast<float*>(s->malloc_managed(bytes));
  m[0] = 1;
  const double mbps = 40;
  auto naive = checkpoint_and_wait(*s, dir.file("n"), strategy("naive", mbps));
  auto forked = checkpoint_and_wait(*s, dir.file("f"), strategy("forked", mbps));
  EXPECT_DOUBLE_EQ(naive.pause_s, naive.total_s);
  EXPECT_GE(naive.pause_s - forked.pause_s, 0.8 * static_cast<double>(bytes) / (mbps * 1e6));
  EXPECT_GE(forked.total_s, static_cast<double>(bytes) / (mbps * 1e6) * 0.9);
  s->close();
}

TEST(Restore, ReproducesTheObservableProxyState) {
  test::TempDir dir;
  const auto path = dir.file("img");
  std::string before;
  std::vector<std::vector<std::byte>> shadows;
  std::vector<uintptr_t> bases;
  {
    cli::ProxyProcess proxy(options());
    auto s = Session::open(proxy.shm_name());
    build_state(*s);
    s->set_save_hook([] { return std::vector<std::byte>{std::byte{9}, std::byte{8}}; });
    before = s->dump_proxy_state();
    checkpoint_and_wait(*s, path, strategy("lz4"));
    for (auto& r : s->shadows().regions()) {
      shadows.emplace_back(r->data(), r->data() + r->length());
      bases.push_back(r->base());
    }
    s->close();
  }
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  restore(*s, path);
  EXPECT_EQ(s->dump_proxy_state(), before);
  ASSERT_EQ(s->shadows().regions().size(), shadows.size());
  for (size_t i = 0; i < shadows.size(); ++i) {
    const auto& r = *s->shadows().regions()[i];
    EXPECT_EQ(r.base(), bases[i]);
    EXPECT_EQ(0, std::memcmp(r.data(), shadows[i].data(), r.length()));
  }
  ASSERT_TRUE(s->restored().has_value());
  EXPECT_EQ(*s->restored(), (std::vector<std::byte>{std::byte{9}, std::byte{8}}));
  EXPECT_EQ(s->replay_log().size(), read_image(path).replay.size() - s->recorded_events().size());
  // A second restore into a used session is refused.
  EXPECT_EQ(code_of([&] { restore(*s, path); }), Errc::InvalidState);
  s->close();
}

TEST(Restore, DivergingReplayIsFatal) {
  test::TempDir dir;
  const auto path = dir.file("img");
  {
    cli::ProxyProcess proxy(options());
    auto s = Session::open(proxy.shm_name());
    build_state(*s);
    checkpoint_and_wait(*s, path, strategy("naive"));
    s->close();
  }
  const auto good = read_image(path);
  auto try_restore = [&](const ImageContents& c, uint64_t arena = uint64_t{128} << 20) {
    rewrite(path, c);
    cli::ProxyProcess proxy(options(arena));
    auto s = Session::open(proxy.shm_name());
    Errc rc = code_of([&] { restore(*s, path); });
    s->abandon();
    return rc;
  };
  EXPECT_EQ(try_restore(good), Errc::Ok);
  for (size_t i = 0; i < good.replay.size(); ++i) {
    auto bad = good;
    auto& rec = bad.replay[i];
    if (rec.opcode == static_cast<uint16_t>(ipc::Opcode::DeviceAlloc)) {
      rec.offset += 4096;
    } else if (rec.opcode == static_cast<uint16_t>(ipc::Opcode::StreamCreate) ||
               rec.opcode == static_cast<uint16_t>(ipc::Opcode::EventCreate)) {
      rec.result += 1;
    } else {
      continue;
    }
    EXPECT_EQ(try_restore(bad), Errc::ReplayDivergence) << "record " << i;
  }
  auto moved = good;
  moved.replay[0].shadow += 1 << 20;
  EXPECT_EQ(try_restore(moved), Errc::ReplayDivergence);
  EXPECT_EQ(try_restore(good, 64 << 10), Errc::ReplayDivergence);
}

TEST(Restore, TakenShadowAddressIsReported) {
  test::TempDir dir;
  const auto path = dir.file("img");
  uintptr_t base = 0;
  {
    cli::ProxyProcess proxy(options());
    auto s = Session::open(proxy.shm_name());
    auto* m = static_cast<float*>(s->malloc_managed(4096));
    base = reinterpret_cast<uintptr_t>(m);
    checkpoint_and_wait(*s, path, strategy("naive"));
    s->close();
  }
  void* squatter = mmap(reinterpret_cast<void*>(base), 4096, PROT_READ, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE,
                        -1, 0);
  ASSERT_EQ(squatter, reinterpret_cast<void*>(base));
  cli::ProxyProcess proxy(options());
  auto s = Session::open(proxy.shm_name());
  EXPECT_EQ(code_of([&] { restore(*s, path); }), Errc::AddressUnavailable);
  s->abandon();
  munmap(squatter, 4096);
}

// Checkpoint at every step of a small bigreg run, restore, finish: the
// result always equals the uninterrupted run.
TEST(RestoreProperty, RoundTripAtEveryStep) {
  test::TempDir dir;
  workloads::Params params;
  params.region_bytes = 256 << 10;
  params.iterations = 12;
  uint32_t golden = 0;
  {
    cli::ProxyProcess proxy(options());
    auto s = Session::open(proxy.shm_name());
    workloads::SessionRuntime rt(*s);
    auto wl = workloads::make_workload("bigreg", params);
    wl->setup(rt);
    while (!wl->done()) {
      wl->step(rt);
    }
    golden = wl->checksum(rt);
    s->close();
  }
  for (uint32_t k = 1; k < params.iterations; ++k) {
    const auto path = dir.file("k" + std::to_string(k));
    {
      cli::ProxyProcess proxy(options());
      auto s = Session::open(proxy.shm_name());
      workloads::SessionRuntime rt(*s);
      auto wl = workloads::make_workload("bigreg", params);
      s->set_save_hook([&] { return wl->save_state(); });
      wl->setup(rt);
      while (wl->iteration() < k) {
        wl->step(rt);
      }
      checkpoint_and_wait(*s, path, strategy(k % 2 ? "forked" : "lz4"));
      s->abandon();
    }
    cli::ProxyProcess proxy(options());
    auto s = Session::open(proxy.shm_name());
    restore(*s, path);
    workloads::SessionRuntime rt(*s);
    auto wl = workloads::make_workload("bigreg", params);
    wl->load_state(*s->restored());
    ASSERT_EQ(wl->iteration(), k);
    while (!wl->done()) {
      wl->step(rt);
    }
    EXPECT_EQ(wl->checksum(rt), golden) << "checkpoint at " << k;
    s->close();
  }
}
