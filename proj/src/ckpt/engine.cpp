#include "crum/ckpt/engine.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "crum/ckpt/image.hpp"
#include "crum/client/session.hpp"

namespace crum::ckpt {

using Clock = std::chrono::steady_clock;
using ipc::Opcode;

namespace {

double seconds(Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double>(b - a).count(); }

int64_t to_ns(Clock::time_point t) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(t.time_since_epoch()).count();
}

// Sent by a FORKED child down its pipe just before it exits.
struct ChildResult {
  int32_t status = 0;
  uint32_t reserved = 0;
  uint64_t bytes = 0;
  int64_t end_ns = 0;
  double write_s = 0;
  char message[224] = {};
};

// Everything the image needs, captured while the session is quiesced.
struct Staged {
  ImageMeta meta;
  std::vector<client::ReplayRecord> replay;
  std::vector<RegionEntry> regions;
  std::vector<std::vector<std::byte>> device_copies;
  std::vector<std::span<const std::byte>> payloads;
  std::vector<std::byte> app_state;
  Codec codec = Codec::Raw;
  unsigned workers = 1;

  ImageInput input() const {
    return {codec, workers, meta, replay, regions, payloads, app_state};
  }
};

Error wrap(Errc code, const Error& e) {
  if (e.code() == code) {
    return e;
  }
  return Error(code, std::string(errc_name(e.code())) + ": " + e.what());
}

}  // namespace

Engine::Engine(client::Session& session) : session_(session) {}

Engine::~Engine() {
  try {
    wait();
  } catch (...) {
  }
}

CkptReport Engine::checkpoint(const std::string& path, const Strategy& strategy) {
  status();
  if (child_ > 0) {
    throw Error(Errc::ConcurrentCheckpoint, "a forked checkpoint (pid " + std::to_string(child_) + ") is still writing");
  }
  WriteOptions options;
  options.sync = strategy.sync;
  options.throttle_mbps = strategy.throttle_mbps ? *strategy.throttle_mbps : throttle_from_env();

  CkptReport report;
  Staged st;
  st.codec = strategy.codec;
  st.workers = strategy.workers;
  const auto t0 = Clock::now();
  auto& shadows = session_.shadows();
  try {
    const uint64_t bulk0 = session_.header().stats.bulk_bytes.load(std::memory_order_relaxed);
    session_.quiesce();
    session_.set_state(client::SessionState::Quiesced);
    const auto t1 = Clock::now();
    shadows.drain_to_shadow();
    const auto t2 = Clock::now();

    for (const auto& r : shadows.regions()) {
      st.regions.push_back({r->real_region(), static_cast<uint8_t>(device::RegionKind::Managed), r->length(), r->base()});
    }
    for (const auto& [handle, length] : session_.device_regions()) {
      st.regions.push_back({handle.value, static_cast<uint8_t>(device::RegionKind::Device), length, 0});
    }
    std::sort(st.regions.begin(), st.regions.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    st.device_copies.reserve(st.regions.size());
    for (const auto& e : st.regions) {
      if (e.kind == static_cast<uint8_t>(device::RegionKind::Managed)) {
        const auto* r = shadows.by_region(e.id);
        st.payloads.emplace_back(r->data(), e.length);
      } else {
        auto& copy = st.device_copies.emplace_back(e.length);
        session_.bulk().pull(Opcode::MemcpyD2H, e.id, 0, copy);
        st.payloads.emplace_back(copy);
      }
    }
    const auto t3 = Clock::now();
    report.quiesce_s = seconds(t0, t1);
    report.drain_s = seconds(t1, t2);
    report.stage_s = seconds(t2, t3);
    report.bulk_bytes = session_.header().stats.bulk_bytes.load(std::memory_order_relaxed) - bulk0;
  } catch (const Error& e) {
    session_.set_state(client::SessionState::Running);
    throw wrap(Errc::DrainFailed, e);
  }

  st.meta.page_size = session_.page_size();
  st.meta.arena_capacity = session_.arena_capacity();
  st.meta.shadow_base = shadows.config().base;
  st.meta.mode = session_.mode() == client::SessionMode::Verified ? 1 : 0;
  st.replay = session_.replay_log().records();
  for (auto event : session_.recorded_events()) {
    client::ReplayRecord rec;
    rec.opcode = static_cast<uint16_t>(Opcode::EventRecord);
    rec.arg = event.value;
    st.replay.push_back(rec);
  }
  st.app_state = session_.save_app_state();
  session_.detach();

  if (strategy.mode == Mode::Inline) {
    const auto w0 = Clock::now();
    try {
      report.image_bytes = write_image(path, st.input(), options);
    } catch (const Error& e) {
      session_.reattach();
      status_ = {CkptStatus::Kind::LastResult, Errc::WriteFailed, e.what(), {}};
      throw wrap(Errc::WriteFailed, e);
    }
    const auto w1 = Clock::now();
    report.write_s = seconds(w0, w1);
    session_.reattach();
    report.pause_s = report.total_s = seconds(t0, Clock::now());
    status_ = {CkptStatus::Kind::LastResult, Errc::Ok, {}, report};
    return report;
  }

  int fds[2];
  if (pipe2(fds, O_CLOEXEC) != 0) {
    session_.reattach();
    throw_errno(Errc::WriteFailed, "pipe");
  }
  const auto f0 = Clock::now();
  const pid_t pid = fork();
  if (pid == 0) {
    // Child: owns nothing live, only the drained copy of the state.
    ::close(fds[0]);
    ChildResult res;
    const auto w0 = Clock::now();
    try {
      res.bytes = write_image(path, st.input(), options);
    } catch (const Error& e) {
      res.status = static_cast<int32_t>(e.code());
      std::strncpy(res.message, e.what(), sizeof(res.message) - 1);
    } catch (const std::exception& e) {
      res.status = static_cast<int32_t>(Errc::WriteFailed);
      std::strncpy(res.message, e.what(), sizeof(res.message) - 1);
    }
    const auto w1 = Clock::now();
    res.write_s = seconds(w0, w1);
    res.end_ns = to_ns(w1);
    ssize_t ignored = ::write(fds[1], &res, sizeof(res));
    (void)ignored;
    _exit(res.status == 0 ? 0 : 1);
  }
  const auto f1 = Clock::now();
  ::close(fds[1]);
  if (pid < 0) {
    ::close(fds[0]);
    session_.reattach();
    throw_errno(Errc::WriteFailed, "fork");
  }
  report.fork_s = seconds(f0, f1);
  report.pause_s = seconds(t0, f1);
  report.complete = false;
  child_ = pid;
  pipe_fd_ = fds[0];
  started_ = t0;
  pending_ = report;
  status_ = {CkptStatus::Kind::ChildRunning, Errc::Ok, {}, report};
  session_.reattach();
  return report;
}

void Engine::collect(int wait_status) {
  ChildResult res;
  size_t got = 0;
  while (got < sizeof(res)) {
    ssize_t n = ::read(pipe_fd_, reinterpret_cast<char*>(&res) + got, sizeof(res) - got);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    if (n <= 0) {
      break;
    }
    got += static_cast<size_t>(n);
  }
  ::close(pipe_fd_);
  pipe_fd_ = -1;
  child_ = -1;

  CkptReport report = pending_;
  report.complete = true;
  if (got == sizeof(res)) {
    report.write_s = res.write_s;
    report.image_bytes = res.bytes;
    report.total_s = static_cast<double>(res.end_ns - to_ns(started_)) / 1e9;
    const auto code = static_cast<Errc>(res.status);
    status_ = {CkptStatus::Kind::LastResult, code == Errc::Ok ? Errc::Ok : Errc::WriteFailed,
               code == Errc::Ok ? std::string() : std::string(errc_name(code)) + ": " + res.message, report};
    return;
  }
  report.total_s = seconds(started_, Clock::now());
  std::string why;
  if (wait_status >= 0 && WIFSIGNALED(wait_status)) {
    why = "checkpoint child killed by signal " + std::to_string(WTERMSIG(wait_status));
  } else if (wait_status >= 0 && WIFEXITED(wait_status)) {
    why = "checkpoint child exited with status " + std::to_string(WEXITSTATUS(wait_status)) + " without a report";
  } else {
    why = "checkpoint child vanished";
  }
  status_ = {CkptStatus::Kind::LastResult, Errc::WriteFailed, why, report};
}

CkptStatus Engine::status() {
  if (child_ > 0) {
    int ws = 0;
    const pid_t r = waitpid(child_, &ws, WNOHANG);
    if (r == child_) {
      collect(ws);
    } else if (r < 0 && errno != EINTR) {
      collect(-1);
    }
  }
  return status_;
}

CkptStatus Engine::wait() {
  if (child_ > 0) {
    int ws = 0;
    pid_t r;
    do {
      r = waitpid(child_, &ws, 0);
    } while (r < 0 && errno == EINTR);
    collect(r == child_ ? ws : -1);
  }
  return status_;
}

void restore(client::Session& session, const std::string& path) {
  if (session.state() != client::SessionState::Running || session.replay_log().size() != 0) {
    throw Error(Errc::InvalidState, "restore needs a fresh running session");
  }
  auto image = read_image(path);
  if (image.meta.page_size != session.page_size()) {
    throw Error(Errc::FormatError, "image page size " + std::to_string(image.meta.page_size) +
                                       " differs from the session's " + std::to_string(session.page_size()));
  }
  for (const auto& rec : image.replay) {
    session.replay(rec);
  }

  auto& shadows = session.shadows();
  const size_t live = shadows.regions().size() + session.device_regions().size();
  if (live != image.regions.size()) {
    throw Error(Errc::FormatError, "replay recreated " + std::to_string(live) + " regions, image lists " +
                                       std::to_string(image.regions.size()));
  }
  for (size_t i = 0; i < image.regions.size(); ++i) {
    const auto& e = image.regions[i];
    const auto& payload = image.payloads[i];
    const std::string which = "region " + std::to_string(e.id);
    if (e.kind == static_cast<uint8_t>(device::RegionKind::Managed)) {
      auto* r = shadows.by_region(e.id);
      if (r == nullptr || r->length() != e.length || r->base() != e.shadow) {
        throw Error(Errc::FormatError, which + " does not match the replayed managed allocation");
      }
      // Freshly created shadows are writable and fully dirty.
      std::memcpy(r->data(), payload.data(), payload.size());
    } else {
      const auto& devs = session.device_regions();
      auto it = std::find_if(devs.begin(), devs.end(), [&](const auto& d) { return d.first.value == e.id; });
      if (it == devs.end() || it->second != e.length || e.shadow != 0) {
        throw Error(Errc::FormatError, which + " does not match the replayed device allocation");
      }
      session.bulk().push(Opcode::MemcpyH2D, e.id, 0, payload, false);
    }
  }
  shadows.flush_dirty();
  if (!session.recorded_events().empty()) {
    // Completes the re-recorded events, as they were at checkpoint time.
    session.channel().call<Opcode::Synchronize>({});
  }
  session.channel().flush();
  session.deliver_app_state(std::move(image.app_state));
}

}  // namespace crum::ckpt
