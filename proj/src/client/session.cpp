#include "crum/client/session.hpp"

#include <sys/prctl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <exception>

#include "crum/ckpt/engine.hpp"
#include "crum/env.hpp"

namespace crum::client {

using ipc::Opcode;

namespace {

std::string_view state_name(SessionState state) {
  switch (state) {
    case SessionState::Running:
      return "RUNNING";
    case SessionState::Quiesced:
      return "QUIESCED";
    case SessionState::Detached:
      return "DETACHED";
  }
  return "?";
}

}  // namespace

// Shadow page traffic rides the same channel as the API calls.
class Session::Transport : public shadow::ShadowTransport {
 public:
  explicit Transport(Session& session) : session_(session) {}

  Errc fetch(uint64_t region, uint64_t offset, std::span<std::byte> dst) noexcept override {
    return session_.bulk_.try_pull(Opcode::UvmRead, region, offset, dst);
  }
  Errc send(uint64_t region, uint64_t offset, std::span<const std::byte> src) noexcept override {
    return session_.bulk_.try_push(Opcode::UvmWrite, region, offset, src, false);
  }
  Errc complete_sends() noexcept override {
    return session_.channel_.try_wait_completed(session_.channel_.last_sent());
  }

 private:
  Session& session_;
};

std::unique_ptr<Session> Session::open(const std::string& shm_name, SessionOptions options) {
  return std::unique_ptr<Session>(new Session(shm_name, std::move(options)));
}

std::unique_ptr<Session> Session::from_env() {
  std::string name;
  if (auto shm = env::get(env::kShmName)) {
    name = *shm;
  } else if (auto id = env::get(env::kSessionId)) {
    name = ipc::SharedRegion::name_for_session(*id);
  } else {
    throw Error(Errc::NoProxy, "neither CRUM_SHM_NAME nor CRUM_SESSION_ID is set; start the app with `crum run`");
  }
  SessionOptions options;
  options.shadow = shadow::ShadowConfig::from_env();
  if (auto depth = env::get_u64(env::kPipelineDepth)) {
    options.pipeline_depth = static_cast<uint32_t>(*depth);
  }
  auto session = open(name, options);
  if (auto image = env::get(env::kRestart)) {
    try {
      ckpt::restore(*session, *image);
    } catch (const Error& e) {
      throw Error(Errc::RestoreFailed, std::string(errc_name(e.code())) + ": " + e.what());
    }
  }
  return session;
}

Session::Session(const std::string& shm_name, SessionOptions options)
    : shm_name_(shm_name), options_(std::move(options)), owner_(std::this_thread::get_id()) {
  attach_channel(options_.connect_timeout_ms);
  auto hello = channel_.call<Opcode::Hello>({static_cast<int32_t>(getpid()), 0});
  epoch_ = hello.epoch;
  arena_capacity_ = hello.arena_capacity;
  transport_ = std::make_unique<Transport>(*this);
  shadows_ = std::make_unique<shadow::ShadowTable>(options_.shadow, *transport_);
  engine_ = std::make_unique<ckpt::Engine>(*this);
  state_ = SessionState::Running;
}

Session::~Session() { finish(); }

void Session::finish() {
  try {
    close();
  } catch (...) {
    // Destructors stay quiet; call close() to see the error.
  }
}

void Session::attach_channel(int timeout_ms) {
  region_.emplace(ipc::SharedRegion::attach(shm_name_));
  auto& header = region_->header();
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    const uint32_t st = header.proxy_state.load(std::memory_order_acquire);
    if (st == static_cast<uint32_t>(ipc::ProxyState::Ready)) {
      break;
    }
    if (st == static_cast<uint32_t>(ipc::ProxyState::Exited)) {
      region_.reset();
      throw Error(Errc::NoProxy, "proxy for " + shm_name_ + " has exited");
    }
    if (std::chrono::steady_clock::now() > deadline) {
      region_.reset();
      throw Error(Errc::NoProxy, "proxy for " + shm_name_ + " never became ready");
    }
    ipc::futex_wait(header.proxy_state, st, 20);
  }
  proxy_pid_ = header.proxy_pid.load(std::memory_order_acquire);
  header.client_pid.store(getpid(), std::memory_order_release);
  // The proxy copies bulk data straight into our address space.
  prctl(PR_SET_PTRACER, static_cast<unsigned long>(proxy_pid_), 0, 0, 0);
  channel_ = ipc::ClientChannel(*region_);
  channel_.watch_proxy(proxy_pid_);
  if (options_.pipeline_depth) {
    channel_.set_depth(*options_.pipeline_depth);
  }
}

const ipc::ChannelHeader& Session::header() const {
  if (!region_) {
    throw Error(Errc::InvalidState, "session is detached");
  }
  return region_->header();
}

SessionMode Session::mode() const {
  return shadows_->config().verified ? SessionMode::Verified : SessionMode::Normal;
}

void Session::check_owner() const {
  if (std::this_thread::get_id() != owner_) {
    throw Error(Errc::WrongThread, "session used from a thread other than the one that opened it");
  }
}

void Session::enter() {
  check_owner();
  if (state_ != SessionState::Running) {
    throw Error(Errc::InvalidState, "session is " + std::string(state_name(state_)));
  }
  shadows_->check_violation();
  poll_control();
}

void Session::set_resume_hook(ResumeHook hook) {
  resume_hook_ = std::move(hook);
  if (resume_hook_ && restored_blob_) {
    resume_hook_(*restored_blob_);
  }
}

std::vector<std::byte> Session::save_app_state() const {
  return save_hook_ ? save_hook_() : std::vector<std::byte>{};
}

void Session::deliver_app_state(std::vector<std::byte> blob) {
  restored_blob_ = std::move(blob);
  if (resume_hook_) {
    resume_hook_(*restored_blob_);
  }
}

uint64_t Session::resolve(const RegionRef& ref) {
  if (const auto* addr = std::get_if<uintptr_t>(&ref.value())) {
    auto* region = shadows_->find(*addr);
    if (region == nullptr) {
      throw Error(Errc::UnknownRegion, "address is not inside a managed allocation");
    }
    return region->real_region();
  }
  return std::get<DeviceHandle>(ref.value()).value;
}

void* Session::malloc_managed(size_t length) {
  enter();
  if (length == 0) {
    throw Error(Errc::InvalidArgument, "malloc_managed of zero bytes");
  }
  auto resp = channel_.call<Opcode::DeviceAlloc>(
      {static_cast<uint8_t>(device::RegionKind::Managed), {}, static_cast<uint64_t>(length)});
  auto& shadow = shadows_->create(resp.region, length);
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::DeviceAlloc);
  rec.kind = static_cast<uint8_t>(device::RegionKind::Managed);
  rec.arg = length;
  rec.result = resp.region;
  rec.offset = resp.offset;
  rec.shadow = shadow.base();
  replay_.append(rec);
  return shadow.data();
}

void Session::free_managed(void* ptr) {
  enter();
  auto* region = shadows_->find(reinterpret_cast<uintptr_t>(ptr));
  if (region == nullptr || region->data() != ptr) {
    throw Error(Errc::UnknownRegion, "free_managed of an address that is not a managed allocation");
  }
  const uint64_t id = region->real_region();
  // Pending page sends for this region must land before it goes away.
  channel_.flush();
  channel_.call<Opcode::DeviceFree>({id});
  shadows_->destroy(id);
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::DeviceFree);
  rec.arg = id;
  replay_.append(rec);
}

DeviceHandle Session::malloc_device(size_t length) {
  enter();
  if (length == 0) {
    throw Error(Errc::InvalidArgument, "malloc_device of zero bytes");
  }
  auto resp = channel_.call<Opcode::DeviceAlloc>(
      {static_cast<uint8_t>(device::RegionKind::Device), {}, static_cast<uint64_t>(length)});
  device_regions_.emplace_back(DeviceHandle{resp.region}, length);
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::DeviceAlloc);
  rec.kind = static_cast<uint8_t>(device::RegionKind::Device);
  rec.arg = length;
  rec.result = resp.region;
  rec.offset = resp.offset;
  replay_.append(rec);
  return DeviceHandle{resp.region};
}

void Session::free_device(DeviceHandle handle) {
  enter();
  channel_.call<Opcode::DeviceFree>({handle.value});
  std::erase_if(device_regions_, [&](const auto& entry) { return entry.first == handle; });
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::DeviceFree);
  rec.arg = handle.value;
  replay_.append(rec);
}

void Session::memcpy_h2d(DeviceHandle dst, size_t offset, std::span<const std::byte> src) {
  enter();
  if (src.empty()) {
    throw Error(Errc::InvalidArgument, "memcpy of zero bytes");
  }
  shadows_->flush_dirty();
  bulk_.push(Opcode::MemcpyH2D, dst.value, offset, src);
}

void Session::memcpy_d2h(std::span<std::byte> dst, DeviceHandle src, size_t offset) {
  enter();
  if (dst.empty()) {
    throw Error(Errc::InvalidArgument, "memcpy of zero bytes");
  }
  shadows_->flush_dirty();
  bulk_.pull(Opcode::MemcpyD2H, src.value, offset, dst);
}

StreamId Session::stream_create() {
  enter();
  auto resp = channel_.call<Opcode::StreamCreate>({});
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::StreamCreate);
  rec.result = resp.stream;
  replay_.append(rec);
  return StreamId{resp.stream};
}

void Session::stream_destroy(StreamId stream) {
  enter();
  channel_.call<Opcode::StreamDestroy>({stream.value});
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::StreamDestroy);
  rec.arg = stream.value;
  replay_.append(rec);
}

EventId Session::event_create() {
  enter();
  auto resp = channel_.call<Opcode::EventCreate>({});
  ReplayRecord rec;
  rec.opcode = static_cast<uint16_t>(Opcode::EventCreate);
  rec.result = resp.event;
  replay_.append(rec);
  return EventId{resp.event};
}

void Session::event_record(EventId event, StreamId stream) {
  enter();
  shadows_->flush_dirty();
  channel_.call<Opcode::EventRecord>({event.value, stream.value});
  if (std::find(recorded_events_.begin(), recorded_events_.end(), event) == recorded_events_.end()) {
    recorded_events_.push_back(event);
  }
}

device::EventStatus Session::event_query(EventId event) {
  enter();
  shadows_->flush_dirty();
  auto resp = channel_.call<Opcode::EventQuery>({event.value});
  return {resp.recorded != 0, resp.complete != 0};
}

void Session::launch(StreamId stream, std::string_view kernel, std::initializer_list<RegionRef> regions,
                     std::initializer_list<uint64_t> scalars, device::Grid grid) {
  launch(stream, kernel, std::span<const RegionRef>(regions.begin(), regions.size()),
         std::span<const uint64_t>(scalars.begin(), scalars.size()), grid);
}

void Session::launch(StreamId stream, std::string_view kernel, std::span<const RegionRef> regions,
                     std::span<const uint64_t> scalars, device::Grid grid) {
  enter();
  if (kernel.empty() || kernel.size() >= ipc::kMaxKernelName) {
    throw Error(Errc::UnknownKernel, "kernel name '" + std::string(kernel) + "' is empty or too long");
  }
  if (regions.size() > ipc::kMaxKernelRegions || scalars.size() > ipc::kMaxKernelScalars) {
    throw Error(Errc::InvalidArgument, "too many kernel arguments");
  }
  ipc::LaunchRequest req{};
  req.stream = stream.value;
  req.grid_blocks = grid.blocks;
  req.grid_threads = grid.threads;
  req.region_count = static_cast<uint8_t>(regions.size());
  req.scalar_count = static_cast<uint8_t>(scalars.size());
  std::memcpy(req.kernel, kernel.data(), kernel.size());
  for (size_t i = 0; i < regions.size(); ++i) {
    req.regions[i] = resolve(regions[i]);
  }
  std::copy(scalars.begin(), scalars.end(), req.scalars);
  shadows_->flush_dirty();
  channel_.call<Opcode::LaunchKernel>(req);
}

void Session::synchronize() {
  enter();
  shadows_->flush_dirty();
  channel_.call<Opcode::Synchronize>({});
}

void Session::nop(uint64_t value) {
  enter();
  channel_.call<Opcode::Nop>({value});
}

void Session::ping() {
  enter();
  channel_.call<Opcode::Ping>({});
}

std::string Session::dump_proxy_state() {
  enter();
  std::string buffer(size_t{64} << 10, '\0');
  for (;;) {
    auto resp = channel_.call<Opcode::StateDump>({reinterpret_cast<uint64_t>(buffer.data()), buffer.size()});
    if (resp.size <= buffer.size()) {
      buffer.resize(resp.size);
      return buffer;
    }
    buffer.assign(resp.size, '\0');
  }
}

void Session::quiesce() {
  channel_.flush();
  channel_.call<Opcode::Synchronize>({});
  shadows_->flush_dirty();
}

void Session::detach() {
  channel_.flush();
  channel_.unwatch();
  options_.pipeline_depth = channel_.depth();
  channel_ = ipc::ClientChannel();
  region_.reset();
  state_ = SessionState::Detached;
}

void Session::reattach() {
  attach_channel(options_.connect_timeout_ms);
  state_ = SessionState::Running;
}

void Session::replay(const ReplayRecord& rec) {
  const auto op = static_cast<Opcode>(rec.opcode);
  auto diverged = [&](const std::string& what) {
    return Error(Errc::ReplayDivergence, "replay of " + std::string(ipc::opcode_name(rec.opcode)) + ": " + what);
  };
  try {
    switch (op) {
      case Opcode::DeviceAlloc: {
        auto resp = channel_.call<Opcode::DeviceAlloc>({rec.kind, {}, rec.arg});
        if (resp.region != rec.result || resp.offset != rec.offset) {
          throw diverged("got region " + std::to_string(resp.region) + " at offset " + std::to_string(resp.offset) +
                         ", recorded region " + std::to_string(rec.result) + " at offset " +
                         std::to_string(rec.offset));
        }
        if (rec.kind == static_cast<uint8_t>(device::RegionKind::Managed)) {
          if (shadows_->next_address() != rec.shadow) {
            throw diverged("shadow address " + std::to_string(shadows_->next_address()) + ", recorded " +
                           std::to_string(rec.shadow));
          }
          shadows_->create_at(resp.region, rec.arg, rec.shadow);
        } else {
          device_regions_.emplace_back(DeviceHandle{resp.region}, rec.arg);
        }
        break;
      }
      case Opcode::DeviceFree:
        channel_.call<Opcode::DeviceFree>({rec.arg});
        if (shadows_->by_region(rec.arg) != nullptr) {
          shadows_->destroy(rec.arg);
        } else {
          std::erase_if(device_regions_, [&](const auto& entry) { return entry.first.value == rec.arg; });
        }
        break;
      case Opcode::StreamCreate: {
        auto resp = channel_.call<Opcode::StreamCreate>({});
        if (resp.stream != rec.result) {
          throw diverged("got stream " + std::to_string(resp.stream) + ", recorded " + std::to_string(rec.result));
        }
        break;
      }
      case Opcode::StreamDestroy:
        channel_.call<Opcode::StreamDestroy>({rec.arg});
        break;
      case Opcode::EventCreate: {
        auto resp = channel_.call<Opcode::EventCreate>({});
        if (resp.event != rec.result) {
          throw diverged("got event " + std::to_string(resp.event) + ", recorded " + std::to_string(rec.result));
        }
        break;
      }
      case Opcode::EventRecord:
        // Added by the checkpoint, not by the application: kept out of the log.
        channel_.call<Opcode::EventRecord>({rec.arg, kDefaultStream.value});
        recorded_events_.push_back(EventId{rec.arg});
        return;
      default:
        throw diverged("opcode is not a logged call");
    }
  } catch (const Error& e) {
    if (e.code() == Errc::ReplayDivergence || e.code() == Errc::AddressUnavailable) {
      throw;
    }
    throw diverged(std::string(errc_name(e.code())) + ": " + e.what());
  }
  replay_.append(rec);
}

ckpt::CkptReport Session::checkpoint(const std::string& path, const ckpt::Strategy& strategy) {
  enter();
  return engine_->checkpoint(path, strategy);
}

ckpt::CkptStatus Session::ckpt_status() {
  check_owner();
  auto status = engine_->status();
  reap_child_result();
  return status;
}

ckpt::CkptStatus Session::wait_checkpoint() {
  check_owner();
  auto status = engine_->wait();
  reap_child_result();
  return status;
}

void Session::post_control_result(uint32_t request_seq, Errc status, bool final, const ckpt::CkptReport& report) {
  if (!region_) {
    return;
  }
  auto& mailbox = region_->header().mailbox;
  const uint32_t count = mailbox.result_count.load(std::memory_order_relaxed);
  auto& slot = mailbox.results[count % ipc::kControlResultSlots];
  slot.request_seq = request_seq;
  slot.status = static_cast<int32_t>(status);
  slot.final = final ? 1 : 0;
  slot.pause_us = static_cast<uint64_t>(report.pause_s * 1e6);
  slot.total_us = static_cast<uint64_t>(report.total_s * 1e6);
  slot.image_bytes = report.image_bytes;
  mailbox.result_count.store(count + 1, std::memory_order_release);
}

void Session::reap_child_result() {
  if (control_pending_final_ == 0) {
    return;
  }
  auto status = engine_->peek();
  if (status.kind != ckpt::CkptStatus::Kind::LastResult) {
    return;
  }
  post_control_result(control_pending_final_, status.result, true, status.report);
  control_pending_final_ = 0;
}

void Session::poll_control() {
  if (in_control_ || !region_) {
    return;
  }
  in_control_ = true;
  struct Reset {
    bool& flag;
    ~Reset() { flag = false; }
  } reset{in_control_};

  if (control_pending_final_ != 0) {
    engine_->status();
    reap_child_result();
  }
  auto& mailbox = region_->header().mailbox;
  const uint32_t seq = mailbox.request_seq.load(std::memory_order_acquire);
  if (seq == mailbox.taken_seq.load(std::memory_order_relaxed)) {
    return;
  }
  mailbox.taken_seq.store(seq, std::memory_order_release);
  const ipc::ControlRequest request = mailbox.request;
  const std::string name(request.strategy, strnlen(request.strategy, sizeof(request.strategy)));
  const std::string path(request.path, strnlen(request.path, sizeof(request.path)));
  try {
    auto strategy = ckpt::Strategy::parse(name, request.workers != 0 ? std::optional<unsigned>(request.workers)
                                                                       : std::nullopt);
    auto report = engine_->checkpoint(path, strategy);
    if (report.complete) {
      post_control_result(seq, Errc::Ok, true, report);
    } else {
      post_control_result(seq, Errc::Ok, false, report);
      control_pending_final_ = seq;
    }
  } catch (const Error& e) {
    post_control_result(seq, e.code(), true, {});
  }
}

void Session::close() {
  if (closed_) {
    return;
  }
  check_owner();
  closed_ = true;
  std::exception_ptr first;
  if (engine_) {
    try {
      engine_->wait();
      reap_child_result();
    } catch (...) {
      first = std::current_exception();
    }
  }
  if (state_ == SessionState::Running) {
    try {
      shadows_->check_violation();
    } catch (...) {
      if (!first) {
        first = std::current_exception();
      }
    }
    try {
      channel_.flush();
    } catch (...) {
      if (!first) {
        first = std::current_exception();
      }
    }
    try {
      channel_.call<Opcode::Shutdown>({});
    } catch (...) {
      if (!first) {
        first = std::current_exception();
      }
    }
  }
  channel_ = ipc::ClientChannel();
  region_.reset();
  state_ = SessionState::Detached;
  if (first) {
    std::rethrow_exception(first);
  }
}

void Session::abandon() {
  closed_ = true;
  channel_ = ipc::ClientChannel();
  region_.reset();
  state_ = SessionState::Detached;
}

}  // namespace crum::client
