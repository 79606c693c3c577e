#include "crum/device/device_state.hpp"

#include <fcntl.h>
#include <linux/falloc.h>
#include <sys/mman.h>
#include <unistd.h>

#include <optional>
#include <string>
#include <utility>

#include "crum/device/kernels.hpp"
#include "crum/env.hpp"
#include "crum/error.hpp"

namespace crum::device {

namespace {

uint64_t round_up(uint64_t value, uint64_t align) { return (value + align - 1) / align * align; }

}  // namespace

DeviceConfig DeviceConfig::from_env() {
  DeviceConfig config;
  config.arena_bytes = env::get_u64_or(env::kArenaBytes, config.arena_bytes);
  config.page_size = static_cast<uint64_t>(sysconf(_SC_PAGESIZE));
  return config;
}

DriverContext& DriverContext::process() {
  static DriverContext instance;
  return instance;
}

Arena::Arena(uint64_t capacity) : capacity_(capacity) {
  if (capacity == 0) {
    throw Error(Errc::InvalidArgument, "arena capacity must be positive");
  }
  fd_ = memfd_create("crum-arena", MFD_CLOEXEC);
  if (fd_ < 0) {
    throw_errno(Errc::SystemError, "memfd_create");
  }
  if (ftruncate(fd_, static_cast<off_t>(capacity)) != 0) {
    close(fd_);
    throw_errno(Errc::SystemError, "ftruncate arena");
  }
  void* base = mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_NORESERVE, fd_, 0);
  if (base == MAP_FAILED) {
    close(fd_);
    throw_errno(Errc::SystemError, "mmap arena");
  }
  base_ = static_cast<std::byte*>(base);
}

Arena::~Arena() {
  if (base_ != nullptr) {
    munmap(base_, capacity_);
  }
  if (fd_ >= 0) {
    close(fd_);
  }
}

Arena::Arena(Arena&& other) noexcept
    : fd_(std::exchange(other.fd_, -1)),
      base_(std::exchange(other.base_, nullptr)),
      capacity_(std::exchange(other.capacity_, 0)) {}

Arena& Arena::operator=(Arena&& other) noexcept {
  if (this != &other) {
    this->~Arena();
    fd_ = std::exchange(other.fd_, -1);
    base_ = std::exchange(other.base_, nullptr);
    capacity_ = std::exchange(other.capacity_, 0);
  }
  return *this;
}

void Arena::release(uint64_t offset, uint64_t length) {
  // Best effort; the bytes are never read again.
  fallocate(fd_, FALLOC_FL_PUNCH_HOLE | FALLOC_FL_KEEP_SIZE, static_cast<off_t>(offset),
            static_cast<off_t>(length));
}

DeviceState::DeviceState(Arena arena, uint64_t page_size, SessionEpoch epoch)
    : arena_(std::move(arena)), page_size_(page_size), epoch_(epoch), initialized_(true) {
  streams_.emplace(kDefaultStream, Stream{});
}

DeviceState DeviceState::init(DriverContext& ctx, const DeviceConfig& config) {
  if (ctx.initialized_) {
    throw Error(Errc::AlreadyInitialized, "device already initialized in this process");
  }
  if (config.page_size == 0 || (config.page_size & (config.page_size - 1)) != 0) {
    throw Error(Errc::InvalidArgument, "page size must be a power of two");
  }
  Arena arena(round_up(config.arena_bytes, config.page_size));
  ctx.initialized_ = true;
  ctx.epoch_ += 1;
  return DeviceState(std::move(arena), config.page_size, ctx.epoch_);
}

void DeviceState::require_initialized() const {
  if (!initialized_) {
    throw Error(Errc::NotInitialized);
  }
}

Allocation DeviceState::alloc(RegionKind kind, uint64_t length) {
  require_initialized();
  if (length == 0) {
    throw Error(Errc::InvalidArgument, "allocation length must be positive");
  }
  const uint64_t aligned = round_up(length, page_size_);
  if (aligned < length || alloc_cursor_ + aligned > arena_.capacity() || alloc_cursor_ + aligned < alloc_cursor_) {
    throw Error(Errc::OutOfArena, "allocation of " + std::to_string(length) + " bytes exceeds arena (" +
                                      std::to_string(arena_.capacity() - alloc_cursor_) + " bytes left)");
  }
  Allocation a{RegionId{++allocation_count_}, kind, alloc_cursor_, length};
  alloc_cursor_ += aligned;
  allocations_.emplace(a.id, a);
  return a;
}

void DeviceState::free(RegionId id) {
  require_initialized();
  auto it = allocations_.find(id);
  if (it == allocations_.end()) {
    throw Error(Errc::UnknownRegion, "free of unknown region " + std::to_string(id.value));
  }
  arena_.release(it->second.offset, round_up(it->second.length, page_size_));
  allocations_.erase(it);
}

const Allocation& DeviceState::allocation(RegionId id) const {
  auto it = allocations_.find(id);
  if (it == allocations_.end()) {
    throw Error(Errc::UnknownRegion, "unknown region " + std::to_string(id.value));
  }
  return it->second;
}

std::span<std::byte> DeviceState::region_bytes(RegionId id) {
  const auto& a = allocation(id);
  return {arena_.data() + a.offset, a.length};
}

StreamId DeviceState::stream_create() {
  require_initialized();
  StreamId id{++stream_count_};
  streams_.emplace(id, Stream{});
  return id;
}

DeviceState::Stream& DeviceState::live_stream(StreamId id) {
  auto it = streams_.find(id);
  if (it == streams_.end() || it->second.destroyed) {
    throw Error(Errc::UnknownStream, "unknown stream " + std::to_string(id.value));
  }
  return it->second;
}

void DeviceState::stream_destroy(StreamId id) {
  require_initialized();
  if (id == kDefaultStream) {
    throw Error(Errc::InvalidArgument, "the default stream cannot be destroyed");
  }
  auto& stream = live_stream(id);
  if (stream.fifo.empty()) {
    streams_.erase(id);
  } else {
    // Pending work still runs at the next synchronize.
    stream.destroyed = true;
  }
}

std::vector<StreamId> DeviceState::streams() const {
  std::vector<StreamId> out;
  for (const auto& [id, stream] : streams_) {
    if (!stream.destroyed) {
      out.push_back(id);
    }
  }
  return out;
}

EventId DeviceState::event_create() {
  require_initialized();
  EventId id{++event_count_};
  events_.emplace(id, EventState{});
  return id;
}

void DeviceState::event_record(EventId event, StreamId stream) {
  require_initialized();
  auto it = events_.find(event);
  if (it == events_.end()) {
    throw Error(Errc::UnknownEvent, "unknown event " + std::to_string(event.value));
  }
  auto& s = live_stream(stream);
  it->second = EventState{true, false, stream};
  s.fifo.emplace_back(EventMarker{event});
}

EventStatus DeviceState::event_query(EventId event) const {
  auto it = events_.find(event);
  if (it == events_.end()) {
    throw Error(Errc::UnknownEvent, "unknown event " + std::to_string(event.value));
  }
  return {it->second.recorded, it->second.complete};
}

std::vector<EventId> DeviceState::events() const {
  std::vector<EventId> out;
  for (const auto& [id, state] : events_) {
    out.push_back(id);
  }
  return out;
}

void DeviceState::launch_kernel(StreamId stream, KernelTask task) {
  require_initialized();
  auto& s = live_stream(stream);
  const KernelSpec* spec = find_kernel(task.kernel_name);
  if (spec == nullptr) {
    throw Error(Errc::UnknownKernel, "unknown kernel '" + task.kernel_name + "'");
  }
  if (task.region_args.size() != spec->region_count || task.scalar_args.size() != spec->scalar_count) {
    throw Error(Errc::InvalidArgument, "kernel '" + task.kernel_name + "' takes " +
                                           std::to_string(spec->region_count) + " regions and " +
                                           std::to_string(spec->scalar_count) + " scalars");
  }
  if (task.grid.blocks == 0 || task.grid.threads == 0) {
    throw Error(Errc::InvalidArgument, "grid dimensions must be positive");
  }
  for (RegionId id : task.region_args) {
    allocation(id);
  }
  s.fifo.emplace_back(std::move(task));
}

size_t DeviceState::pending_tasks() const {
  size_t n = 0;
  for (const auto& [id, stream] : streams_) {
    n += stream.fifo.size();
  }
  return n;
}

void DeviceState::execute(const KernelTask& task) {
  const KernelSpec* spec = find_kernel(task.kernel_name);
  if (spec == nullptr) {
    throw Error(Errc::UnknownKernel, "unknown kernel '" + task.kernel_name + "'");
  }
  std::vector<std::span<std::byte>> regions;
  regions.reserve(task.region_args.size());
  for (RegionId id : task.region_args) {
    regions.push_back(region_bytes(id));
  }
  spec->fn(KernelArgs{regions, task.scalar_args, task.grid});
}

void DeviceState::synchronize() {
  require_initialized();
  std::optional<Error> first_error;
  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (auto& [id, stream] : streams_) {
      if (stream.fifo.empty()) {
        continue;
      }
      progressed = true;
      StreamEntry entry = std::move(stream.fifo.front());
      stream.fifo.pop_front();
      const uint64_t index = stream.executed++;
      if (auto* marker = std::get_if<EventMarker>(&entry)) {
        auto ev = events_.find(marker->event);
        if (ev != events_.end()) {
          ev->second.complete = true;
        }
        continue;
      }
      try {
        execute(std::get<KernelTask>(entry));
      } catch (const Error& e) {
        if (!first_error) {
          first_error.emplace(e.code(), "stream " + std::to_string(id.value) + " task " +
                                            std::to_string(index) + ": " + e.what());
        }
      }
    }
  }
  std::erase_if(streams_, [](const auto& kv) { return kv.second.destroyed; });
  if (first_error) {
    throw *first_error;
  }
}

}  // namespace crum::device
