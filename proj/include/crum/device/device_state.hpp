#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <variant>
#include <vector>

#include "crum/device/types.hpp"

namespace crum::device {

struct DeviceConfig {
  uint64_t arena_bytes = uint64_t{256} << 20;
  uint64_t page_size = 4096;

  // Honors CRUM_ARENA_BYTES; page size is the platform page size.
  static DeviceConfig from_env();
};

// Per-process driver state. The simulated driver is non-reentrant: once a
// context has opened a device, no further device can be opened from it, even
// after the first one is destroyed. The proxy process uses process(); tests
// construct their own contexts to stand in for freshly spawned processes.
class DriverContext {
 public:
  DriverContext() = default;
  DriverContext(const DriverContext&) = delete;
  DriverContext& operator=(const DriverContext&) = delete;

  static DriverContext& process();

  bool initialized() const { return initialized_; }

 private:
  friend class DeviceState;
  bool initialized_ = false;
  SessionEpoch epoch_ = 0;
};

// Owns the arena mapping. The arena is a memfd named "crum-arena" so tests can
// find (or fail to find) it in /proc/<pid>/maps.
class Arena {
 public:
  explicit Arena(uint64_t capacity);
  ~Arena();
  Arena(Arena&& other) noexcept;
  Arena& operator=(Arena&& other) noexcept;
  Arena(const Arena&) = delete;
  Arena& operator=(const Arena&) = delete;

  std::byte* data() const { return base_; }
  uint64_t capacity() const { return capacity_; }

  // Returns the backing pages of [offset, offset + length) to the system.
  void release(uint64_t offset, uint64_t length);

 private:
  int fd_ = -1;
  std::byte* base_ = nullptr;
  uint64_t capacity_ = 0;
};

class DeviceState {
 public:
  // device_init: fails with AlreadyInitialized if ctx already opened a device.
  static DeviceState init(DriverContext& ctx, const DeviceConfig& config = {});

  DeviceState(DeviceState&&) noexcept = default;
  DeviceState& operator=(DeviceState&&) noexcept = default;

  SessionEpoch epoch() const { return epoch_; }
  bool initialized() const { return initialized_; }
  uint64_t capacity() const { return arena_.capacity(); }
  uint64_t page_size() const { return page_size_; }
  uint64_t alloc_cursor() const { return alloc_cursor_; }
  const std::byte* arena_base() const { return arena_.data(); }

  Allocation alloc(RegionKind kind, uint64_t length);
  void free(RegionId id);
  const Allocation& allocation(RegionId id) const;
  const std::map<RegionId, Allocation>& allocations() const { return allocations_; }
  std::span<std::byte> region_bytes(RegionId id);

  StreamId stream_create();
  void stream_destroy(StreamId id);
  std::vector<StreamId> streams() const;

  EventId event_create();
  void event_record(EventId event, StreamId stream);
  EventStatus event_query(EventId event) const;
  std::vector<EventId> events() const;

  void launch_kernel(StreamId stream, KernelTask task);
  size_t pending_tasks() const;

  // Drains every stream: ascending StreamId, round-robin one task at a time.
  // Every queued task is consumed; the first failure is rethrown afterwards
  // naming its stream and per-stream task index.
  void synchronize();

 private:
  struct EventMarker {
    EventId event;
  };
  using StreamEntry = std::variant<KernelTask, EventMarker>;

  struct Stream {
    std::deque<StreamEntry> fifo;
    uint64_t executed = 0;
    bool destroyed = false;
  };

  struct EventState {
    bool recorded = false;
    bool complete = false;
    StreamId stream;
  };

  DeviceState(Arena arena, uint64_t page_size, SessionEpoch epoch);

  void require_initialized() const;
  Stream& live_stream(StreamId id);
  void execute(const KernelTask& task);

  Arena arena_;
  uint64_t page_size_ = 4096;
  uint64_t alloc_cursor_ = 0;
  uint64_t allocation_count_ = 0;
  std::map<RegionId, Allocation> allocations_;
  std::map<StreamId, Stream> streams_;
  uint64_t stream_count_ = 0;
  std::map<EventId, EventState> events_;
  uint64_t event_count_ = 0;
  SessionEpoch epoch_ = 0;
  bool initialized_ = false;
};

}  // namespace crum::device
