#pragma once

#include <sys/types.h>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "crum/ckpt/strategy.hpp"
#include "crum/client/replay_log.hpp"
#include "crum/device/types.hpp"
#include "crum/ipc/bulk.hpp"
#include "crum/ipc/channel.hpp"
#include "crum/ipc/shared_region.hpp"
#include "crum/shadow/shadow.hpp"

namespace crum::ckpt {
class Engine;
}

namespace crum::client {

using DeviceHandle = device::RegionId;
using device::EventId;
using device::StreamId;
using device::kDefaultStream;

enum class SessionState { Running, Quiesced, Detached };
enum class SessionMode { Normal, Verified };

// A kernel argument: a managed allocation (by any address inside it) or a
// device allocation.
class RegionRef {
 public:
  RegionRef(const void* managed) : value_(reinterpret_cast<uintptr_t>(managed)) {}
  RegionRef(DeviceHandle device) : value_(device) {}
  const std::variant<uintptr_t, DeviceHandle>& value() const { return value_; }

 private:
  std::variant<uintptr_t, DeviceHandle> value_;
};

struct SessionOptions {
  shadow::ShadowConfig shadow;
  std::optional<uint32_t> pipeline_depth;
  // How long to wait for the proxy to report ready.
  int connect_timeout_ms = 10000;
};

using SaveHook = std::function<std::vector<std::byte>()>;
using ResumeHook = std::function<void(std::span<const std::byte>)>;

class Session {
 public:
  // Attaches to the proxy serving `shm_name`. Throws NoProxy or VersionMismatch.
  static std::unique_ptr<Session> open(const std::string& shm_name, SessionOptions options = {});
  // crum_init: CRUM_SHM_NAME (or /crum-<CRUM_SESSION_ID>), honours
  // CRUM_RESTART by restoring before returning.
  static std::unique_ptr<Session> from_env();

  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  SessionState state() const { return state_; }
  SessionMode mode() const;
  uint64_t epoch() const { return epoch_; }
  pid_t proxy_pid() const { return proxy_pid_; }
  uint64_t page_size() const { return shadows_->config().page_size; }
  uint64_t arena_capacity() const { return arena_capacity_; }

  void set_save_hook(SaveHook hook) { save_hook_ = std::move(hook); }
  // Installing a resume hook after a restore delivers the blob immediately.
  void set_resume_hook(ResumeHook hook);
  // App-state blob recovered by restore, if any.
  const std::optional<std::vector<std::byte>>& restored() const { return restored_blob_; }

  void* malloc_managed(size_t length);
  void free_managed(void* shadow);
  DeviceHandle malloc_device(size_t length);
  void free_device(DeviceHandle handle);
  void memcpy_h2d(DeviceHandle dst, size_t offset, std::span<const std::byte> src);
  void memcpy_d2h(std::span<std::byte> dst, DeviceHandle src, size_t offset);

  StreamId stream_create();
  void stream_destroy(StreamId stream);
  EventId event_create();
  void event_record(EventId event, StreamId stream = kDefaultStream);
  device::EventStatus event_query(EventId event);

  void launch(StreamId stream, std::string_view kernel, std::initializer_list<RegionRef> regions,
              std::initializer_list<uint64_t> scalars = {}, device::Grid grid = {});
  void launch(StreamId stream, std::string_view kernel, std::span<const RegionRef> regions,
              std::span<const uint64_t> scalars, device::Grid grid = {});
  void synchronize();

  // Pipelined no-op and blocking round trip, for channel measurements.
  void nop(uint64_t value);
  void ping();

  // JSON dump of the proxy's observable state (allocations, streams,
  // events, per-region CRC32).
  std::string dump_proxy_state();

  void set_pipeline_depth(uint32_t depth) { channel_.set_depth(depth); }
  uint32_t pipeline_depth() const { return channel_.depth(); }

  ckpt::CkptReport checkpoint(const std::string& path, const ckpt::Strategy& strategy);
  ckpt::CkptStatus ckpt_status();
  // Blocks until a running FORKED child finishes; returns its final report.
  ckpt::CkptStatus wait_checkpoint();

  // Handles a checkpoint request from the launcher, if one is pending. Every
  // API entry does this too.
  void poll_control();

  // Orderly end: waits for a checkpoint child, surfaces a pending cycle
  // violation, sends Shutdown.
  void close();
  // Crash stand-in: drop the channel without telling the proxy.
  void abandon();

  // Runtime internals used by the checkpoint engine and tests.
  shadow::ShadowTable& shadows() { return *shadows_; }
  const ReplayLog& replay_log() const { return replay_; }
  ipc::ClientChannel& channel() { return channel_; }
  ipc::BulkClient& bulk() { return bulk_; }
  const ipc::ChannelHeader& header() const;
  const std::vector<std::pair<DeviceHandle, uint64_t>>& device_regions() const { return device_regions_; }
  // Events recorded at least once. Their state is not in the replay log; a
  // checkpoint adds one EventRecord per event so restore can re-create it.
  const std::vector<EventId>& recorded_events() const { return recorded_events_; }
  std::vector<std::byte> save_app_state() const;
  void deliver_app_state(std::vector<std::byte> blob);
  void quiesce();  // flush pipeline, synchronize, flush dirty pages
  void detach();
  void reattach();
  void set_state(SessionState state) { state_ = state; }
  // Replays one record against the proxy, checking it reproduces its result.
  void replay(const ReplayRecord& record);

 private:
  class Transport;

  Session(const std::string& shm_name, SessionOptions options);

  void enter();
  void check_owner() const;
  void attach_channel(int timeout_ms);
  uint64_t resolve(const RegionRef& ref);
  void post_control_result(uint32_t request_seq, Errc status, bool final, const ckpt::CkptReport& report);
  void reap_child_result();
  void finish();

  std::string shm_name_;
  SessionOptions options_;
  std::optional<ipc::SharedRegion> region_;
  ipc::ClientChannel channel_;
  ipc::BulkClient bulk_{channel_};
  std::unique_ptr<Transport> transport_;
  std::unique_ptr<shadow::ShadowTable> shadows_;
  std::unique_ptr<ckpt::Engine> engine_;
  ReplayLog replay_;
  std::vector<std::pair<DeviceHandle, uint64_t>> device_regions_;  // live device allocations, length
  std::vector<EventId> recorded_events_;
  SessionState state_ = SessionState::Detached;
  std::thread::id owner_;
  pid_t proxy_pid_ = 0;
  uint64_t epoch_ = 0;
  uint64_t arena_capacity_ = 0;
  SaveHook save_hook_;
  ResumeHook resume_hook_;
  std::optional<std::vector<std::byte>> restored_blob_;
  uint32_t control_pending_final_ = 0;  // request seq awaiting a FORKED child
  bool closed_ = false;
  bool in_control_ = false;
};

}  // namespace crum::client
