#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>

#include "crum/ipc/messages.hpp"

// Byte layout of the shared region between launcher, application and proxy:
//
//   [ChannelHeader][CallMessage x slot_count][scratch buffer]
//
// Byte 0 is the layout version; peers refuse to attach to any other version.

namespace crum::ipc {

inline constexpr uint8_t kLayoutVersion = 1;
inline constexpr uint32_t kChannelMagic = 0x4d555243;  // "CRUM"

enum class BulkMode : uint8_t { SingleCopy = 0, Scratch = 1 };

enum class ProxyState : uint32_t { Starting = 0, Ready = 1, Exited = 2 };

struct alignas(64) CallMessage {
  uint64_t seq;
  uint16_t opcode;
  uint8_t blocking;
  uint8_t reserved[5];
  uint64_t bulk_len;
  std::array<std::byte, kPayloadBytes> payload;
};

struct ReplySlot {
  std::atomic<uint64_t> seq;
  int32_t status;
  uint32_t reserved;
  std::array<std::byte, kPayloadBytes> result;
};

// First failure among pipelined calls since the last flush.
struct DeferredErrorSlot {
  std::atomic<uint32_t> present;
  uint16_t opcode;
  uint16_t reserved;
  int32_t status;
  uint32_t reserved2;
  uint64_t seq;
};

// Written only by the proxy; read by tests and the launcher.
struct ProxyStats {
  std::atomic<uint64_t> requests;
  std::atomic<uint64_t> completions;
  std::atomic<uint64_t> replies;
  std::atomic<uint64_t> order_hash;  // FNV-1a over consumed seq numbers
  std::atomic<uint64_t> nop_count;
  std::atomic<uint64_t> nop_sum;
  std::atomic<uint64_t> bulk_bytes;
  std::atomic<uint64_t> per_opcode[32];
};

// Checkpoint requests relayed from the launcher's control socket. The client
// polls request_seq at every API entry.
struct ControlRequest {
  char strategy[16];
  uint32_t workers;
  uint32_t reserved;
  char path[512];
};

struct ControlResult {
  uint32_t request_seq;
  int32_t status;  // crum::Errc
  uint8_t final;   // 0: forked child still writing
  uint8_t reserved[7];
  uint64_t pause_us;
  uint64_t total_us;
  uint64_t image_bytes;
};

inline constexpr uint32_t kControlResultSlots = 16;

struct ControlMailbox {
  std::atomic<uint32_t> request_seq;
  std::atomic<uint32_t> taken_seq;
  ControlRequest request;
  std::atomic<uint32_t> result_count;
  uint32_t reserved;
  ControlResult results[kControlResultSlots];
};

struct ChannelHeader {
  uint8_t layout_version;
  uint8_t bulk_mode;
  uint16_t reserved0;
  uint32_t magic;
  uint32_t slot_count;
  uint32_t default_depth;
  uint64_t slots_offset;
  uint64_t scratch_offset;
  uint64_t scratch_bytes;
  uint64_t total_bytes;
  std::atomic<int32_t> proxy_pid;
  std::atomic<int32_t> client_pid;
  std::atomic<uint32_t> proxy_state;
  std::atomic<uint32_t> client_attached;

  // Producer side (application).
  alignas(64) std::atomic<uint64_t> tail;  // last published seq
  std::atomic<uint32_t> ring_doorbell;
  std::atomic<uint32_t> proxy_waiting;

  // Consumer side (proxy).
  alignas(64) std::atomic<uint64_t> head;       // last consumed seq
  std::atomic<uint64_t> completed;              // last completed seq
  std::atomic<uint32_t> completion_doorbell;
  std::atomic<uint32_t> client_waiting;
  std::atomic<uint64_t> client_wait_target;

  alignas(64) ReplySlot reply;
  DeferredErrorSlot deferred;

  alignas(64) ProxyStats stats;
  alignas(64) ControlMailbox mailbox;
};

static_assert(std::atomic<uint64_t>::is_always_lock_free);
static_assert(std::atomic<uint32_t>::is_always_lock_free);
static_assert(sizeof(std::atomic<uint32_t>) == sizeof(uint32_t));
static_assert(offsetof(ChannelHeader, layout_version) == 0);
static_assert(sizeof(CallMessage) == 320);

}  // namespace crum::ipc
