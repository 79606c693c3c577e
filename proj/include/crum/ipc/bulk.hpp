#pragma once

#include <sys/types.h>

#include <cstddef>
#include <cstdint>
#include <span>

#include "crum/error.hpp"
#include "crum/ipc/channel.hpp"

namespace crum::ipc {

// Proxy side of a bulk transfer: copy straight between our memory and the
// client's address space. Loops on partial progress; a transfer that stops
// moving reports PartialTransfer, a vanished client RemoteGone, an unmapped
// client address BadAddress. `moved` receives the bytes actually copied.
Errc remote_write(pid_t pid, uint64_t remote_addr, std::span<const std::byte> src, uint64_t* moved) noexcept;
Errc remote_read(pid_t pid, uint64_t remote_addr, std::span<std::byte> dst, uint64_t* moved) noexcept;

// Client side. Each transfer is one CopyRequest-shaped call per chunk; in
// single-copy mode there is one chunk and the proxy touches our memory
// directly, in scratch mode the data is staged through the shared scratch
// buffer and we do the second copy.
class BulkClient {
 public:
  explicit BulkClient(ClientChannel& channel) : channel_(&channel) {}

  // Device -> client (UvmRead, MemcpyD2H). Always waits.
  Errc try_pull(Opcode op, uint64_t region, uint64_t offset, std::span<std::byte> dst) noexcept;
  // Client -> device (UvmWrite, MemcpyH2D). With wait=false and single-copy
  // mode the call is pipelined and `src` must stay untouched until the next
  // flush; scratch mode always waits per chunk.
  Errc try_push(Opcode op, uint64_t region, uint64_t offset, std::span<const std::byte> src, bool wait) noexcept;

  // Throwing forms; flush the pipeline first so earlier failures surface.
  void pull(Opcode op, uint64_t region, uint64_t offset, std::span<std::byte> dst);
  void push(Opcode op, uint64_t region, uint64_t offset, std::span<const std::byte> src, bool wait = true);

 private:
  Errc call_chunk(Opcode op, uint64_t region, uint64_t offset, uint64_t length, uint64_t host_addr, bool wait) noexcept;

  ClientChannel* channel_;
};

}  // namespace crum::ipc
