#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "crum/error.hpp"
#include "crum/ipc/layout.hpp"
#include "crum/ipc/opcodes.hpp"
#include "crum/ipc/shared_region.hpp"
#include "crum/ipc/wait.hpp"

namespace crum::ipc {

struct PendingTicket {
  uint64_t seq = 0;
  Opcode opcode{};
};

using PayloadView = std::span<const std::byte, kPayloadBytes>;
using PayloadBuffer = std::array<std::byte, kPayloadBytes>;

// Producer end of the call ring (application side). Single-threaded; the
// try_* members are noexcept and async-signal-safe so the shadow fault handler
// can use them between the session thread's own channel operations.
class ClientChannel {
 public:
  ClientChannel() = default;
  explicit ClientChannel(const SharedRegion& region);

  void watch_proxy(pid_t proxy_pid);
  void unwatch() { peer_.close(); }

  bool attached() const { return header_ != nullptr; }
  uint32_t depth() const { return depth_; }
  void set_depth(uint32_t depth);
  uint64_t last_sent() const { return next_seq_ - 1; }
  uint64_t unreplied() const;
  BulkMode bulk_mode() const { return static_cast<BulkMode>(header_->bulk_mode); }
  std::span<std::byte> scratch() const { return scratch_; }
  bool proxy_gone() const noexcept;

  // Two halves of send_call. reserve() waits for pipeline room and fills the
  // slot; publish() makes it visible to the proxy. Split so tests can stall a
  // producer between the two. A non-urgent publish may leave the doorbell
  // for a later send or wait to ring.
  Errc try_reserve(uint16_t opcode, bool blocking, PayloadView payload, uint64_t bulk_len,
                   uint64_t* seq_out) noexcept;
  void publish(uint64_t seq, bool urgent = true) noexcept;

  Errc try_send(uint16_t opcode, bool blocking, PayloadView payload, uint64_t bulk_len,
                uint64_t* seq_out) noexcept;
  Errc try_wait_reply(uint64_t seq, int32_t* status, std::span<std::byte, kPayloadBytes> result) noexcept;
  Errc try_wait_completed(uint64_t seq) noexcept;

  // Blocking round trip without flushing the pipeline first (fault handler path).
  Errc try_call(uint16_t opcode, PayloadView payload, uint64_t bulk_len, int32_t* status,
                std::span<std::byte, kPayloadBytes> result) noexcept;

  PendingTicket send_call(Opcode opcode, bool blocking, PayloadView payload, uint64_t bulk_len = 0);

  // Waits for every sent call; rethrows the first pipelined failure as
  // DeferredCallError.
  void flush();

  // Typed stub for any opcode in opcodes.def. Blocking calls flush the
  // pipeline first, then wait for their own reply and throw its status.
  template <Opcode Op>
  typename OpTraits<Op>::Response call(const typename OpTraits<Op>::Request& request, uint64_t bulk_len = 0) {
    return invoke<Op>(request, OpTraits<Op>::blocking, bulk_len);
  }

  template <Opcode Op>
  typename OpTraits<Op>::Response invoke(const typename OpTraits<Op>::Request& request, bool blocking,
                                          uint64_t bulk_len = 0) {
    PayloadBuffer payload;
    encode_payload(request, std::span<std::byte, kPayloadBytes>(payload));
    if (!blocking) {
      send_call(Op, false, payload, bulk_len);
      return {};
    }
    flush();
    PayloadBuffer result;
    round_trip(Op, payload, bulk_len, result);
    return decode_payload<typename OpTraits<Op>::Response>(std::span<const std::byte, kPayloadBytes>(result));
  }

 private:
  void round_trip(Opcode opcode, PayloadView payload, uint64_t bulk_len, PayloadBuffer& result);

  template <class Pred>
  Errc wait_for(Pred&& pred, uint64_t target) noexcept;
  void ring() noexcept;

  ChannelHeader* header_ = nullptr;
  CallMessage* slots_ = nullptr;
  std::span<std::byte> scratch_;
  uint32_t mask_ = 0;
  uint32_t depth_ = 1;
  uint64_t next_seq_ = 1;
  uint32_t unsignaled_ = 0;  // published since the last doorbell
  PeerWatch peer_;
};

// Consumer end (proxy side).
class ProxyChannel {
 public:
  ProxyChannel() = default;
  explicit ProxyChannel(const SharedRegion& region);

  // Next published message, or nullptr if none arrived within timeout_ms.
  // The slot stays valid until the message is completed.
  const CallMessage* next(int timeout_ms) noexcept;

  // Blocking calls: writes the reply slot, then completes.
  void reply(const CallMessage& msg, Errc status, std::span<const std::byte> result) noexcept;
  // Non-blocking calls: a failure is parked in the deferred-error slot.
  void complete(const CallMessage& msg, Errc status) noexcept;

  uint64_t last_consumed() const { return head_; }
  ChannelHeader& header() const { return *header_; }

 private:
  void finish(uint64_t seq) noexcept;

  ChannelHeader* header_ = nullptr;
  CallMessage* slots_ = nullptr;
  uint32_t mask_ = 0;
  uint64_t head_ = 0;
};

}  // namespace crum::ipc
