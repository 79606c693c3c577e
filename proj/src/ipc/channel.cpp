#include "crum/ipc/channel.hpp"

#include <unistd.h>

#include <cstring>

namespace crum::ipc {

namespace {

constexpr int kWaitSliceMs = 10;
constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#endif
}

void check_depth(uint32_t depth, uint32_t slots) {
  if (depth == 0 || depth > slots) {
    throw Error(Errc::InvalidArgument,
                "pipeline depth " + std::to_string(depth) + " outside [1, " + std::to_string(slots) + "]");
  }
}

}  // namespace

ClientChannel::ClientChannel(const SharedRegion& region)
    : header_(&region.header()),
      slots_(region.slots()),
      scratch_(region.scratch()),
      mask_(region.header().slot_count - 1),
      depth_(region.header().default_depth) {
  next_seq_ = header_->tail.load(std::memory_order_acquire) + 1;
}

void ClientChannel::watch_proxy(pid_t proxy_pid) { peer_ = PeerWatch(proxy_pid); }

void ClientChannel::set_depth(uint32_t depth) {
  if (header_ == nullptr) {
    throw Error(Errc::ChannelClosed, "set_depth on a detached channel");
  }
  check_depth(depth, header_->slot_count);
  depth_ = depth;
}

uint64_t ClientChannel::unreplied() const {
  if (header_ == nullptr) {
    return 0;
  }
  return last_sent() - header_->completed.load(std::memory_order_acquire);
}

bool ClientChannel::proxy_gone() const noexcept {
  if (header_ == nullptr) {
    return true;
  }
  if (header_->proxy_state.load(std::memory_order_acquire) == static_cast<uint32_t>(ProxyState::Exited)) {
    return true;
  }
  return peer_.watching() && !peer_.alive();
}

template <class Pred>
Errc ClientChannel::wait_for(Pred&& pred, uint64_t target) noexcept {
  if (header_ == nullptr) {
    return Errc::ChannelClosed;
  }
  if (unsignaled_ != 0 && !pred()) {
    ring();
  }
  for (int i = 0, n = spin_budget(); i < n; ++i) {
    if (pred()) {
      return Errc::Ok;
    }
    cpu_relax();
  }
  for (;;) {
    const uint32_t bell = header_->completion_doorbell.load(std::memory_order_acquire);
    if (pred()) {
      return Errc::Ok;
    }
    header_->client_wait_target.store(target, std::memory_order_seq_cst);
    header_->client_waiting.store(1, std::memory_order_seq_cst);
    if (!pred()) {
      futex_wait(header_->completion_doorbell, bell, kWaitSliceMs);
    }
    header_->client_waiting.store(0, std::memory_order_relaxed);
    if (pred()) {
      return Errc::Ok;
    }
    if (proxy_gone()) {
      return Errc::ChannelClosed;
    }
  }
}

Errc ClientChannel::try_reserve(uint16_t opcode, bool blocking, PayloadView payload, uint64_t bulk_len,
                                uint64_t* seq_out) noexcept {
  if (header_ == nullptr) {
    return Errc::ChannelClosed;
  }
  const uint64_t seq = next_seq_;
  // Room for seq means at most depth-1 calls still outstanding.
  const uint64_t need = seq > depth_ ? seq - depth_ : 0;
  Errc rc = wait_for([&] { return header_->completed.load(std::memory_order_seq_cst) >= need; }, need);
  if (rc != Errc::Ok) {
    return rc;
  }
  CallMessage& slot = slots_[seq & mask_];
  slot.seq = seq;
  slot.opcode = opcode;
  slot.blocking = blocking ? 1 : 0;
  std::memset(slot.reserved, 0, sizeof(slot.reserved));
  slot.bulk_len = bulk_len;
  std::memcpy(slot.payload.data(), payload.data(), kPayloadBytes);
  next_seq_ = seq + 1;
  *seq_out = seq;
  return Errc::Ok;
}

void ClientChannel::publish(uint64_t seq, bool urgent) noexcept {
  header_->tail.store(seq, std::memory_order_seq_cst);
  // A running proxy picks the message up from tail alone; the doorbell only
  // matters once it sleeps, so pipelined sends ring it once per half window.
  if (urgent || ++unsignaled_ >= std::max<uint32_t>(1, depth_ / 2)) {
    ring();
  }
}

void ClientChannel::ring() noexcept {
  unsignaled_ = 0;
  header_->ring_doorbell.fetch_add(1, std::memory_order_seq_cst);
  if (header_->proxy_waiting.load(std::memory_order_seq_cst) != 0 &&
      header_->proxy_waiting.exchange(0, std::memory_order_seq_cst) != 0) {
    futex_wake_all(header_->ring_doorbell);
  }
}

Errc ClientChannel::try_send(uint16_t opcode, bool blocking, PayloadView payload, uint64_t bulk_len,
                             uint64_t* seq_out) noexcept {
  Errc rc = try_reserve(opcode, blocking, payload, bulk_len, seq_out);
  if (rc == Errc::Ok) {
    publish(*seq_out, blocking);
  }
  return rc;
}

Errc ClientChannel::try_wait_completed(uint64_t seq) noexcept {
  return wait_for([&] { return header_->completed.load(std::memory_order_seq_cst) >= seq; }, seq);
}

Errc ClientChannel::try_wait_reply(uint64_t seq, int32_t* status,
                                   std::span<std::byte, kPayloadBytes> result) noexcept {
  Errc rc = wait_for([&] { return header_->reply.seq.load(std::memory_order_seq_cst) == seq; }, seq);
  if (rc != Errc::Ok) {
    return rc;
  }
  *status = header_->reply.status;
  std::memcpy(result.data(), header_->reply.result.data(), kPayloadBytes);
  return Errc::Ok;
}

Errc ClientChannel::try_call(uint16_t opcode, PayloadView payload, uint64_t bulk_len, int32_t* status,
                             std::span<std::byte, kPayloadBytes> result) noexcept {
  uint64_t seq = 0;
  Errc rc = try_send(opcode, true, payload, bulk_len, &seq);
  if (rc != Errc::Ok) {
    return rc;
  }
  return try_wait_reply(seq, status, result);
}

PendingTicket ClientChannel::send_call(Opcode opcode, bool blocking, PayloadView payload, uint64_t bulk_len) {
  uint64_t seq = 0;
  Errc rc = try_send(static_cast<uint16_t>(opcode), blocking, payload, bulk_len, &seq);
  if (rc != Errc::Ok) {
    throw Error(rc, "send " + std::string(opcode_name(static_cast<uint16_t>(opcode))) + ": proxy is gone");
  }
  return {seq, opcode};
}

void ClientChannel::flush() {
  if (header_ == nullptr) {
    throw Error(Errc::ChannelClosed, "flush on a detached channel");
  }
  Errc rc = try_wait_completed(last_sent());
  if (rc != Errc::Ok) {
    throw Error(rc, "flush: proxy is gone with " + std::to_string(unreplied()) + " calls outstanding");
  }
  auto& deferred = header_->deferred;
  if (deferred.present.load(std::memory_order_acquire) != 0) {
    const uint64_t seq = deferred.seq;
    const uint16_t opcode = deferred.opcode;
    const auto status = static_cast<Errc>(deferred.status);
    deferred.present.store(0, std::memory_order_release);
    throw DeferredCallError(seq, opcode, status);
  }
}

void ClientChannel::round_trip(Opcode opcode, PayloadView payload, uint64_t bulk_len, PayloadBuffer& result) {
  int32_t status = 0;
  Errc rc = try_call(static_cast<uint16_t>(opcode), payload, bulk_len, &status, result);
  const std::string name(opcode_name(static_cast<uint16_t>(opcode)));
  if (rc != Errc::Ok) {
    throw Error(rc, name + ": proxy is gone");
  }
  if (status != 0) {
    // Failed replies carry a NUL-terminated message in the result area.
    const char* text = reinterpret_cast<const char*>(result.data());
    std::string detail(text, strnlen(text, result.size()));
    const auto code = static_cast<Errc>(status);
    throw Error(code, name + ": " + (detail.empty() ? std::string(errc_name(code)) : detail));
  }
}

ProxyChannel::ProxyChannel(const SharedRegion& region)
    : header_(&region.header()), slots_(region.slots()), mask_(region.header().slot_count - 1) {
  head_ = header_->head.load(std::memory_order_acquire);
}

const CallMessage* ProxyChannel::next(int timeout_ms) noexcept {
  const uint64_t seq = head_ + 1;
  auto ready = [&] { return header_->tail.load(std::memory_order_seq_cst) >= seq; };
  bool have = false;
  for (int i = 0, n = spin_budget(); i < n && !have; ++i) {
    have = ready();
    if (!have) {
      cpu_relax();
    }
  }
  if (!have) {
    const uint32_t bell = header_->ring_doorbell.load(std::memory_order_acquire);
    if (!(have = ready())) {
      header_->proxy_waiting.store(1, std::memory_order_seq_cst);
      if (!ready()) {
        futex_wait(header_->ring_doorbell, bell, timeout_ms);
      }
      header_->proxy_waiting.store(0, std::memory_order_relaxed);
      have = ready();
    }
  }
  if (!have) {
    return nullptr;
  }
  head_ = seq;
  header_->head.store(seq, std::memory_order_release);
  const CallMessage* msg = &slots_[seq & mask_];
  auto& stats = header_->stats;
  stats.requests.fetch_add(1, std::memory_order_relaxed);
  stats.order_hash.store((stats.order_hash.load(std::memory_order_relaxed) ^ msg->seq) * kFnvPrime,
                         std::memory_order_relaxed);
  if (msg->opcode < 32) {
    stats.per_opcode[msg->opcode].fetch_add(1, std::memory_order_relaxed);
  }
  return msg;
}

void ProxyChannel::reply(const CallMessage& msg, Errc status, std::span<const std::byte> result) noexcept {
  auto& slot = header_->reply;
  slot.status = static_cast<int32_t>(status);
  std::memset(slot.result.data(), 0, kPayloadBytes);
  std::memcpy(slot.result.data(), result.data(), std::min(result.size(), kPayloadBytes));
  slot.seq.store(msg.seq, std::memory_order_seq_cst);
  header_->stats.replies.fetch_add(1, std::memory_order_relaxed);
  finish(msg.seq);
}

void ProxyChannel::complete(const CallMessage& msg, Errc status) noexcept {
  auto& deferred = header_->deferred;
  if (status != Errc::Ok && deferred.present.load(std::memory_order_acquire) == 0) {
    deferred.seq = msg.seq;
    deferred.opcode = msg.opcode;
    deferred.status = static_cast<int32_t>(status);
    deferred.present.store(1, std::memory_order_release);
  }
  finish(msg.seq);
}

void ProxyChannel::finish(uint64_t seq) noexcept {
  header_->stats.completions.fetch_add(1, std::memory_order_relaxed);
  header_->completed.store(seq, std::memory_order_seq_cst);
  header_->completion_doorbell.fetch_add(1, std::memory_order_seq_cst);
  if (header_->client_waiting.load(std::memory_order_seq_cst) != 0 &&
      seq >= header_->client_wait_target.load(std::memory_order_seq_cst) &&
      header_->client_waiting.exchange(0, std::memory_order_seq_cst) != 0) {
    futex_wake_all(header_->completion_doorbell);
  }
}

}  // namespace crum::ipc
