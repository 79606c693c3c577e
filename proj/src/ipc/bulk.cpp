#include "crum/ipc/bulk.hpp"

#include <sys/uio.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <string>

namespace crum::ipc {

namespace {

Errc map_errno(int err) {
  switch (err) {
    case ESRCH:
      return Errc::RemoteGone;
    case EFAULT:
      return Errc::BadAddress;
    default:
      return Errc::SystemError;
  }
}

template <class Fn>
Errc transfer_loop(Fn&& op, uint64_t length, uint64_t* moved) noexcept {
  uint64_t done = 0;
  while (done < length) {
    ssize_t n = op(done);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      // EFAULT after some progress means the range runs off a mapping.
      const Errc rc = (done > 0 && errno == EFAULT) ? Errc::PartialTransfer : map_errno(errno);
      *moved = done;
      return rc;
    }
    if (n == 0) {
      *moved = done;
      return Errc::PartialTransfer;
    }
    done += static_cast<uint64_t>(n);
  }
  *moved = done;
  return Errc::Ok;
}

}  // namespace

Errc remote_write(pid_t pid, uint64_t remote_addr, std::span<const std::byte> src, uint64_t* moved) noexcept {
  return transfer_loop(
      [&](uint64_t done) {
        iovec local{const_cast<std::byte*>(src.data()) + done, src.size() - done};
        iovec remote{reinterpret_cast<void*>(remote_addr + done), src.size() - done};
        return process_vm_writev(pid, &local, 1, &remote, 1, 0);
      },
      src.size(), moved);
}

Errc remote_read(pid_t pid, uint64_t remote_addr, std::span<std::byte> dst, uint64_t* moved) noexcept {
  return transfer_loop(
      [&](uint64_t done) {
        iovec local{dst.data() + done, dst.size() - done};
        iovec remote{reinterpret_cast<void*>(remote_addr + done), dst.size() - done};
        return process_vm_readv(pid, &local, 1, &remote, 1, 0);
      },
      dst.size(), moved);
}

Errc BulkClient::call_chunk(Opcode op, uint64_t region, uint64_t offset, uint64_t length, uint64_t host_addr,
                            bool wait) noexcept {
  PayloadBuffer payload;
  encode_payload(CopyRequest{region, offset, length, host_addr}, std::span<std::byte, kPayloadBytes>(payload));
  const auto raw = static_cast<uint16_t>(op);
  if (!wait) {
    uint64_t seq = 0;
    return channel_->try_send(raw, false, payload, length, &seq);
  }
  PayloadBuffer result;
  int32_t status = 0;
  Errc rc = channel_->try_call(raw, payload, length, &status, result);
  return rc != Errc::Ok ? rc : static_cast<Errc>(status);
}

Errc BulkClient::try_pull(Opcode op, uint64_t region, uint64_t offset, std::span<std::byte> dst) noexcept {
  if (!channel_->attached()) {
    return Errc::ChannelClosed;
  }
  if (channel_->bulk_mode() == BulkMode::SingleCopy) {
    return call_chunk(op, region, offset, dst.size(), reinterpret_cast<uint64_t>(dst.data()), true);
  }
  auto scratch = channel_->scratch();
  for (uint64_t done = 0; done < dst.size();) {
    const uint64_t n = std::min<uint64_t>(scratch.size(), dst.size() - done);
    Errc rc = call_chunk(op, region, offset + done, n, 0, true);
    if (rc != Errc::Ok) {
      return rc;
    }
    std::memcpy(dst.data() + done, scratch.data(), n);
    done += n;
  }
  return Errc::Ok;
}

Errc BulkClient::try_push(Opcode op, uint64_t region, uint64_t offset, std::span<const std::byte> src,
                          bool wait) noexcept {
  if (!channel_->attached()) {
    return Errc::ChannelClosed;
  }
  if (channel_->bulk_mode() == BulkMode::SingleCopy) {
    return call_chunk(op, region, offset, src.size(), reinterpret_cast<uint64_t>(src.data()), wait);
  }
  auto scratch = channel_->scratch();
  for (uint64_t done = 0; done < src.size();) {
    const uint64_t n = std::min<uint64_t>(scratch.size(), src.size() - done);
    std::memcpy(scratch.data(), src.data() + done, n);
    Errc rc = call_chunk(op, region, offset + done, n, 0, true);
    if (rc != Errc::Ok) {
      return rc;
    }
    done += n;
  }
  return Errc::Ok;
}

void BulkClient::pull(Opcode op, uint64_t region, uint64_t offset, std::span<std::byte> dst) {
  channel_->flush();
  Errc rc = try_pull(op, region, offset, dst);
  if (rc != Errc::Ok) {
    throw Error(rc, std::string(opcode_name(static_cast<uint16_t>(op))) + " of " + std::to_string(dst.size()) +
                        " bytes from region " + std::to_string(region) + " failed: " +
                        std::string(errc_name(rc)));
  }
}

void BulkClient::push(Opcode op, uint64_t region, uint64_t offset, std::span<const std::byte> src, bool wait) {
  channel_->flush();
  Errc rc = try_push(op, region, offset, src, wait);
  if (rc != Errc::Ok) {
    throw Error(rc, std::string(opcode_name(static_cast<uint16_t>(op))) + " of " + std::to_string(src.size()) +
                        " bytes to region " + std::to_string(region) + " failed: " +
                        std::string(errc_name(rc)));
  }
}

}  // namespace crum::ipc
