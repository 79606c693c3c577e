#pragma once

#include <sys/types.h>

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "crum/device/device_state.hpp"
#include "crum/ipc/channel.hpp"
#include "crum/ipc/opcodes.hpp"
#include "crum/ipc/shared_region.hpp"

namespace crum::proxy {

// Exit codes of crum-proxy.
inline constexpr int kExitClean = 0;
inline constexpr int kExitProtocol = 2;
inline constexpr int kExitPeerLost = 3;

// The passive end of a session: dequeues calls, runs them against the one
// DeviceState of this process and replies. Never sends anything unprompted.
class ProxySession {
 public:
  ProxySession(ipc::SharedRegion region, device::DriverContext& ctx, const device::DeviceConfig& config);
  ~ProxySession();
  ProxySession(const ProxySession&) = delete;
  ProxySession& operator=(const ProxySession&) = delete;

  // Serves until Shutdown (kExitClean), a malformed message (kExitProtocol),
  // or the client vanishing without Shutdown (kExitPeerLost).
  int run();

  const device::DeviceState& device() const { return device_; }
  // Proxy-local address of every live MANAGED region.
  const std::map<device::RegionId, std::byte*>& region_index() const { return region_index_; }

  // One dispatch arm per opcode; the primary template is never defined.
  template <ipc::Opcode Op>
  typename ipc::OpTraits<Op>::Response handle(const typename ipc::OpTraits<Op>::Request& request,
                                              const ipc::CallMessage& msg);

 private:
  bool serve(const ipc::CallMessage& msg);
  bool client_alive() const;
  void sync_before_transfer();
  std::span<std::byte> checked_range(const ipc::CopyRequest& req, device::RegionKind kind);
  void transfer(const ipc::CopyRequest& req, device::RegionKind kind, bool to_device);

  ipc::SharedRegion region_;
  ipc::ProxyChannel channel_;
  device::DeviceState device_;
  std::map<device::RegionId, std::byte*> region_index_;
  pid_t client_pid_ = 0;
  // A kernel failure found while synchronizing implicitly for a transfer is
  // reported by the next explicit Synchronize.
  std::optional<Error> stashed_;
  bool shutdown_ = false;
};

// Human-readable JSON snapshot of the observable device state: allocation,
// stream and event tables plus a CRC32 of every live region's bytes.
std::string dump_state(device::DeviceState& device);

int proxy_main(const std::string& shm_name);

}  // namespace crum::proxy
