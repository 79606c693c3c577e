#include "crum/proxy/proxy_session.hpp"

#include <signal.h>
#include <unistd.h>
#include <zlib.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <json.hpp>

#include "crum/ipc/bulk.hpp"
#include "crum/ipc/wait.hpp"

namespace crum::proxy {

using device::RegionId;
using device::RegionKind;
using ipc::Opcode;
using ipc::OpTraits;

namespace {

constexpr int kPollMs = 20;

}  // namespace

ProxySession::ProxySession(ipc::SharedRegion region, device::DriverContext& ctx,
                           const device::DeviceConfig& config)
    : region_(std::move(region)), channel_(region_), device_(device::DeviceState::init(ctx, config)) {
  auto& header = region_.header();
  header.proxy_pid.store(getpid(), std::memory_order_release);
  header.proxy_state.store(static_cast<uint32_t>(ipc::ProxyState::Ready), std::memory_order_release);
  ipc::futex_wake_all(header.proxy_state);
}

ProxySession::~ProxySession() {
  auto& header = region_.header();
  header.proxy_state.store(static_cast<uint32_t>(ipc::ProxyState::Exited), std::memory_order_seq_cst);
  ipc::futex_wake_all(header.proxy_state);
  // Wake a client blocked on a reply so it notices at once.
  header.completion_doorbell.fetch_add(1, std::memory_order_seq_cst);
  ipc::futex_wake_all(header.completion_doorbell);
}

bool ProxySession::client_alive() const {
  pid_t pid = client_pid_ != 0 ? client_pid_ : region_.header().client_pid.load(std::memory_order_acquire);
  if (pid <= 0) {
    return true;  // nobody attached yet
  }
  return kill(pid, 0) == 0 || errno == EPERM;
}

int ProxySession::run() {
  while (!shutdown_) {
    const ipc::CallMessage* msg = channel_.next(kPollMs);
    if (msg == nullptr) {
      if (!client_alive()) {
        std::fprintf(stderr, "crum-proxy: client %d exited without shutdown\n",
                     static_cast<int>(region_.header().client_pid.load()));
        return kExitPeerLost;
      }
      continue;
    }
    if (!serve(*msg)) {
      return kExitProtocol;
    }
  }
  return kExitClean;
}

void ProxySession::sync_before_transfer() {
  if (device_.pending_tasks() == 0) {
    return;
  }
  try {
    device_.synchronize();
  } catch (const Error& e) {
    if (!stashed_) {
      stashed_ = e;
    }
  }
}

std::span<std::byte> ProxySession::checked_range(const ipc::CopyRequest& req, RegionKind kind) {
  const auto& a = device_.allocation(RegionId{req.region});
  if (a.kind != kind) {
    throw Error(Errc::InvalidArgument, "region " + std::to_string(req.region) + " is not " +
                                           (kind == RegionKind::Managed ? "managed" : "device") + " memory");
  }
  if (req.length == 0) {
    throw Error(Errc::InvalidArgument, "zero-length transfer");
  }
  if (req.offset > a.length || req.length > a.length - req.offset) {
    throw Error(Errc::RangeOutOfBounds, "range [" + std::to_string(req.offset) + ", +" +
                                            std::to_string(req.length) + ") outside region " +
                                            std::to_string(req.region) + " of " + std::to_string(a.length) +
                                            " bytes");
  }
  return device_.region_bytes(RegionId{req.region}).subspan(req.offset, req.length);
}

void ProxySession::transfer(const ipc::CopyRequest& req, RegionKind kind, bool to_device) {
  auto bytes = checked_range(req, kind);
  sync_before_transfer();
  auto& header = region_.header();
  if (static_cast<ipc::BulkMode>(header.bulk_mode) == ipc::BulkMode::Scratch) {
    auto scratch = region_.scratch();
    if (bytes.size() > scratch.size()) {
      throw Error(Errc::InvalidArgument, "chunk larger than the scratch buffer");
    }
    if (to_device) {
      std::memcpy(bytes.data(), scratch.data(), bytes.size());
    } else {
      std::memcpy(scratch.data(), bytes.data(), bytes.size());
    }
  } else {
    uint64_t moved = 0;
    Errc rc = to_device ? ipc::remote_read(client_pid_, req.host_addr, bytes, &moved)
                        : ipc::remote_write(client_pid_, req.host_addr, bytes, &moved);
    if (rc != Errc::Ok) {
      throw Error(rc, "bulk transfer of " + std::to_string(bytes.size()) + " bytes stopped after " +
                          std::to_string(moved));
    }
  }
  header.stats.bulk_bytes.fetch_add(bytes.size(), std::memory_order_relaxed);
}

template <>
ipc::HelloResponse ProxySession::handle<Opcode::Hello>(const ipc::HelloRequest& req, const ipc::CallMessage&) {
  client_pid_ = req.client_pid;
  return {static_cast<int32_t>(getpid()), 0, device_.epoch(), device_.capacity(), device_.page_size()};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::Shutdown>(const ipc::EmptyPayload&, const ipc::CallMessage&) {
  shutdown_ = true;
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::Nop>(const ipc::NopRequest& req, const ipc::CallMessage&) {
  auto& stats = region_.header().stats;
  stats.nop_count.fetch_add(1, std::memory_order_relaxed);
  stats.nop_sum.fetch_add(req.value, std::memory_order_relaxed);
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::Ping>(const ipc::EmptyPayload&, const ipc::CallMessage&) {
  return {};
}

template <>
ipc::AllocResponse ProxySession::handle<Opcode::DeviceAlloc>(const ipc::AllocRequest& req, const ipc::CallMessage&) {
  if (req.kind > static_cast<uint8_t>(RegionKind::Managed)) {
    throw Error(Errc::InvalidArgument, "unknown region kind " + std::to_string(req.kind));
  }
  const auto kind = static_cast<RegionKind>(req.kind);
  const auto a = device_.alloc(kind, req.length);
  if (kind == RegionKind::Managed) {
    region_index_.emplace(a.id, device_.region_bytes(a.id).data());
  }
  return {a.id.value, a.offset};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::DeviceFree>(const ipc::RegionRequest& req, const ipc::CallMessage&) {
  device_.free(RegionId{req.region});
  region_index_.erase(RegionId{req.region});
  return {};
}

template <>
ipc::StreamResponse ProxySession::handle<Opcode::StreamCreate>(const ipc::EmptyPayload&, const ipc::CallMessage&) {
  return {device_.stream_create().value};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::StreamDestroy>(const ipc::StreamRequest& req,
                                                              const ipc::CallMessage&) {
  device_.stream_destroy(device::StreamId{req.stream});
  return {};
}

template <>
ipc::EventResponse ProxySession::handle<Opcode::EventCreate>(const ipc::EmptyPayload&, const ipc::CallMessage&) {
  return {device_.event_create().value};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::EventRecord>(const ipc::EventRecordRequest& req,
                                                            const ipc::CallMessage&) {
  device_.event_record(device::EventId{req.event}, device::StreamId{req.stream});
  return {};
}

template <>
ipc::EventQueryResponse ProxySession::handle<Opcode::EventQuery>(const ipc::EventRequest& req,
                                                                 const ipc::CallMessage&) {
  const auto status = device_.event_query(device::EventId{req.event});
  return {static_cast<uint8_t>(status.recorded), static_cast<uint8_t>(status.complete)};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::LaunchKernel>(const ipc::LaunchRequest& req, const ipc::CallMessage&) {
  if (req.region_count > ipc::kMaxKernelRegions || req.scalar_count > ipc::kMaxKernelScalars) {
    throw Error(Errc::InvalidArgument, "too many kernel arguments");
  }
  device::KernelTask task;
  task.kernel_name.assign(req.kernel, strnlen(req.kernel, sizeof(req.kernel)));
  for (uint8_t i = 0; i < req.region_count; ++i) {
    task.region_args.push_back(RegionId{req.regions[i]});
  }
  task.scalar_args.assign(req.scalars, req.scalars + req.scalar_count);
  task.grid = {req.grid_blocks, req.grid_threads};
  device_.launch_kernel(device::StreamId{req.stream}, std::move(task));
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::Synchronize>(const ipc::EmptyPayload&, const ipc::CallMessage&) {
  std::optional<Error> earlier = std::move(stashed_);
  stashed_.reset();
  device_.synchronize();
  if (earlier) {
    throw *earlier;
  }
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::MemcpyH2D>(const ipc::CopyRequest& req, const ipc::CallMessage&) {
  transfer(req, RegionKind::Device, true);
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::MemcpyD2H>(const ipc::CopyRequest& req, const ipc::CallMessage&) {
  transfer(req, RegionKind::Device, false);
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::UvmRead>(const ipc::CopyRequest& req, const ipc::CallMessage&) {
  transfer(req, RegionKind::Managed, false);
  return {};
}

template <>
ipc::EmptyPayload ProxySession::handle<Opcode::UvmWrite>(const ipc::CopyRequest& req, const ipc::CallMessage&) {
  transfer(req, RegionKind::Managed, true);
  return {};
}

template <>
ipc::DumpResponse ProxySession::handle<Opcode::StateDump>(const ipc::DumpRequest& req, const ipc::CallMessage&) {
  sync_before_transfer();
  const std::string text = dump_state(device_);
  // Too small a buffer: report the size and copy nothing; the client retries.
  if (text.size() <= req.capacity) {
    uint64_t moved = 0;
    Errc rc = ipc::remote_write(client_pid_, req.host_addr, std::as_bytes(std::span(text)), &moved);
    if (rc != Errc::Ok) {
      throw Error(rc, "state dump transfer failed");
    }
  }
  return {text.size()};
}

bool ProxySession::serve(const ipc::CallMessage& msg) {
  const auto* info = ipc::find_opcode(msg.opcode);
  if (info == nullptr) {
    std::fprintf(stderr, "crum-proxy: malformed opcode %u at seq %llu\n", msg.opcode,
                 static_cast<unsigned long long>(msg.seq));
    const char text[] = "malformed opcode";
    channel_.reply(msg, Errc::ProtocolError, std::as_bytes(std::span(text)));
    return false;
  }

  ipc::PayloadBuffer result{};
  Errc status = Errc::Ok;
  try {
    switch (info->opcode) {
#define CRUM_OPCODE(name, id, blocking, logged, req, resp)                                                     \
  case Opcode::name: {                                                                                         \
    auto out = handle<Opcode::name>(                                                                           \
        ipc::decode_payload<OpTraits<Opcode::name>::Request>(std::span<const std::byte, ipc::kPayloadBytes>(   \
            msg.payload)),                                                                                     \
        msg);                                                                                                  \
    ipc::encode_payload(out, std::span<std::byte, ipc::kPayloadBytes>(result));                                \
    break;                                                                                                     \
  }
#include "crum/ipc/opcodes.def"
#undef CRUM_OPCODE
    }
  } catch (const Error& e) {
    status = e.code();
    result.fill(std::byte{0});
    std::strncpy(reinterpret_cast<char*>(result.data()), e.what(), result.size() - 1);
  } catch (const std::exception& e) {
    status = Errc::SystemError;
    result.fill(std::byte{0});
    std::strncpy(reinterpret_cast<char*>(result.data()), e.what(), result.size() - 1);
  }
  if (msg.blocking != 0) {
    channel_.reply(msg, status, result);
  } else {
    channel_.complete(msg, status);
  }
  return true;
}

std::string dump_state(device::DeviceState& device) {
  nlohmann::ordered_json doc;
  doc["arena_capacity"] = device.capacity();
  doc["page_size"] = device.page_size();
  doc["alloc_cursor"] = device.alloc_cursor();
  auto& regions = doc["allocations"] = nlohmann::json::array();
  for (const auto& [id, a] : device.allocations()) {
    auto bytes = device.region_bytes(id);
    uLong crc = crc32(0L, Z_NULL, 0);
    for (size_t done = 0; done < bytes.size();) {
      const auto n = static_cast<uInt>(std::min<size_t>(bytes.size() - done, size_t{1} << 30));
      crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), n);
      done += n;
    }
    regions.push_back({{"id", id.value},
                       {"kind", a.kind == RegionKind::Managed ? "managed" : "device"},
                       {"offset", a.offset},
                       {"length", a.length},
                       {"crc32", crc}});
  }
  auto& streams = doc["streams"] = nlohmann::json::array();
  for (auto s : device.streams()) {
    streams.push_back(s.value);
  }
  auto& events = doc["events"] = nlohmann::json::array();
  for (auto e : device.events()) {
    const auto st = device.event_query(e);
    events.push_back({{"id", e.value}, {"recorded", st.recorded}, {"complete", st.complete}});
  }
  doc["pending_tasks"] = device.pending_tasks();
  return doc.dump();
}

int proxy_main(const std::string& shm_name) {
  std::optional<ipc::SharedRegion> region;
  try {
    region.emplace(ipc::SharedRegion::attach(shm_name));
  } catch (const Error& e) {
    std::fprintf(stderr, "crum-error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return e.code() == Errc::VersionMismatch ? kExitProtocol : 1;
  }
  try {
    ProxySession session(std::move(*region), device::DriverContext::process(), device::DeviceConfig::from_env());
    return session.run();
  } catch (const Error& e) {
    std::fprintf(stderr, "crum-error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return 1;
  }
}

}  // namespace crum::proxy
