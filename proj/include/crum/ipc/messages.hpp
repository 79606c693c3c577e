#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <type_traits>

namespace crum::ipc {

inline constexpr size_t kPayloadBytes = 240;
inline constexpr size_t kMaxKernelName = 32;
inline constexpr size_t kMaxKernelRegions = 8;
inline constexpr size_t kMaxKernelScalars = 8;

struct EmptyPayload {};

struct HelloRequest {
  int32_t client_pid;
  uint32_t reserved;
};

struct HelloResponse {
  int32_t proxy_pid;
  uint32_t reserved;
  uint64_t epoch;
  uint64_t arena_capacity;
  uint64_t page_size;
};

struct NopRequest {
  uint64_t value;
};

struct AllocRequest {
  uint8_t kind;  // device::RegionKind
  uint8_t reserved[7];
  uint64_t length;
};

struct AllocResponse {
  uint64_t region;
  uint64_t offset;
};

struct RegionRequest {
  uint64_t region;
};

struct StreamRequest {
  uint64_t stream;
};

struct StreamResponse {
  uint64_t stream;
};

struct EventRequest {
  uint64_t event;
};

struct EventResponse {
  uint64_t event;
};

struct EventRecordRequest {
  uint64_t event;
  uint64_t stream;
};

struct EventQueryResponse {
  uint8_t recorded;
  uint8_t complete;
};

struct LaunchRequest {
  uint64_t stream;
  uint32_t grid_blocks;
  uint32_t grid_threads;
  uint8_t region_count;
  uint8_t scalar_count;
  char kernel[kMaxKernelName];
  uint64_t regions[kMaxKernelRegions];
  uint64_t scalars[kMaxKernelScalars];
};

// Moves `length` bytes between [region + offset] and the client address
// `host_addr`. The proxy performs the copy itself (single-copy mode) or
// through the scratch buffer (scratch mode).
struct CopyRequest {
  uint64_t region;
  uint64_t offset;
  uint64_t length;
  uint64_t host_addr;
};

struct DumpRequest {
  uint64_t host_addr;
  uint64_t capacity;
};

struct DumpResponse {
  uint64_t size;
};

template <class T>
concept WirePayload = std::is_trivially_copyable_v<T> && sizeof(T) <= kPayloadBytes;

template <WirePayload T>
void encode_payload(const T& value, std::span<std::byte, kPayloadBytes> out) {
  std::memset(out.data(), 0, out.size());
  if constexpr (!std::is_empty_v<T>) {
    std::memcpy(out.data(), &value, sizeof(T));
  }
}

template <WirePayload T>
T decode_payload(std::span<const std::byte, kPayloadBytes> in) {
  T value{};
  if constexpr (!std::is_empty_v<T>) {
    std::memcpy(&value, in.data(), sizeof(T));
  }
  return value;
}

}  // namespace crum::ipc
