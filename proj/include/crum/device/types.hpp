#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace crum::device {

template <class Tag>
struct Handle {
  uint64_t value = 0;

  constexpr auto operator<=>(const Handle&) const = default;
  constexpr explicit operator bool() const { return value != 0; }
};

using RegionId = Handle<struct RegionTag>;
using StreamId = Handle<struct StreamTag>;
using EventId = Handle<struct EventTag>;
using SessionEpoch = uint64_t;

inline constexpr StreamId kDefaultStream{0};

enum class RegionKind : uint8_t { Device = 0, Managed = 1 };

struct Allocation {
  RegionId id;
  RegionKind kind = RegionKind::Device;
  uint64_t offset = 0;
  uint64_t length = 0;

  bool operator==(const Allocation&) const = default;
};

struct Grid {
  uint32_t blocks = 1;
  uint32_t threads = 1;

  bool operator==(const Grid&) const = default;
};

struct KernelTask {
  std::string kernel_name;
  std::vector<RegionId> region_args;
  std::vector<uint64_t> scalar_args;
  Grid grid;
};

struct EventStatus {
  bool recorded = false;
  bool complete = false;
};

}  // namespace crum::device

template <class Tag>
struct std::hash<crum::device::Handle<Tag>> {
  size_t operator()(const crum::device::Handle<Tag>& h) const noexcept {
    return std::hash<uint64_t>{}(h.value);
  }
};
