#pragma once

#include <cstdint>
#include <vector>

#include "crum/ipc/opcodes.hpp"

namespace crum::client {

// One state-creating call and what it returned. Fixed 40-byte wire form
// (see docs/FORMAT.md).
struct ReplayRecord {
  uint16_t opcode = 0;    // ipc::Opcode, a row with logged = true
  uint8_t kind = 0;       // device::RegionKind for DeviceAlloc
  uint8_t reserved[5] = {};
  uint64_t arg = 0;       // length for DeviceAlloc, handle for Free/Destroy
  uint64_t result = 0;    // handle returned by create calls
  uint64_t offset = 0;    // arena offset for DeviceAlloc
  uint64_t shadow = 0;    // shadow address for managed DeviceAlloc

  bool operator==(const ReplayRecord& other) const {
    return opcode == other.opcode && kind == other.kind && arg == other.arg && result == other.result &&
           offset == other.offset && shadow == other.shadow;
  }
};

static_assert(sizeof(ReplayRecord) == 40);

class ReplayLog {
 public:
  void append(const ReplayRecord& record) { records_.push_back(record); }
  const std::vector<ReplayRecord>& records() const { return records_; }
  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  std::vector<ReplayRecord> records_;
};

}  // namespace crum::client
