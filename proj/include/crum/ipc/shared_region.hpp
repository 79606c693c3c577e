#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "crum/ipc/layout.hpp"

namespace crum::ipc {

struct ChannelConfig {
  uint32_t slot_count = 64;
  uint32_t depth = 64;
  uint64_t scratch_bytes = uint64_t{4} << 20;
  BulkMode bulk_mode = BulkMode::SingleCopy;

  // Honors CRUM_PIPELINE_DEPTH and CRUM_BULK_MODE (single-copy | scratch).
  static ChannelConfig from_env();
};

BulkMode parse_bulk_mode(std::string_view text);

// A POSIX shared-memory object holding one channel. The creator (launcher or
// test harness) unlinks it on destruction unless release() was called.
class SharedRegion {
 public:
  static SharedRegion create(const std::string& name, const ChannelConfig& config);
  // Throws NoProxy when the object does not exist, VersionMismatch when its
  // layout byte differs from ours.
  static SharedRegion attach(const std::string& name);

  static std::string name_for_session(std::string_view session_id);

  SharedRegion(SharedRegion&& other) noexcept;
  SharedRegion& operator=(SharedRegion&& other) noexcept;
  SharedRegion(const SharedRegion&) = delete;
  SharedRegion& operator=(const SharedRegion&) = delete;
  ~SharedRegion();

  ChannelHeader& header() const { return *reinterpret_cast<ChannelHeader*>(base_); }
  CallMessage* slots() const;
  std::span<std::byte> scratch() const;
  const std::string& name() const { return name_; }
  bool mapped() const { return base_ != nullptr; }

  void unlink();
  void release() { owner_ = false; }

 private:
  SharedRegion(std::string name, std::byte* base, size_t size, bool owner);
  void reset() noexcept;

  std::string name_;
  std::byte* base_ = nullptr;
  size_t size_ = 0;
  bool owner_ = false;
};

}  // namespace crum::ipc
