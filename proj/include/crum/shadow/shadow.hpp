#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crum/error.hpp"

namespace crum::shadow {

enum class Phase : uint8_t { Protected, ReadPhase, WritePhase };

std::string_view phase_name(Phase phase);

// Moves shadow bytes to and from the proxy's real pages. Every member is
// called from the fault handler and must be async-signal-safe.
class ShadowTransport {
 public:
  virtual ~ShadowTransport() = default;
  virtual Errc fetch(uint64_t region, uint64_t offset, std::span<std::byte> dst) noexcept = 0;
  // May return before the bytes have left `src`; complete_sends() waits.
  virtual Errc send(uint64_t region, uint64_t offset, std::span<const std::byte> src) noexcept = 0;
  virtual Errc complete_sends() noexcept = 0;
};

struct ShadowConfig {
  uint64_t page_size = 4096;
  uint64_t small_region_pages = 8;
  bool coarse_write = false;
  bool verified = false;
  uintptr_t base = 0x600000000000ULL;

  // CRUM_PAGE_SIZE, CRUM_SMALL_REGION_PAGES, CRUM_COARSE_WRITE, CRUM_MODE,
  // CRUM_SHADOW_BASE.
  static ShadowConfig from_env();
};

struct ShadowStats {
  uint64_t read_faults = 0;
  uint64_t write_faults = 0;
  uint64_t pages_fetched = 0;
  uint64_t bytes_fetched = 0;
  uint64_t pages_flushed = 0;
  uint64_t flush_transfers = 0;
  uint64_t bytes_drained = 0;
};

struct CycleViolationInfo {
  uint64_t region = 0;
  uint64_t page = 0;
  uintptr_t address = 0;
};

class ShadowRegion {
 public:
  uintptr_t base() const { return base_; }
  uint64_t length() const { return length_; }
  uint64_t mapped_length() const { return pages_ * page_size_; }
  uint64_t pages() const { return pages_; }
  uint64_t real_region() const { return real_region_; }
  Phase phase() const { return phase_; }
  uint64_t prefetch_window() const { return window_; }
  uint64_t window_cap() const { return window_cap_; }
  std::optional<uint64_t> open_write_page() const;
  bool dirty(uint64_t page) const { return dirty_[page] != 0; }
  bool resident(uint64_t page) const { return resident_[page] != 0; }
  uint64_t dirty_count() const;
  std::byte* data() const { return reinterpret_cast<std::byte*>(base_); }
  bool contains(uintptr_t addr) const { return addr >= base_ && addr < base_ + mapped_length(); }

  // Contiguous dirty page runs as (first page, page count).
  std::vector<std::pair<uint64_t, uint64_t>> dirty_runs() const;

 private:
  friend class ShadowTable;

  uintptr_t base_ = 0;
  uint64_t length_ = 0;
  uint64_t pages_ = 0;
  uint64_t page_size_ = 0;
  uint64_t real_region_ = 0;
  Phase phase_ = Phase::WritePhase;
  uint64_t window_ = 1;
  uint64_t window_cap_ = 1;
  int64_t open_page_ = -1;
  std::vector<uint8_t> dirty_;
  std::vector<uint8_t> resident_;
};

// The application's shadow regions and the fault handler that keeps them in
// step with the proxy. At most one table is active per process; its methods
// (other than the fault path) run only inside API calls.
class ShadowTable {
 public:
  ShadowTable(ShadowConfig config, ShadowTransport& transport);
  ~ShadowTable();
  ShadowTable(const ShadowTable&) = delete;
  ShadowTable& operator=(const ShadowTable&) = delete;

  const ShadowConfig& config() const { return config_; }

  // Maps a fresh region (writable, every page dirty) at the next address.
  ShadowRegion& create(uint64_t real_region, uint64_t length);
  // Same, at a recorded address (restore). AddressUnavailable if taken.
  ShadowRegion& create_at(uint64_t real_region, uint64_t length, uintptr_t address);
  void destroy(uint64_t real_region);

  ShadowRegion* find(uintptr_t addr) noexcept;
  ShadowRegion* by_region(uint64_t real_region);
  const std::vector<std::unique_ptr<ShadowRegion>>& regions() const { return regions_; }
  uintptr_t next_address() const { return cursor_; }

  // Sends every dirty page (contiguous runs coalesced) and re-protects all
  // non-protected regions. Returns the number of pages sent.
  uint64_t flush_dirty();
  // Copies every region's full contents from the proxy; leaves them
  // readable. Precondition: nothing dirty.
  void drain_to_shadow();

  // Rethrows (once) the first cycle violation seen in verified mode.
  void check_violation();
  std::optional<CycleViolationInfo> violation() const;

  const ShadowStats& stats() const { return stats_; }
  void reset_stats() { stats_ = {}; }

  // Checks every region invariant against the real page protections from
  // /proc/self/maps. Returns a description of each breach; empty when sound.
  std::vector<std::string> audit() const;

  // Fault entry point. Returns Ok when the access may be retried.
  Errc on_fault(ShadowRegion& region, uintptr_t addr, bool write) noexcept;

 private:
  ShadowRegion& map_region(uint64_t real_region, uint64_t length, uintptr_t address);
  Errc fetch_pages(ShadowRegion& r, uint64_t first, uint64_t count, int final_prot) noexcept;
  Errc read_fault(ShadowRegion& r, uint64_t page) noexcept;
  Errc write_fault(ShadowRegion& r, uint64_t page) noexcept;
  int protect(ShadowRegion& r, uint64_t first, uint64_t count, int prot) noexcept;

  ShadowConfig config_;
  ShadowTransport* transport_;
  std::vector<std::unique_ptr<ShadowRegion>> regions_;  // sorted by base
  uintptr_t cursor_;
  ShadowStats stats_;
  bool violation_pending_ = false;
  bool violation_seen_ = false;
  CycleViolationInfo violation_;
};

}  // namespace crum::shadow
