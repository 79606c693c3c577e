#include "crum/shadow/shadow.hpp"

#include <signal.h>
#include <sys/mman.h>
#include <ucontext.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <cstring>

#include "crum/env.hpp"
#include "crum/platform/maps.hpp"

namespace crum::shadow {

namespace {

std::atomic<ShadowTable*> g_active{nullptr};
struct sigaction g_previous {};
bool g_installed = false;

void write_stderr(const char* text) noexcept {
  ssize_t ignored = write(STDERR_FILENO, text, strlen(text));
  (void)ignored;
}

void fault_handler(int sig, siginfo_t* info, void* context) {
  const int saved_errno = errno;
  const auto addr = reinterpret_cast<uintptr_t>(info->si_addr);
  ShadowTable* table = g_active.load(std::memory_order_acquire);
  ShadowRegion* region = table != nullptr ? table->find(addr) : nullptr;
  if (region == nullptr) {
    // Not a shadow page: behave as if we were never installed.
    if ((g_previous.sa_flags & SA_SIGINFO) != 0 && g_previous.sa_sigaction != nullptr) {
      g_previous.sa_sigaction(sig, info, context);
    } else if (g_previous.sa_handler != SIG_DFL && g_previous.sa_handler != SIG_IGN) {
      g_previous.sa_handler(sig);
    } else {
      // Returning re-executes the access, which now takes the default action.
      sigaction(SIGSEGV, &g_previous, nullptr);
    }
    errno = saved_errno;
    return;
  }
  bool write = false;
#if defined(__x86_64__)
  const auto* uc = static_cast<const ucontext_t*>(context);
  write = (uc->uc_mcontext.gregs[REG_ERR] & 0x2) != 0;
#elif defined(__aarch64__)
  // ESR_EL1 is reported through the ESR context record; WnR is bit 6.
  const auto* uc = static_cast<const ucontext_t*>(context);
  const auto* ctx = reinterpret_cast<const _aarch64_ctx*>(uc->uc_mcontext.__reserved);
  while (ctx->magic != 0) {
    if (ctx->magic == ESR_MAGIC) {
      write = (reinterpret_cast<const esr_context*>(ctx)->esr & (1u << 6)) != 0;
      break;
    }
    ctx = reinterpret_cast<const _aarch64_ctx*>(reinterpret_cast<const char*>(ctx) + ctx->size);
  }
#else
#error "shadow fault handling needs the access type from the signal context"
#endif
  const Errc rc = table->on_fault(*region, addr, write);
  if (rc != Errc::Ok) {
    write_stderr("crum-error: ProxyGone: shadow page fault could not be served (");
    write_stderr(errc_name(rc).data());
    write_stderr(")\n");
    abort();
  }
  errno = saved_errno;
}

void install_handler() {
  if (g_installed) {
    return;
  }
  struct sigaction action {};
  action.sa_sigaction = fault_handler;
  action.sa_flags = SA_SIGINFO | SA_NODEFER | SA_RESTART;
  sigemptyset(&action.sa_mask);
  if (sigaction(SIGSEGV, &action, &g_previous) != 0) {
    throw_errno(Errc::SystemError, "sigaction(SIGSEGV)");
  }
  g_installed = true;
}

uint64_t ceil_pow2(uint64_t v) { return std::bit_ceil(std::max<uint64_t>(v, 1)); }

[[noreturn]] void throw_transport(Errc rc, const std::string& what) {
  throw Error(rc == Errc::ChannelClosed || rc == Errc::RemoteGone ? Errc::ProxyGone : rc,
              what + ": " + std::string(errc_name(rc)));
}

}  // namespace

std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::Protected:
      return "PROTECTED";
    case Phase::ReadPhase:
      return "READ_PHASE";
    case Phase::WritePhase:
      return "WRITE_PHASE";
  }
  return "?";
}

ShadowConfig ShadowConfig::from_env() {
  ShadowConfig config;
  const uint64_t system_page = static_cast<uint64_t>(sysconf(_SC_PAGESIZE));
  config.page_size = env::get_u64_or(env::kPageSize, system_page);
  if (config.page_size == 0 || config.page_size % system_page != 0 ||
      (config.page_size & (config.page_size - 1)) != 0) {
    throw Error(Errc::InvalidArgument, "CRUM_PAGE_SIZE must be a power-of-two multiple of " +
                                           std::to_string(system_page));
  }
  config.small_region_pages = env::get_u64_or(env::kSmallRegionPages, config.small_region_pages);
  config.coarse_write = env::get_flag(env::kCoarseWrite, false);
  if (auto mode = env::get(env::kMode)) {
    if (*mode == "verified") {
      config.verified = true;
    } else if (*mode != "normal") {
      throw Error(Errc::InvalidArgument, "CRUM_MODE must be normal or verified, got '" + *mode + "'");
    }
  }
  config.base = env::get_u64_or(env::kShadowBase, config.base);
  return config;
}

std::optional<uint64_t> ShadowRegion::open_write_page() const {
  if (open_page_ < 0) {
    return std::nullopt;
  }
  return static_cast<uint64_t>(open_page_);
}

uint64_t ShadowRegion::dirty_count() const {
  return static_cast<uint64_t>(std::count(dirty_.begin(), dirty_.end(), uint8_t{1}));
}

std::vector<std::pair<uint64_t, uint64_t>> ShadowRegion::dirty_runs() const {
  std::vector<std::pair<uint64_t, uint64_t>> runs;
  for (uint64_t p = 0; p < pages_;) {
    if (dirty_[p] == 0) {
      ++p;
      continue;
    }
    uint64_t q = p;
    while (q < pages_ && dirty_[q] != 0) {
      ++q;
    }
    runs.emplace_back(p, q - p);
    p = q;
  }
  return runs;
}

ShadowTable::ShadowTable(ShadowConfig config, ShadowTransport& transport)
    : config_(config), transport_(&transport), cursor_(config.base) {
  if (config_.page_size == 0 || config_.page_size % static_cast<uint64_t>(sysconf(_SC_PAGESIZE)) != 0) {
    throw Error(Errc::InvalidArgument, "shadow page size must be a multiple of the system page size");
  }
  ShadowTable* expected = nullptr;
  if (!g_active.compare_exchange_strong(expected, this)) {
    throw Error(Errc::InvalidState, "a shadow table is already active in this process");
  }
  try {
    install_handler();
  } catch (...) {
    g_active.store(nullptr);
    throw;
  }
}

ShadowTable::~ShadowTable() {
  g_active.store(nullptr, std::memory_order_release);
  for (auto& r : regions_) {
    munmap(r->data(), r->mapped_length());
  }
}

ShadowRegion& ShadowTable::map_region(uint64_t real_region, uint64_t length, uintptr_t address) {
  if (length == 0) {
    throw Error(Errc::InvalidArgument, "shadow region length must be positive");
  }
  const uint64_t pages = (length + config_.page_size - 1) / config_.page_size;
  const uint64_t mapped = pages * config_.page_size;
  for (const auto& r : regions_) {
    if (address < r->base() + r->mapped_length() && r->base() < address + mapped) {
      throw Error(Errc::Overlap, "shadow range overlaps region " + std::to_string(r->real_region()));
    }
  }
  void* p = mmap(reinterpret_cast<void*>(address), mapped, PROT_READ | PROT_WRITE,
                 MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) {
    if (errno == EEXIST) {
      throw Error(Errc::AddressUnavailable, "shadow address " + std::to_string(address) + " is already mapped");
    }
    throw_errno(Errc::MapFailed, "mmap shadow region");
  }
  if (reinterpret_cast<uintptr_t>(p) != address) {
    munmap(p, mapped);
    throw Error(Errc::AddressUnavailable, "kernel placed shadow region away from its requested address");
  }
  auto region = std::make_unique<ShadowRegion>();
  region->base_ = address;
  region->length_ = length;
  region->pages_ = pages;
  region->page_size_ = config_.page_size;
  region->real_region_ = real_region;
  region->phase_ = Phase::WritePhase;
  region->window_ = 1;
  region->window_cap_ = ceil_pow2(pages);
  region->dirty_.assign(pages, 1);
  region->resident_.assign(pages, 1);
  auto pos = std::upper_bound(regions_.begin(), regions_.end(), address,
                              [](uintptr_t a, const std::unique_ptr<ShadowRegion>& r) { return a < r->base(); });
  return **regions_.insert(pos, std::move(region));
}

ShadowRegion& ShadowTable::create(uint64_t real_region, uint64_t length) {
  auto& r = map_region(real_region, length, cursor_);
  cursor_ = r.base() + r.mapped_length() + config_.page_size;  // guard gap
  return r;
}

ShadowRegion& ShadowTable::create_at(uint64_t real_region, uint64_t length, uintptr_t address) {
  if (address % config_.page_size != 0) {
    throw Error(Errc::AddressUnavailable, "recorded shadow address is not page aligned");
  }
  auto& r = map_region(real_region, length, address);
  cursor_ = std::max<uintptr_t>(cursor_, r.base() + r.mapped_length() + config_.page_size);
  return r;
}

void ShadowTable::destroy(uint64_t real_region) {
  auto it = std::find_if(regions_.begin(), regions_.end(),
                         [&](const auto& r) { return r->real_region() == real_region; });
  if (it == regions_.end()) {
    throw Error(Errc::UnknownRegion, "no shadow for region " + std::to_string(real_region));
  }
  munmap((*it)->data(), (*it)->mapped_length());
  regions_.erase(it);
}

ShadowRegion* ShadowTable::find(uintptr_t addr) noexcept {
  // Called from the fault handler.
  size_t lo = 0;
  size_t hi = regions_.size();
  while (lo < hi) {
    const size_t mid = (lo + hi) / 2;
    ShadowRegion* r = regions_[mid].get();
    if (addr < r->base()) {
      hi = mid;
    } else if (addr >= r->base() + r->mapped_length()) {
      lo = mid + 1;
    } else {
      return r;
    }
  }
  return nullptr;
}

ShadowRegion* ShadowTable::by_region(uint64_t real_region) {
  for (auto& r : regions_) {
    if (r->real_region() == real_region) {
      return r.get();
    }
  }
  return nullptr;
}

int ShadowTable::protect(ShadowRegion& r, uint64_t first, uint64_t count, int prot) noexcept {
  return mprotect(r.data() + first * r.page_size_, count * r.page_size_, prot);
}

Errc ShadowTable::fetch_pages(ShadowRegion& r, uint64_t first, uint64_t count, int final_prot) noexcept {
  // The proxy writes straight into these pages, so they must be writable
  // while it does.
  if (protect(r, first, count, PROT_READ | PROT_WRITE) != 0) {
    return Errc::MapFailed;
  }
  const uint64_t offset = first * r.page_size_;
  const uint64_t bytes = std::min(count * r.page_size_, r.length_ - offset);
  Errc rc = transport_->fetch(r.real_region_, offset, {r.data() + offset, bytes});
  if (rc != Errc::Ok) {
    return rc;
  }
  if (final_prot != (PROT_READ | PROT_WRITE) && protect(r, first, count, final_prot) != 0) {
    return Errc::MapFailed;
  }
  std::fill_n(r.resident_.begin() + static_cast<ptrdiff_t>(first), count, uint8_t{1});
  stats_.pages_fetched += count;
  stats_.bytes_fetched += bytes;
  return Errc::Ok;
}

Errc ShadowTable::on_fault(ShadowRegion& region, uintptr_t addr, bool write) noexcept {
  const uint64_t page = (addr - region.base()) / region.page_size_;
  return write ? write_fault(region, page) : read_fault(region, page);
}

Errc ShadowTable::read_fault(ShadowRegion& r, uint64_t page) noexcept {
  ++stats_.read_faults;
  if (r.phase_ == Phase::WritePhase) {
    if (config_.verified && !violation_seen_) {
      violation_seen_ = true;
      violation_pending_ = true;
      violation_ = {r.real_region_, page, r.base_ + page * r.page_size_};
    }
    if (r.resident_[page] != 0) {
      return protect(r, page, 1, PROT_READ) == 0 ? Errc::Ok : Errc::MapFailed;
    }
    return fetch_pages(r, page, 1, PROT_READ);
  }
  if (r.phase_ == Phase::Protected) {
    r.phase_ = Phase::ReadPhase;
    r.window_ = 1;
  }
  if (r.pages_ <= config_.small_region_pages) {
    for (uint64_t p = 0; p < r.pages_;) {
      if (r.resident_[p] != 0) {
        ++p;
        continue;
      }
      uint64_t q = p;
      while (q < r.pages_ && r.resident_[q] == 0) {
        ++q;
      }
      if (Errc rc = fetch_pages(r, p, q - p, PROT_READ); rc != Errc::Ok) {
        return rc;
      }
      p = q;
    }
    return Errc::Ok;
  }
  uint64_t count = std::min(r.window_, r.pages_ - page);
  for (uint64_t i = 1; i < count; ++i) {
    if (r.resident_[page + i] != 0) {
      count = i;
      break;
    }
  }
  Errc rc = fetch_pages(r, page, count, PROT_READ);
  r.window_ = std::min(r.window_ * 2, r.window_cap_);
  return rc;
}

Errc ShadowTable::write_fault(ShadowRegion& r, uint64_t page) noexcept {
  ++stats_.write_faults;
  const bool entering = r.phase_ != Phase::WritePhase;
  if (config_.coarse_write) {
    if (protect(r, 0, r.pages_, PROT_READ | PROT_WRITE) != 0) {
      return Errc::MapFailed;
    }
    for (uint64_t p = 0; p < r.pages_;) {
      if (r.resident_[p] != 0) {
        ++p;
        continue;
      }
      uint64_t q = p;
      while (q < r.pages_ && r.resident_[q] == 0) {
        ++q;
      }
      if (Errc rc = fetch_pages(r, p, q - p, PROT_READ | PROT_WRITE); rc != Errc::Ok) {
        return rc;
      }
      p = q;
    }
    std::fill(r.dirty_.begin(), r.dirty_.end(), uint8_t{1});
    r.phase_ = Phase::WritePhase;
    r.window_ = 1;
    return Errc::Ok;
  }
  if (config_.verified) {
    if (entering) {
      if (protect(r, 0, r.pages_, PROT_NONE) != 0) {
        return Errc::MapFailed;
      }
    } else if (r.open_page_ >= 0 && static_cast<uint64_t>(r.open_page_) != page) {
      if (protect(r, static_cast<uint64_t>(r.open_page_), 1, PROT_NONE) != 0) {
        return Errc::MapFailed;
      }
    }
    r.open_page_ = static_cast<int64_t>(page);
  }
  if (r.resident_[page] == 0) {
    if (Errc rc = fetch_pages(r, page, 1, PROT_READ | PROT_WRITE); rc != Errc::Ok) {
      return rc;
    }
  } else if (protect(r, page, 1, PROT_READ | PROT_WRITE) != 0) {
    return Errc::MapFailed;
  }
  r.dirty_[page] = 1;
  if (entering) {
    r.phase_ = Phase::WritePhase;
    r.window_ = 1;
  }
  return Errc::Ok;
}

uint64_t ShadowTable::flush_dirty() {
  uint64_t flushed = 0;
  std::vector<ShadowRegion*> touched;
  for (auto& up : regions_) {
    ShadowRegion& r = *up;
    if (r.phase_ == Phase::Protected) {
      continue;
    }
    touched.push_back(&r);
    for (auto [first, count] : r.dirty_runs()) {
      // Readable for the proxy's copy, no longer writable by us.
      if (protect(r, first, count, PROT_READ) != 0) {
        throw_errno(Errc::MapFailed, "mprotect dirty run");
      }
      const uint64_t offset = first * r.page_size_;
      const uint64_t bytes = std::min(count * r.page_size_, r.length_ - offset);
      if (Errc rc = transport_->send(r.real_region_, offset, {r.data() + offset, bytes}); rc != Errc::Ok) {
        throw_transport(rc, "flush of region " + std::to_string(r.real_region_));
      }
      flushed += count;
      ++stats_.flush_transfers;
    }
  }
  if (flushed != 0) {
    if (Errc rc = transport_->complete_sends(); rc != Errc::Ok) {
      throw_transport(rc, "flush completion");
    }
  }
  for (ShadowRegion* r : touched) {
    if (protect(*r, 0, r->pages_, PROT_NONE) != 0) {
      throw_errno(Errc::MapFailed, "mprotect region");
    }
    std::fill(r->dirty_.begin(), r->dirty_.end(), uint8_t{0});
    std::fill(r->resident_.begin(), r->resident_.end(), uint8_t{0});
    r->phase_ = Phase::Protected;
    r->window_ = 1;
    r->open_page_ = -1;
  }
  stats_.pages_flushed += flushed;
  return flushed;
}

void ShadowTable::drain_to_shadow() {
  for (auto& up : regions_) {
    ShadowRegion& r = *up;
    if (r.dirty_count() != 0) {
      throw Error(Errc::InvalidState, "drain with dirty pages in region " + std::to_string(r.real_region_));
    }
    Errc rc = fetch_pages(r, 0, r.pages_, PROT_READ);
    if (rc != Errc::Ok) {
      throw_transport(rc, "drain of region " + std::to_string(r.real_region_));
    }
    r.phase_ = Phase::ReadPhase;
    r.window_ = 1;
    r.open_page_ = -1;
    stats_.bytes_drained += r.length_;
  }
}

void ShadowTable::check_violation() {
  if (!violation_pending_) {
    return;
  }
  violation_pending_ = false;
  throw Error(Errc::CycleViolation, "read of page " + std::to_string(violation_.page) + " of region " +
                                        std::to_string(violation_.region) +
                                        " after a host write without an intervening device call");
}

std::optional<CycleViolationInfo> ShadowTable::violation() const {
  if (!violation_seen_) {
    return std::nullopt;
  }
  return violation_;
}

std::vector<std::string> ShadowTable::audit() const {
  std::vector<std::string> problems;
  const auto maps = platform::read_maps();
  for (const auto& up : regions_) {
    const ShadowRegion& r = *up;
    const std::string tag = "region " + std::to_string(r.real_region()) + " (" + std::string(phase_name(r.phase())) + ")";
    if (r.window_ > r.window_cap_ || std::popcount(r.window_) != 1) {
      problems.push_back(tag + ": prefetch window " + std::to_string(r.window_));
    }
    uint64_t writable = 0;
    for (uint64_t p = 0; p < r.pages_; ++p) {
      const auto m = platform::mapping_at(maps, r.base_ + p * r.page_size_);
      if (!m) {
        problems.push_back(tag + ": page " + std::to_string(p) + " unmapped");
        continue;
      }
      writable += m->write ? 1 : 0;
      switch (r.phase_) {
        case Phase::Protected:
          if (m->read || m->write || r.dirty_[p] != 0) {
            problems.push_back(tag + ": page " + std::to_string(p) + " accessible or dirty");
          }
          break;
        case Phase::ReadPhase:
          if (m->write || r.dirty_[p] != 0 || (m->read && r.resident_[p] == 0)) {
            problems.push_back(tag + ": page " + std::to_string(p) + " writable, dirty or stale");
          }
          break;
        case Phase::WritePhase:
          if (m->write && r.dirty_[p] == 0) {
            problems.push_back(tag + ": page " + std::to_string(p) + " writable but clean");
          }
          if (m->read && r.resident_[p] == 0) {
            problems.push_back(tag + ": page " + std::to_string(p) + " readable but never fetched");
          }
          break;
      }
    }
    if (config_.verified && !config_.coarse_write && r.open_page_ >= 0 && writable > 1) {
      problems.push_back(tag + ": " + std::to_string(writable) + " writable pages in verified mode");
    }
  }
  return problems;
}

}  // namespace crum::shadow
