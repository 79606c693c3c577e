#include "crum/ipc/shared_region.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <new>
#include <utility>

#include "crum/env.hpp"
#include "crum/error.hpp"

namespace crum::ipc {

namespace {

constexpr uint64_t align_up(uint64_t v, uint64_t a) { return (v + a - 1) / a * a; }

}  // namespace

BulkMode parse_bulk_mode(std::string_view text) {
  if (text == "single-copy") {
    return BulkMode::SingleCopy;
  }
  if (text == "scratch") {
    return BulkMode::Scratch;
  }
  throw Error(Errc::InvalidArgument, "bulk mode must be single-copy or scratch, got '" + std::string(text) + "'");
}

ChannelConfig ChannelConfig::from_env() {
  ChannelConfig config;
  config.depth = static_cast<uint32_t>(env::get_u64_or(env::kPipelineDepth, config.depth));
  if (auto mode = env::get(env::kBulkMode)) {
    config.bulk_mode = parse_bulk_mode(*mode);
  }
  return config;
}

std::string SharedRegion::name_for_session(std::string_view session_id) {
  return "/crum-" + std::string(session_id);
}

SharedRegion::SharedRegion(std::string name, std::byte* base, size_t size, bool owner)
    : name_(std::move(name)), base_(base), size_(size), owner_(owner) {}

SharedRegion SharedRegion::create(const std::string& name, const ChannelConfig& config) {
  if (config.slot_count == 0 || (config.slot_count & (config.slot_count - 1)) != 0) {
    throw Error(Errc::InvalidArgument, "slot count must be a power of two");
  }
  if (config.depth == 0 || config.depth > config.slot_count) {
    throw Error(Errc::InvalidArgument, "pipeline depth must be in [1, slot count]");
  }
  const uint64_t page = static_cast<uint64_t>(sysconf(_SC_PAGESIZE));
  const uint64_t slots_offset = align_up(sizeof(ChannelHeader), 64);
  const uint64_t scratch_offset = align_up(slots_offset + sizeof(CallMessage) * config.slot_count, page);
  const uint64_t total = align_up(scratch_offset + config.scratch_bytes, page);

  int fd = shm_open(name.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
  if (fd < 0) {
    throw_errno(Errc::SystemError, "shm_open(" + name + ")");
  }
  if (ftruncate(fd, static_cast<off_t>(total)) != 0) {
    close(fd);
    shm_unlink(name.c_str());
    throw_errno(Errc::SystemError, "ftruncate(" + name + ")");
  }
  void* base = mmap(nullptr, total, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  close(fd);
  if (base == MAP_FAILED) {
    shm_unlink(name.c_str());
    throw_errno(Errc::SystemError, "mmap(" + name + ")");
  }
  auto* header = new (base) ChannelHeader{};
  header->bulk_mode = static_cast<uint8_t>(config.bulk_mode);
  header->magic = kChannelMagic;
  header->slot_count = config.slot_count;
  header->default_depth = config.depth;
  header->slots_offset = slots_offset;
  header->scratch_offset = scratch_offset;
  header->scratch_bytes = config.scratch_bytes;
  header->total_bytes = total;
  std::atomic_thread_fence(std::memory_order_release);
  // Written last: a peer that sees the version sees a complete header.
  std::atomic_ref<uint8_t>(header->layout_version).store(kLayoutVersion, std::memory_order_release);
  return SharedRegion(name, static_cast<std::byte*>(base), total, true);
}

SharedRegion SharedRegion::attach(const std::string& name) {
  int fd = shm_open(name.c_str(), O_RDWR, 0);
  if (fd < 0) {
    if (errno == ENOENT) {
      throw Error(Errc::NoProxy, "no shared region named " + name);
    }
    throw_errno(Errc::SystemError, "shm_open(" + name + ")");
  }
  struct stat st {};
  if (fstat(fd, &st) != 0 || static_cast<size_t>(st.st_size) < sizeof(ChannelHeader)) {
    close(fd);
    throw Error(Errc::VersionMismatch, "shared region " + name + " is too small");
  }
  const auto size = static_cast<size_t>(st.st_size);
  void* base = mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  close(fd);
  if (base == MAP_FAILED) {
    throw_errno(Errc::SystemError, "mmap(" + name + ")");
  }
  SharedRegion region(name, static_cast<std::byte*>(base), size, false);
  auto& header = region.header();
  const uint8_t version = std::atomic_ref<uint8_t>(header.layout_version).load(std::memory_order_acquire);
  if (version != kLayoutVersion || header.magic != kChannelMagic || header.total_bytes != size) {
    throw Error(Errc::VersionMismatch, "shared region " + name + " has layout version " +
                                           std::to_string(version) + ", expected " +
                                           std::to_string(kLayoutVersion));
  }
  return region;
}

SharedRegion::SharedRegion(SharedRegion&& other) noexcept
    : name_(std::move(other.name_)),
      base_(std::exchange(other.base_, nullptr)),
      size_(std::exchange(other.size_, 0)),
      owner_(std::exchange(other.owner_, false)) {}

SharedRegion& SharedRegion::operator=(SharedRegion&& other) noexcept {
  if (this != &other) {
    reset();
    name_ = std::move(other.name_);
    base_ = std::exchange(other.base_, nullptr);
    size_ = std::exchange(other.size_, 0);
    owner_ = std::exchange(other.owner_, false);
  }
  return *this;
}

SharedRegion::~SharedRegion() { reset(); }

void SharedRegion::reset() noexcept {
  if (base_ != nullptr) {
    munmap(base_, size_);
    base_ = nullptr;
  }
  if (owner_) {
    shm_unlink(name_.c_str());
    owner_ = false;
  }
}

void SharedRegion::unlink() {
  shm_unlink(name_.c_str());
  owner_ = false;
}

CallMessage* SharedRegion::slots() const {
  return reinterpret_cast<CallMessage*>(base_ + header().slots_offset);
}

std::span<std::byte> SharedRegion::scratch() const {
  return {base_ + header().scratch_offset, header().scratch_bytes};
}

}  // namespace crum::ipc
