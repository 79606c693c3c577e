#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crum/ckpt/strategy.hpp"
#include "crum/client/replay_log.hpp"

// On-disk checkpoint image. Byte layout is documented in docs/FORMAT.md.

namespace crum::ckpt {

inline constexpr char kImageMagic[4] = {'C', 'R', 'U', 'M'};
inline constexpr uint32_t kFormatVersion = 1;
inline constexpr uint64_t kChunkBytes = uint64_t{4} << 20;

enum class SectionTag : uint32_t {
  Meta = 0x4154454d,      // "META"
  Replay = 0x4c504552,    // "REPL"
  Regions = 0x4e474552,   // "REGN"
  Payload = 0x44415950,   // "PAYD"
  AppState = 0x50505041,  // "APPP"
};

struct ImageMeta {
  uint64_t page_size = 0;
  uint64_t arena_capacity = 0;
  uint64_t shadow_base = 0;
  uint8_t mode = 0;  // 0 normal, 1 verified

  bool operator==(const ImageMeta&) const = default;
};

struct RegionEntry {
  uint64_t id = 0;
  uint8_t kind = 0;  // device::RegionKind
  uint64_t length = 0;
  uint64_t shadow = 0;  // 0 for device regions

  bool operator==(const RegionEntry&) const = default;
};

struct ImageInput {
  Codec codec = Codec::Raw;
  unsigned workers = 1;
  ImageMeta meta;
  std::span<const client::ReplayRecord> replay;
  std::span<const RegionEntry> regions;
  std::span<const std::span<const std::byte>> payloads;  // one per region
  std::span<const std::byte> app_state;
};

struct ImageContents {
  Codec codec = Codec::Raw;
  ImageMeta meta;
  std::vector<client::ReplayRecord> replay;
  std::vector<RegionEntry> regions;
  std::vector<std::vector<std::byte>> payloads;
  std::vector<std::byte> app_state;
};

struct WriteOptions {
  bool sync = true;
  // Token-bucket limit on bytes written, in MB/s (10^6 bytes). 0 = unlimited.
  double throttle_mbps = 0;
};

// Writes the image to `path`; returns its size in bytes. WriteFailed on any
// I/O error.
uint64_t write_image(const std::string& path, const ImageInput& input, const WriteOptions& options);

// Verifies every CRC and decodes all sections. CrcMismatch, FormatError.
ImageContents read_image(const std::string& path);

// Throttle from CRUM_STORE_THROTTLE_MBPS (0 when unset).
double throttle_from_env();

}  // namespace crum::ckpt
