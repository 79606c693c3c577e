#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "crum/error.hpp"

namespace crum::ckpt {

enum class Codec : uint8_t { Raw = 0, Deflate = 1, Lz4 = 2 };

std::string_view codec_name(Codec codec);
Codec parse_codec(std::string_view name);

enum class Mode : uint8_t { Inline, Forked };

struct Strategy {
  Mode mode = Mode::Inline;
  Codec codec = Codec::Raw;
  unsigned workers = 1;
  bool sync = true;
  // Storage throttle in MB/s; CRUM_STORE_THROTTLE_MBPS when unset.
  std::optional<double> throttle_mbps;

  // naive | gzip | pgzip | lz4 | forked. pgzip defaults to one worker per CPU.
  static Strategy parse(std::string_view name, std::optional<unsigned> workers = std::nullopt);
  std::string name() const;
};

struct CkptReport {
  double pause_s = 0;
  double total_s = 0;
  uint64_t image_bytes = 0;
  // Phase breakdown (seconds).
  double quiesce_s = 0;  // pipeline flush + device synchronize + dirty flush
  double drain_s = 0;    // managed regions copied into the shadows
  double stage_s = 0;    // device regions copied to host staging
  double write_s = 0;    // encode + write + sync (child side for FORKED)
  double fork_s = 0;
  uint64_t bulk_bytes = 0;
  bool complete = true;  // false while a FORKED child is still writing
};

struct CkptStatus {
  enum class Kind { Idle, ChildRunning, LastResult } kind = Kind::Idle;
  Errc result = Errc::Ok;
  std::string message;
  CkptReport report;
};

}  // namespace crum::ckpt
