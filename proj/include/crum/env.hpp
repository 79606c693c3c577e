#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace crum::env {

// Names of every environment variable the runtime reads.
inline constexpr const char* kShmName = "CRUM_SHM_NAME";
inline constexpr const char* kSessionId = "CRUM_SESSION_ID";
inline constexpr const char* kRestart = "CRUM_RESTART";
inline constexpr const char* kMode = "CRUM_MODE";
inline constexpr const char* kPageSize = "CRUM_PAGE_SIZE";
inline constexpr const char* kArenaBytes = "CRUM_ARENA_BYTES";
inline constexpr const char* kPipelineDepth = "CRUM_PIPELINE_DEPTH";
inline constexpr const char* kBulkMode = "CRUM_BULK_MODE";
inline constexpr const char* kSmallRegionPages = "CRUM_SMALL_REGION_PAGES";
inline constexpr const char* kCoarseWrite = "CRUM_COARSE_WRITE";
inline constexpr const char* kStoreThrottleMbps = "CRUM_STORE_THROTTLE_MBPS";
inline constexpr const char* kShadowBase = "CRUM_SHADOW_BASE";
inline constexpr const char* kProxyBin = "CRUM_PROXY_BIN";

std::optional<std::string> get(const char* name);

// Parses an unsigned integer (decimal, or hex with 0x prefix). Throws
// Error(InvalidArgument) when set but malformed.
std::optional<uint64_t> get_u64(const char* name);

uint64_t get_u64_or(const char* name, uint64_t fallback);

bool get_flag(const char* name, bool fallback);

}  // namespace crum::env
