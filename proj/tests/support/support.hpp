#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crum/shadow/shadow.hpp"

namespace crum::test {

// Real pages for a ShadowTable without a proxy: a byte vector per region.
class FakeTransport : public shadow::ShadowTransport {
 public:
  std::map<uint64_t, std::vector<std::byte>> real;
  uint64_t fetch_calls = 0;
  uint64_t send_calls = 0;
  uint64_t complete_calls = 0;
  std::vector<std::pair<uint64_t, uint64_t>> sends;  // (offset, length) of each send
  bool fail = false;

  Errc fetch(uint64_t region, uint64_t offset, std::span<std::byte> dst) noexcept override;
  Errc send(uint64_t region, uint64_t offset, std::span<const std::byte> src) noexcept override;
  Errc complete_sends() noexcept override;
};

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

struct CommandResult {
  int code = -1;
  std::string out;  // stdout and stderr, interleaved
};

// Runs argv with extra environment variables, capturing output.
CommandResult run_command(const std::vector<std::string>& argv, const std::map<std::string, std::string>& env = {});

std::string bin_path(const std::string& name);

std::vector<std::byte> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::byte> bytes);

// Bytes the deterministic test pattern puts at position i.
inline std::byte pattern_byte(uint64_t seed, uint64_t i) {
  uint64_t x = (i + 1) * 0x9e3779b97f4a7c15ULL ^ seed;
  x ^= x >> 29;
  return static_cast<std::byte>(x * 0xbf58476d1ce4e5b9ULL >> 56);
}

}  // namespace crum::test
