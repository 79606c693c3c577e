#pragma once

#include <sys/types.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace crum::platform {

struct MapEntry {
  uintptr_t start = 0;
  uintptr_t end = 0;
  bool read = false;
  bool write = false;
  bool exec = false;
  bool shared = false;
  std::string path;
};

// Parses /proc/<pid>/maps (pid 0 = self).
std::vector<MapEntry> read_maps(pid_t pid = 0);

// Protection of the mapping containing addr, or nullopt if unmapped.
std::optional<MapEntry> mapping_at(const std::vector<MapEntry>& maps, uintptr_t addr);

bool maps_contain(const std::vector<MapEntry>& maps, const std::string& needle);

}  // namespace crum::platform
