#include "crum/platform/maps.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "crum/error.hpp"

namespace crum::platform {

std::vector<MapEntry> read_maps(pid_t pid) {
  const std::string path = pid == 0 ? "/proc/self/maps" : "/proc/" + std::to_string(pid) + "/maps";
  std::ifstream in(path);
  if (!in) {
    throw Error(Errc::SystemError, "cannot open " + path);
  }
  std::vector<MapEntry> maps;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string range, perms, offset, dev, inode;
    fields >> range >> perms >> offset >> dev >> inode;
    MapEntry e;
    const auto dash = range.find('-');
    e.start = std::stoull(range.substr(0, dash), nullptr, 16);
    e.end = std::stoull(range.substr(dash + 1), nullptr, 16);
    e.read = perms.size() > 0 && perms[0] == 'r';
    e.write = perms.size() > 1 && perms[1] == 'w';
    e.exec = perms.size() > 2 && perms[2] == 'x';
    e.shared = perms.size() > 3 && perms[3] == 's';
    std::getline(fields >> std::ws, e.path);
    maps.push_back(std::move(e));
  }
  return maps;
}

std::optional<MapEntry> mapping_at(const std::vector<MapEntry>& maps, uintptr_t addr) {
  auto it = std::upper_bound(maps.begin(), maps.end(), addr,
                             [](uintptr_t a, const MapEntry& e) { return a < e.start; });
  if (it == maps.begin()) {
    return std::nullopt;
  }
  --it;
  if (addr < it->end) {
    return *it;
  }
  return std::nullopt;
}

bool maps_contain(const std::vector<MapEntry>& maps, const std::string& needle) {
  return std::any_of(maps.begin(), maps.end(),
                     [&](const MapEntry& e) { return e.path.find(needle) != std::string::npos; });
}

}  // namespace crum::platform
