#include "crum/env.hpp"

#include <charconv>
#include <cstdlib>
#include <string_view>

#include "crum/error.hpp"

namespace crum::env {

std::optional<std::string> get(const char* name) {
  const char* value = std::getenv(name);
  if (value == nullptr || *value == '\0') {
    return std::nullopt;
  }
  return std::string(value);
}

std::optional<uint64_t> get_u64(const char* name) {
  auto text = get(name);
  if (!text) {
    return std::nullopt;
  }
  std::string_view sv = *text;
  int base = 10;
  if (sv.size() > 2 && sv[0] == '0' && (sv[1] == 'x' || sv[1] == 'X')) {
    sv.remove_prefix(2);
    base = 16;
  }
  uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), out, base);
  if (ec != std::errc() || ptr != sv.data() + sv.size()) {
    throw Error(Errc::InvalidArgument, std::string(name) + " is not an unsigned integer: " + *text);
  }
  return out;
}

uint64_t get_u64_or(const char* name, uint64_t fallback) {
  return get_u64(name).value_or(fallback);
}

bool get_flag(const char* name, bool fallback) {
  auto text = get(name);
  if (!text) {
    return fallback;
  }
  return *text == "1" || *text == "true" || *text == "yes" || *text == "on";
}

}  // namespace crum::env
