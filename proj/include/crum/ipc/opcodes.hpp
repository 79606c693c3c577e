#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "crum/ipc/messages.hpp"

namespace crum::ipc {

enum class Opcode : uint16_t {
#define CRUM_OPCODE(name, id, blocking, logged, req, resp) name = id,
#include "crum/ipc/opcodes.def"
#undef CRUM_OPCODE
};

struct OpcodeInfo {
  Opcode opcode;
  std::string_view name;
  bool blocking;
  bool logged;
};

inline constexpr std::array kOpcodes{
#define CRUM_OPCODE(name, id, blocking, logged, req, resp) OpcodeInfo{Opcode::name, #name, blocking, logged},
#include "crum/ipc/opcodes.def"
#undef CRUM_OPCODE
};

inline constexpr uint16_t kMaxOpcode = [] {
  uint16_t max = 0;
  for (const auto& info : kOpcodes) {
    max = static_cast<uint16_t>(info.opcode) > max ? static_cast<uint16_t>(info.opcode) : max;
  }
  return max;
}();

static_assert(kMaxOpcode < 32, "proxy per-opcode statistics hold 32 counters");

constexpr const OpcodeInfo* find_opcode(uint16_t raw) {
  for (const auto& info : kOpcodes) {
    if (static_cast<uint16_t>(info.opcode) == raw) {
      return &info;
    }
  }
  return nullptr;
}

constexpr std::string_view opcode_name(uint16_t raw) {
  const auto* info = find_opcode(raw);
  return info != nullptr ? info->name : std::string_view("<invalid>");
}

template <Opcode Op>
struct OpTraits;

#define CRUM_OPCODE(name, id, is_blocking, is_logged, req, resp)  \
  template <>                                                     \
  struct OpTraits<Opcode::name> {                                 \
    using Request = req;                                          \
    using Response = resp;                                        \
    static constexpr bool blocking = is_blocking;                 \
    static constexpr bool logged = is_logged;                     \
    static constexpr std::string_view name = #name;               \
    static_assert(WirePayload<req> && WirePayload<resp>);         \
  };
#include "crum/ipc/opcodes.def"
#undef CRUM_OPCODE

}  // namespace crum::ipc
