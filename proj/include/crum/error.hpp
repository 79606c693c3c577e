#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crum {

// Status codes shared by every layer, including the wire protocol: a reply
// slot carries one of these as its int32 status.
enum class Errc : int32_t {
  Ok = 0,
  // device-model
  AlreadyInitialized = 1,
  NotInitialized = 2,
  OutOfArena = 3,
  UnknownRegion = 4,
  UnknownStream = 5,
  UnknownEvent = 6,
  UnknownKernel = 7,
  InvalidArgument = 8,
  RangeOutOfBounds = 9,
  // wire-ipc
  ChannelClosed = 20,
  DeferredCallError = 21,
  RemoteGone = 22,
  PartialTransfer = 23,
  VersionMismatch = 24,
  ProtocolError = 25,
  BadAddress = 26,
  // client-api
  NoProxy = 40,
  RestoreFailed = 41,
  InvalidState = 42,
  WrongThread = 43,
  // shadow-uvm
  MapFailed = 60,
  Overlap = 61,
  CycleViolation = 62,
  ProxyGone = 63,
  // ckpt-engine
  DrainFailed = 80,
  WriteFailed = 81,
  ConcurrentCheckpoint = 82,
  CrcMismatch = 83,
  ReplayDivergence = 84,
  AddressUnavailable = 85,
  FormatError = 86,
  // generic
  SystemError = 100,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  explicit Error(Errc code) : Error(code, std::string(errc_name(code))) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// A pipelined (non-blocking) call failed on the proxy; reported at the next
// flush, tagged with the sequence number and opcode of the call that failed.
class DeferredCallError : public Error {
 public:
  DeferredCallError(uint64_t seq, uint16_t opcode, Errc status);

  uint64_t seq() const noexcept { return seq_; }
  uint16_t opcode() const noexcept { return opcode_; }
  Errc status() const noexcept { return status_; }

 private:
  uint64_t seq_;
  uint16_t opcode_;
  Errc status_;
};

[[noreturn]] void throw_errno(Errc code, std::string_view what);

}  // namespace crum
