#include "crum/error.hpp"

#include <cerrno>
#include <cstring>

#include "crum/ipc/opcodes.hpp"

namespace crum {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::Ok: return "Ok";
    case Errc::AlreadyInitialized: return "AlreadyInitialized";
    case Errc::NotInitialized: return "NotInitialized";
    case Errc::OutOfArena: return "OutOfArena";
    case Errc::UnknownRegion: return "UnknownRegion";
    case Errc::UnknownStream: return "UnknownStream";
    case Errc::UnknownEvent: return "UnknownEvent";
    case Errc::UnknownKernel: return "UnknownKernel";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::RangeOutOfBounds: return "RangeOutOfBounds";
    case Errc::ChannelClosed: return "ChannelClosed";
    case Errc::DeferredCallError: return "DeferredCallError";
    case Errc::RemoteGone: return "RemoteGone";
    case Errc::PartialTransfer: return "PartialTransfer";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::BadAddress: return "BadAddress";
    case Errc::NoProxy: return "NoProxy";
    case Errc::RestoreFailed: return "RestoreFailed";
    case Errc::InvalidState: return "InvalidState";
    case Errc::WrongThread: return "WrongThread";
    case Errc::MapFailed: return "MapFailed";
    case Errc::Overlap: return "Overlap";
    case Errc::CycleViolation: return "CycleViolation";
    case Errc::ProxyGone: return "ProxyGone";
    case Errc::DrainFailed: return "DrainFailed";
    case Errc::WriteFailed: return "WriteFailed";
    case Errc::ConcurrentCheckpoint: return "ConcurrentCheckpoint";
    case Errc::CrcMismatch: return "CrcMismatch";
    case Errc::ReplayDivergence: return "ReplayDivergence";
    case Errc::AddressUnavailable: return "AddressUnavailable";
    case Errc::FormatError: return "FormatError";
    case Errc::SystemError: return "SystemError";
  }
  return "Unknown";
}

DeferredCallError::DeferredCallError(uint64_t seq, uint16_t opcode, Errc status)
    : Error(Errc::DeferredCallError,
            "deferred call failed: seq " + std::to_string(seq) + " (" +
                std::string(ipc::opcode_name(opcode)) + "): " + std::string(errc_name(status))),
      seq_(seq),
      opcode_(opcode),
      status_(status) {}

void throw_errno(Errc code, std::string_view what) {
  const int err = errno;
  throw Error(code, std::string(what) + ": " + std::strerror(err));
}

}  // namespace crum
