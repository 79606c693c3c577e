#include "crum/ckpt/codec.hpp"

#include <lz4.h>
#include <zlib.h>

#include <cstring>
#include <limits>
#include <string>
#include <thread>

#include "crum/error.hpp"

namespace crum::ckpt {

std::string_view codec_name(Codec codec) {
  switch (codec) {
    case Codec::Raw:
      return "raw";
    case Codec::Deflate:
      return "deflate";
    case Codec::Lz4:
      return "lz4";
  }
  return "?";
}

Codec parse_codec(std::string_view name) {
  if (name == "raw" || name == "none") {
    return Codec::Raw;
  }
  if (name == "deflate" || name == "gzip") {
    return Codec::Deflate;
  }
  if (name == "lz4") {
    return Codec::Lz4;
  }
  throw Error(Errc::InvalidArgument, "unknown codec '" + std::string(name) + "'");
}

Strategy Strategy::parse(std::string_view name, std::optional<unsigned> workers) {
  Strategy s;
  if (name == "naive") {
    s.codec = Codec::Raw;
  } else if (name == "gzip") {
    s.codec = Codec::Deflate;
  } else if (name == "pgzip") {
    s.codec = Codec::Deflate;
    s.workers = std::max(1u, std::thread::hardware_concurrency());
  } else if (name == "lz4") {
    s.codec = Codec::Lz4;
  } else if (name == "forked") {
    s.mode = Mode::Forked;
  } else {
    throw Error(Errc::InvalidArgument,
                "unknown strategy '" + std::string(name) + "' (forked, naive, gzip, pgzip, lz4)");
  }
  if (workers) {
    s.workers = std::max(1u, *workers);
  }
  return s;
}

std::string Strategy::name() const {
  if (mode == Mode::Forked) {
    return codec == Codec::Raw ? "forked" : "forked-" + std::string(codec_name(codec));
  }
  switch (codec) {
    case Codec::Raw:
      return "naive";
    case Codec::Deflate:
      return workers > 1 ? "pgzip" : "gzip";
    case Codec::Lz4:
      return "lz4";
  }
  return "?";
}

std::vector<std::byte> encode_chunk(Codec codec, std::span<const std::byte> raw) {
  switch (codec) {
    case Codec::Raw:
      return {raw.begin(), raw.end()};
    case Codec::Deflate: {
      uLongf bound = compressBound(static_cast<uLong>(raw.size()));
      std::vector<std::byte> out(bound);
      // Level 1: the fastest DEFLATE setting.
      int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                         static_cast<uLong>(raw.size()), 1);
      if (rc != Z_OK) {
        throw Error(Errc::WriteFailed, "deflate failed: " + std::to_string(rc));
      }
      out.resize(bound);
      return out;
    }
    case Codec::Lz4: {
      if (raw.size() > static_cast<size_t>(LZ4_MAX_INPUT_SIZE)) {
        throw Error(Errc::WriteFailed, "lz4 chunk too large");
      }
      std::vector<std::byte> out(static_cast<size_t>(LZ4_compressBound(static_cast<int>(raw.size()))));
      int n = LZ4_compress_default(reinterpret_cast<const char*>(raw.data()), reinterpret_cast<char*>(out.data()),
                                   static_cast<int>(raw.size()), static_cast<int>(out.size()));
      if (n <= 0) {
        throw Error(Errc::WriteFailed, "lz4 compression failed");
      }
      out.resize(static_cast<size_t>(n));
      return out;
    }
  }
  throw Error(Errc::InvalidArgument, "unknown codec");
}

void decode_chunk(Codec codec, std::span<const std::byte> encoded, std::span<std::byte> raw) {
  switch (codec) {
    case Codec::Raw:
      if (encoded.size() != raw.size()) {
        throw Error(Errc::FormatError, "raw chunk length mismatch");
      }
      std::memcpy(raw.data(), encoded.data(), raw.size());
      return;
    case Codec::Deflate: {
      uLongf len = static_cast<uLongf>(raw.size());
      int rc = uncompress(reinterpret_cast<Bytef*>(raw.data()), &len, reinterpret_cast<const Bytef*>(encoded.data()),
                          static_cast<uLong>(encoded.size()));
      if (rc != Z_OK || len != raw.size()) {
        throw Error(Errc::FormatError, "corrupt deflate chunk");
      }
      return;
    }
    case Codec::Lz4: {
      int n = LZ4_decompress_safe(reinterpret_cast<const char*>(encoded.data()), reinterpret_cast<char*>(raw.data()),
                                  static_cast<int>(encoded.size()), static_cast<int>(raw.size()));
      if (n < 0 || static_cast<size_t>(n) != raw.size()) {
        throw Error(Errc::FormatError, "corrupt lz4 chunk");
      }
      return;
    }
  }
  throw Error(Errc::FormatError, "unknown codec " + std::to_string(static_cast<int>(codec)));
}

}  // namespace crum::ckpt
