#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "crum/ckpt/strategy.hpp"

namespace crum::ckpt {

// Whole-buffer encode/decode of one payload chunk.
std::vector<std::byte> encode_chunk(Codec codec, std::span<const std::byte> raw);
// `raw_len` is the exact decoded size; anything else is FormatError.
void decode_chunk(Codec codec, std::span<const std::byte> encoded, std::span<std::byte> raw);

}  // namespace crum::ckpt
