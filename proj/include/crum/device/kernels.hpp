#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

#include "crum/device/types.hpp"

namespace crum::device {

// Kernels see regions as raw bytes; the built-ins interpret them as arrays of
// 32-bit floats. Floating-point scalars travel as the bit pattern of a double.
struct KernelArgs {
  std::span<const std::span<std::byte>> regions;
  std::span<const uint64_t> scalars;
  Grid grid;
};

using KernelFn = void (*)(const KernelArgs&);

struct KernelSpec {
  std::string_view name;
  size_t region_count;
  size_t scalar_count;
  KernelFn fn;
};

// The closed registry: fill, dot, saxpy, stencil3, sleep_us.
std::span<const KernelSpec> builtin_kernels();

const KernelSpec* find_kernel(std::string_view name);

constexpr uint64_t scalar_f64(double v) { return std::bit_cast<uint64_t>(v); }
constexpr double as_f64(uint64_t bits) { return std::bit_cast<double>(bits); }

}  // namespace crum::device
