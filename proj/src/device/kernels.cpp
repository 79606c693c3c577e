#include "crum/device/kernels.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstring>
#include <ctime>
#include <thread>

#include "crum/error.hpp"

namespace crum::device {
namespace {

std::span<float> as_floats(std::span<std::byte> bytes) {
  return {reinterpret_cast<float*>(bytes.data()), bytes.size() / sizeof(float)};
}

// Splits [0, n) into grid.blocks contiguous chunks and hands each chunk to fn.
// Results never depend on the decomposition; it only shapes the loop.
template <class Fn>
void for_each_block(size_t n, const Grid& grid, Fn&& fn) {
  const size_t blocks = std::max<size_t>(1, grid.blocks);
  const size_t chunk = (n + blocks - 1) / blocks;
  for (size_t b = 0; b < blocks; ++b) {
    const size_t begin = b * chunk;
    const size_t end = std::min(n, begin + chunk);
    if (begin >= end) {
      break;
    }
    fn(begin, end);
  }
}

void kernel_fill(const KernelArgs& args) {
  auto region = as_floats(args.regions[0]);
  const auto value = static_cast<float>(as_f64(args.scalars[0]));
  for_each_block(region.size(), args.grid, [&](size_t begin, size_t end) {
    std::fill(region.begin() + begin, region.begin() + end, value);
  });
}

void kernel_dot(const KernelArgs& args) {
  auto a = as_floats(args.regions[0]);
  auto b = as_floats(args.regions[1]);
  auto out = args.regions[2];
  if (out.size() < sizeof(double)) {
    throw Error(Errc::RangeOutOfBounds, "dot: output region smaller than 8 bytes");
  }
  const size_t n = std::min(a.size(), b.size());
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  std::memcpy(out.data(), &sum, sizeof(sum));
}

void kernel_saxpy(const KernelArgs& args) {
  auto x = as_floats(args.regions[0]);
  auto y = as_floats(args.regions[1]);
  const auto a = static_cast<float>(as_f64(args.scalars[0]));
  const size_t n = std::min(x.size(), y.size());
  for_each_block(n, args.grid, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      y[i] = a * x[i] + y[i];
    }
  });
}

void kernel_stencil3(const KernelArgs& args) {
  auto r = as_floats(args.regions[0]);
  auto tmp = as_floats(args.regions[1]);
  const size_t n = std::min(r.size(), tmp.size());
  if (n == 0) {
    return;
  }
  for_each_block(n, args.grid, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const size_t lo = i == 0 ? 0 : i - 1;
      const size_t hi = i + 1 == n ? n - 1 : i + 1;
      tmp[i] = (r[lo] + r[i] + r[hi]) / 3.0f;
    }
  });
  std::copy(tmp.begin(), tmp.begin() + static_cast<ptrdiff_t>(n), r.begin());
}

// Short waits spin so that a 20us kernel costs 20us; nanosleep overshoots by
// tens of microseconds on most kernels.
void kernel_sleep_us(const KernelArgs& args) {
  const uint64_t micros = args.scalars[0];
  using clock = std::chrono::steady_clock;
  if (micros >= 500) {
    timespec ts{static_cast<time_t>(micros / 1000000), static_cast<long>((micros % 1000000) * 1000)};
    while (nanosleep(&ts, &ts) != 0) {
    }
    return;
  }
  const auto deadline = clock::now() + std::chrono::microseconds(micros);
  while (clock::now() < deadline) {
  }
}

constexpr std::array kBuiltins{
    KernelSpec{"fill", 1, 1, kernel_fill},
    KernelSpec{"dot", 3, 0, kernel_dot},
    KernelSpec{"saxpy", 2, 1, kernel_saxpy},
    KernelSpec{"stencil3", 2, 0, kernel_stencil3},
    KernelSpec{"sleep_us", 0, 1, kernel_sleep_us},
};

}  // namespace

std::span<const KernelSpec> builtin_kernels() { return kBuiltins; }

const KernelSpec* find_kernel(std::string_view name) {
  for (const auto& spec : kBuiltins) {
    if (spec.name == name) {
      return &spec;
    }
  }
  return nullptr;
}

}  // namespace crum::device
