#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crum/workloads/runtime.hpp"

namespace crum::workloads {

struct Params {
  uint64_t seed = 1;
  // dotprod / redundant: floats per vector.
  uint64_t elements = uint64_t{64} << 20;
  // redundant: fraction of elements that hold a constant.
  double redundancy = 0;
  // 0 picks the workload's default.
  uint32_t iterations = 0;
  // bigreg: bytes per region; tinyker: region count.
  uint64_t region_bytes = uint64_t{64} << 20;
  uint32_t regions = 0;
  // tinyker: kernels per iteration.
  uint32_t kernels = 0;
};

// An iterative program over managed memory. All evolving state lives in
// managed regions plus what save_state() returns, so a restored session can
// pick up where a checkpoint left off.
class Workload {
 public:
  virtual ~Workload() = default;

  virtual std::string_view name() const = 0;
  virtual void setup(Runtime& rt) = 0;
  // Runs iteration iteration()+1.
  virtual void step(Runtime& rt) = 0;

  uint32_t iteration() const { return iteration_; }
  uint32_t iterations() const { return iterations_; }
  bool done() const { return iteration_ >= iterations_; }

  // Device-synchronizes, then CRC32 over every region plus the scalar results.
  uint32_t checksum(Runtime& rt);
  // Last scalar result (dot product value and the like), 0 if none.
  double value() const { return values_.empty() ? 0.0 : values_.back(); }

  std::vector<std::byte> save_state() const;
  void load_state(std::span<const std::byte> blob);

  const std::vector<std::pair<float*, uint64_t>>& regions() const { return regions_; }
  uint64_t managed_bytes() const;

 protected:
  Workload(Params params, uint32_t iterations) : params_(params), iterations_(iterations) {}

  float* alloc(Runtime& rt, uint64_t bytes);

  Params params_;
  uint32_t iteration_ = 0;
  uint32_t iterations_;
  std::vector<std::pair<float*, uint64_t>> regions_;
  std::vector<double> values_;
};

// dotprod, redundant, tinyker, bigreg, violator. InvalidArgument otherwise.
std::unique_ptr<Workload> make_workload(std::string_view name, const Params& params);
std::span<const std::string_view> workload_names();

// Value of a random float with every bit pattern except Inf/NaN equally
// likely; the payload is incompressible.
float random_float_bits(uint64_t& state);
// Uniform in [0, 1) on a 2^-24 grid.
float random_unit(uint64_t& state);
uint64_t splitmix64(uint64_t& state);

// Fills `out` the way dotprod/redundant do: element i is 1.0f when
// i % 1024 < redundancy * 1024, otherwise random_float_bits.
void fill_vector(std::span<float> out, double redundancy, uint64_t seed);

}  // namespace crum::workloads
