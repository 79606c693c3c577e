#pragma once

// Random host/kernel programs over managed memory, and a plain host-array
// interpreter that serves as their oracle.

#include <cstdint>
#include <string>
#include <vector>

#include "crum/workloads/runtime.hpp"

namespace crum::test {

struct ProgramOp {
  enum class Kind { Write, WriteRun, Read, Sweep, Launch, Sync } kind = Kind::Sync;
  uint32_t region = 0;
  uint32_t other = 0;   // second region for saxpy/stencil3
  uint64_t index = 0;   // element index
  uint64_t count = 0;   // WriteRun length
  float value = 0;      // written value or kernel scalar
  std::string kernel;   // fill | saxpy | stencil3
  uint32_t blocks = 1;
};

struct Program {
  std::vector<uint64_t> lengths;  // bytes, multiple of 4
  std::vector<ProgramOp> ops;
};

struct ProgramLimits {
  uint32_t max_regions = 8;
  uint32_t max_pages = 32;
  uint32_t max_steps = 50;
  uint64_t page_size = 4096;
};

// Reads never follow a write to the same region without a kernel launch or
// synchronize in between.
Program random_program(uint64_t seed, const ProgramLimits& limits = {});

struct ProgramOutcome {
  std::vector<uint64_t> observed;  // float bits of reads, hashes of sweeps
  std::vector<std::vector<std::byte>> finals;

  bool operator==(const ProgramOutcome&) const = default;
};

// Direct execution on host vectors; kernels take effect at launch.
ProgramOutcome run_oracle(const Program& program);
// Execution through a runtime; regions are freed before returning.
ProgramOutcome run_program(const Program& program, workloads::Runtime& rt);

std::string describe(const ProgramOutcome& a, const ProgramOutcome& b);

}  // namespace crum::test
