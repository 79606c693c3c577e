#include "support/programs.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <random>

#include "crum/device/kernels.hpp"

namespace crum::test {

namespace {

uint64_t fnv(const std::byte* p, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h = (h ^ static_cast<uint8_t>(p[i])) * 0x100000001b3ULL;
  }
  return h;
}

uint64_t floats_in(uint64_t bytes) { return bytes / sizeof(float); }

void ref_fill(std::vector<float>& r, float v) { std::fill(r.begin(), r.end(), v); }

void ref_saxpy(const std::vector<float>& x, std::vector<float>& y, float a) {
  const size_t n = std::min(x.size(), y.size());
  for (size_t i = 0; i < n; ++i) {
    y[i] = a * x[i] + y[i];
  }
}

void ref_stencil3(std::vector<float>& r, std::vector<float>& tmp) {
  const size_t n = std::min(r.size(), tmp.size());
  for (size_t i = 0; i < n; ++i) {
    const float left = r[i == 0 ? 0 : i - 1];
    const float right = r[i + 1 == n ? n - 1 : i + 1];
    tmp[i] = (left + r[i] + right) / 3.0f;
  }
  for (size_t i = 0; i < n; ++i) {
    r[i] = tmp[i];
  }
}

}  // namespace

Program random_program(uint64_t seed, const ProgramLimits& limits) {
  std::mt19937_64 rng(seed);
  auto pick = [&](uint64_t n) { return std::uniform_int_distribution<uint64_t>(0, n - 1)(rng); };
  auto value = [&] { return static_cast<float>(static_cast<int>(pick(1 << 16)) - (1 << 15)) / 4096.0f; };

  Program p;
  const uint32_t regions = 1 + static_cast<uint32_t>(pick(limits.max_regions));
  for (uint32_t r = 0; r < regions; ++r) {
    const uint64_t pages = 1 + pick(limits.max_pages);
    const uint64_t trim = 4 * pick(limits.page_size / 4);
    p.lengths.push_back(pages * limits.page_size - trim);
  }
  std::vector<bool> written(regions, false);
  const uint32_t steps = 1 + static_cast<uint32_t>(pick(limits.max_steps));
  for (uint32_t s = 0; s < steps; ++s) {
    ProgramOp op;
    const uint64_t roll = pick(100);
    std::vector<uint32_t> readable;
    for (uint32_t r = 0; r < regions; ++r) {
      if (!written[r]) {
        readable.push_back(r);
      }
    }
    if (roll < 20) {
      op.kind = ProgramOp::Kind::Write;
      op.region = static_cast<uint32_t>(pick(regions));
      op.index = pick(floats_in(p.lengths[op.region]));
      op.value = value();
    } else if (roll < 30) {
      op.kind = ProgramOp::Kind::WriteRun;
      op.region = static_cast<uint32_t>(pick(regions));
      const uint64_t n = floats_in(p.lengths[op.region]);
      op.index = pick(n);
      op.count = 1 + pick(std::min<uint64_t>(n - op.index, 4096));
      op.value = value();
    } else if (roll < 55 && !readable.empty()) {
      op.kind = ProgramOp::Kind::Read;
      op.region = readable[pick(readable.size())];
      op.index = pick(floats_in(p.lengths[op.region]));
    } else if (roll < 63 && !readable.empty()) {
      op.kind = ProgramOp::Kind::Sweep;
      op.region = readable[pick(readable.size())];
    } else if (roll < 90) {
      op.kind = ProgramOp::Kind::Launch;
      op.region = static_cast<uint32_t>(pick(regions));
      op.value = value();
      op.blocks = 1 + static_cast<uint32_t>(pick(16));
      const uint64_t k = regions > 1 ? pick(3) : 0;
      if (k == 0) {
        op.kernel = "fill";
      } else {
        op.kernel = k == 1 ? "saxpy" : "stencil3";
        do {
          op.other = static_cast<uint32_t>(pick(regions));
        } while (op.other == op.region);
      }
    } else {
      op.kind = ProgramOp::Kind::Sync;
    }
    if (op.kind == ProgramOp::Kind::Write || op.kind == ProgramOp::Kind::WriteRun) {
      written[op.region] = true;
    } else if (op.kind == ProgramOp::Kind::Launch || op.kind == ProgramOp::Kind::Sync) {
      std::fill(written.begin(), written.end(), false);
    }
    p.ops.push_back(op);
  }
  return p;
}

ProgramOutcome run_oracle(const Program& program) {
  std::vector<std::vector<float>> mem;
  for (uint64_t len : program.lengths) {
    mem.emplace_back(floats_in(len), 0.0f);
  }
  ProgramOutcome out;
  for (const auto& op : program.ops) {
    auto& r = mem[op.region];
    switch (op.kind) {
      case ProgramOp::Kind::Write:
        r[op.index] = op.value;
        break;
      case ProgramOp::Kind::WriteRun:
        for (uint64_t i = 0; i < op.count; ++i) {
          r[op.index + i] = op.value + static_cast<float>(i);
        }
        break;
      case ProgramOp::Kind::Read:
        out.observed.push_back(std::bit_cast<uint32_t>(r[op.index]));
        break;
      case ProgramOp::Kind::Sweep:
        out.observed.push_back(fnv(reinterpret_cast<const std::byte*>(r.data()), r.size() * sizeof(float)));
        break;
      case ProgramOp::Kind::Launch:
        if (op.kernel == "fill") {
          ref_fill(r, op.value);
        } else if (op.kernel == "saxpy") {
          ref_saxpy(r, mem[op.other], op.value);
        } else {
          ref_stencil3(r, mem[op.other]);
        }
        break;
      case ProgramOp::Kind::Sync:
        break;
    }
  }
  for (const auto& r : mem) {
    std::vector<std::byte> bytes(r.size() * sizeof(float));
    std::memcpy(bytes.data(), r.data(), bytes.size());
    out.finals.push_back(std::move(bytes));
  }
  return out;
}

ProgramOutcome run_program(const Program& program, workloads::Runtime& rt) {
  std::vector<float*> mem;
  for (uint64_t len : program.lengths) {
    mem.push_back(static_cast<float*>(rt.alloc_managed(len)));
  }
  ProgramOutcome out;
  for (const auto& op : program.ops) {
    float* r = mem[op.region];
    switch (op.kind) {
      case ProgramOp::Kind::Write:
        r[op.index] = op.value;
        break;
      case ProgramOp::Kind::WriteRun:
        for (uint64_t i = 0; i < op.count; ++i) {
          r[op.index + i] = op.value + static_cast<float>(i);
        }
        break;
      case ProgramOp::Kind::Read:
        out.observed.push_back(std::bit_cast<uint32_t>(r[op.index]));
        break;
      case ProgramOp::Kind::Sweep:
        out.observed.push_back(fnv(reinterpret_cast<const std::byte*>(r), program.lengths[op.region]));
        break;
      case ProgramOp::Kind::Launch: {
        const uint64_t scalar = device::scalar_f64(op.value);
        const device::Grid grid{op.blocks, 32};
        if (op.kernel == "fill") {
          rt.launch("fill", {r}, {scalar}, grid);
        } else if (op.kernel == "saxpy") {
          rt.launch("saxpy", {r, mem[op.other]}, {scalar}, grid);
        } else {
          rt.launch("stencil3", {r, mem[op.other]}, {}, grid);
        }
        break;
      }
      case ProgramOp::Kind::Sync:
        rt.synchronize();
        break;
    }
  }
  rt.synchronize();
  for (size_t i = 0; i < mem.size(); ++i) {
    std::vector<std::byte> bytes(program.lengths[i]);
    std::memcpy(bytes.data(), mem[i], bytes.size());
    out.finals.push_back(std::move(bytes));
  }
  for (float* r : mem) {
    rt.free_managed(r);
  }
  return out;
}

std::string describe(const ProgramOutcome& a, const ProgramOutcome& b) {
  if (a.observed.size() != b.observed.size()) {
    return "read count " + std::to_string(a.observed.size()) + " vs " + std::to_string(b.observed.size());
  }
  for (size_t i = 0; i < a.observed.size(); ++i) {
    if (a.observed[i] != b.observed[i]) {
      return "read #" + std::to_string(i) + " differs";
    }
  }
  if (a.finals.size() != b.finals.size()) {
    return "region count differs";
  }
  for (size_t r = 0; r < a.finals.size(); ++r) {
    if (a.finals[r] != b.finals[r]) {
      return "final bytes of region " + std::to_string(r) + " differ";
    }
  }
  return "identical";
}

}  // namespace crum::test
