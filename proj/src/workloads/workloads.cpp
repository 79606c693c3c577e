#include "crum/workloads/workloads.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>

#include "crum/device/kernels.hpp"
#include "crum/error.hpp"

namespace crum::workloads {

using device::scalar_f64;

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

float random_float_bits(uint64_t& state) {
  for (;;) {
    const auto bits = static_cast<uint32_t>(splitmix64(state) >> 32);
    if ((bits & 0x7f800000u) != 0x7f800000u) {
      return std::bit_cast<float>(bits);
    }
  }
}

float random_unit(uint64_t& state) {
  return static_cast<float>(splitmix64(state) >> 40) * 0x1p-24f;
}

void fill_vector(std::span<float> out, double redundancy, uint64_t seed) {
  const auto constant_below = static_cast<uint64_t>(redundancy * 1024.0);
  uint64_t state = seed;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = (i % 1024) < constant_below ? 1.0f : random_float_bits(state);
  }
}

float* Workload::alloc(Runtime& rt, uint64_t bytes) {
  auto* p = static_cast<float*>(rt.alloc_managed(bytes));
  regions_.emplace_back(p, bytes);
  return p;
}

uint64_t Workload::managed_bytes() const {
  uint64_t total = 0;
  for (const auto& [p, len] : regions_) {
    total += len;
  }
  return total;
}

uint32_t Workload::checksum(Runtime& rt) {
  rt.synchronize();
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [p, len] : regions_) {
    const auto* bytes = reinterpret_cast<const Bytef*>(p);
    for (uint64_t off = 0; off < len; off += uint64_t{1} << 30) {
      crc = crc32(crc, bytes + off, static_cast<uInt>(std::min<uint64_t>(len - off, uint64_t{1} << 30)));
    }
  }
  crc = crc32(crc, reinterpret_cast<const Bytef*>(values_.data()), static_cast<uInt>(values_.size() * sizeof(double)));
  return static_cast<uint32_t>(crc);
}

namespace {

template <class T>
void put(std::vector<std::byte>& out, T v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::byte>& in) {
  if (in.size() < sizeof(T)) {
    throw Error(Errc::InvalidArgument, "workload state blob is truncated");
  }
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in = in.subspan(sizeof(T));
  return v;
}

}  // namespace

std::vector<std::byte> Workload::save_state() const {
  std::vector<std::byte> out;
  put(out, iteration_);
  put(out, static_cast<uint32_t>(regions_.size()));
  for (const auto& [p, len] : regions_) {
    put(out, reinterpret_cast<uint64_t>(p));
    put(out, len);
  }
  put(out, static_cast<uint32_t>(values_.size()));
  for (double v : values_) {
    put(out, v);
  }
  return out;
}

void Workload::load_state(std::span<const std::byte> blob) {
  iteration_ = get<uint32_t>(blob);
  const auto count = get<uint32_t>(blob);
  regions_.clear();
  for (uint32_t i = 0; i < count; ++i) {
    const auto p = get<uint64_t>(blob);
    const auto len = get<uint64_t>(blob);
    regions_.emplace_back(reinterpret_cast<float*>(p), len);
  }
  const auto nvalues = get<uint32_t>(blob);
  values_.clear();
  for (uint32_t i = 0; i < nvalues; ++i) {
    values_.push_back(get<double>(blob));
  }
  if (!blob.empty()) {
    throw Error(Errc::InvalidArgument, "workload state blob has trailing bytes");
  }
}

namespace {

// Two vectors and their dot product. Each later iteration perturbs one
// element of `a` from the host before recomputing.
class DotProd : public Workload {
 public:
  DotProd(std::string_view name, Params p) : Workload(p, p.iterations ? p.iterations : 1), name_(name) {}

  std::string_view name() const override { return name_; }

  void setup(Runtime& rt) override {
    const uint64_t bytes = params_.elements * sizeof(float);
    auto* a = alloc(rt, bytes);
    auto* b = alloc(rt, bytes);
    alloc(rt, sizeof(double));
    fill_vector({a, params_.elements}, params_.redundancy, params_.seed);
    fill_vector({b, params_.elements}, params_.redundancy, params_.seed ^ 0x5bd1e995ULL);
  }

  void step(Runtime& rt) override {
    auto* a = regions_[0].first;
    auto* out = regions_[2].first;
    if (iteration_ > 0) {
      a[iteration_ % params_.elements] = static_cast<float>(iteration_);
    }
    rt.launch("dot", {a, regions_[1].first, out}, {}, {8, 256});
    rt.synchronize();
    double result;
    std::memcpy(&result, out, sizeof(result));
    values_.push_back(result);
    ++iteration_;
  }

 private:
  std::string name_;
};

// Many small regions and many short kernels, with the host poking a few
// elements between device phases.
class TinyKer : public Workload {
 public:
  explicit TinyKer(Params p)
      : Workload(p, p.iterations ? p.iterations : 20),
        count_(p.regions ? p.regions : 64),
        kernels_(p.kernels ? p.kernels : 250) {}

  std::string_view name() const override { return "tinyker"; }

  void setup(Runtime& rt) override {
    uint64_t state = params_.seed;
    for (uint32_t i = 0; i < count_; ++i) {
      const uint64_t bytes = (12 << 10) + (splitmix64(state) % ((116 << 10) / 4 + 1)) * 4;
      auto* r = alloc(rt, bytes);
      for (uint64_t j = 0; j < bytes / 4; ++j) {
        r[j] = random_unit(state);
      }
    }
  }

  void step(Runtime& rt) override {
    uint64_t state = params_.seed * 0x100000001b3ULL + iteration_;
    const auto n = static_cast<uint64_t>(regions_.size());
    for (uint32_t k = 0; k < kernels_; ++k) {
      const uint64_t a = splitmix64(state) % n;
      const uint64_t b = (a + 1 + splitmix64(state) % (n - 1)) % n;
      if (k % 4 == 3) {
        rt.launch("stencil3", {regions_[a].first, regions_[b].first});
      } else {
        rt.launch("saxpy", {regions_[a].first, regions_[b].first}, {scalar_f64(0.125)});
      }
    }
    rt.synchronize();
    // Read phase, then write phase: the order the shadow protocol expects.
    double sum = 0;
    for (int i = 0; i < 4; ++i) {
      const auto& [p, len] = regions_[splitmix64(state) % n];
      sum += p[splitmix64(state) % (len / 4)];
    }
    for (int i = 0; i < 4; ++i) {
      const auto& [p, len] = regions_[splitmix64(state) % n];
      p[splitmix64(state) % (len / 4)] = random_unit(state);
    }
    values_.push_back(sum);
    ++iteration_;
  }

 private:
  uint32_t count_;
  uint32_t kernels_;
};

// A few large regions, a handful of kernels per iteration.
class BigReg : public Workload {
 public:
  explicit BigReg(Params p) : Workload(p, p.iterations ? p.iterations : 20) {}

  std::string_view name() const override { return "bigreg"; }

  void setup(Runtime& rt) override {
    const uint64_t bytes = params_.region_bytes / 4 * 4;
    if (bytes == 0) {
      throw Error(Errc::InvalidArgument, "bigreg region size must be at least 4 bytes");
    }
    uint64_t state = params_.seed;
    for (int i = 0; i < 2; ++i) {
      auto* r = alloc(rt, bytes);
      for (uint64_t j = 0; j < bytes / 4; ++j) {
        r[j] = random_unit(state);
      }
    }
    alloc(rt, bytes);
  }

  void step(Runtime& rt) override {
    auto* r0 = regions_[0].first;
    auto* r1 = regions_[1].first;
    auto* tmp = regions_[2].first;
    const uint64_t n = regions_[0].second / 4;
    rt.launch("stencil3", {r0, tmp}, {}, {16, 256});
    rt.launch("saxpy", {r0, r1}, {scalar_f64(0.5)}, {16, 256});
    rt.launch("stencil3", {r1, tmp}, {}, {16, 256});
    rt.synchronize();
    double sum = 0;
    const uint64_t stride = std::max<uint64_t>(1, n / 64);
    for (uint64_t i = 0; i < n; i += stride) {
      sum += r1[i];
    }
    r0[iteration_ % n] = static_cast<float>(iteration_);
    values_.push_back(sum);
    ++iteration_;
  }
};

// Writes page A then reads page B of one region without a kernel in between.
class Violator : public Workload {
 public:
  explicit Violator(Params p) : Workload(p, p.iterations ? p.iterations : 1) {}

  std::string_view name() const override { return "violator"; }

  void setup(Runtime& rt) override {
    auto* r = alloc(rt, 64 << 10);
    rt.launch("fill", {r}, {scalar_f64(1.0)});
    rt.synchronize();
  }

  void step(Runtime& rt) override {
    auto& [p, len] = regions_[0];
    p[0] = 2.0f;
    values_.push_back(p[len / 4 - 1]);
    rt.launch("fill", {p}, {scalar_f64(3.0)});
    rt.synchronize();
    ++iteration_;
  }
};

constexpr std::array<std::string_view, 5> kNames{"dotprod", "redundant", "tinyker", "bigreg", "violator"};

}  // namespace

std::span<const std::string_view> workload_names() { return kNames; }

std::unique_ptr<Workload> make_workload(std::string_view name, const Params& params) {
  if (name == "dotprod") {
    return std::make_unique<DotProd>(name, params);
  }
  if (name == "redundant") {
    return std::make_unique<DotProd>(name, params);
  }
  if (name == "tinyker") {
    if (params.regions == 1) {
      throw Error(Errc::InvalidArgument, "tinyker needs at least two regions");
    }
    return std::make_unique<TinyKer>(params);
  }
  if (name == "bigreg") {
    return std::make_unique<BigReg>(params);
  }
  if (name == "violator") {
    return std::make_unique<Violator>(params);
  }
  throw Error(Errc::InvalidArgument, "unknown workload '" + std::string(name) + "'");
}

}  // namespace crum::workloads
