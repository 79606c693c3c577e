#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string_view>

#include "crum/client/session.hpp"
#include "crum/device/device_state.hpp"

namespace crum::workloads {

// What a workload needs from a UVM runtime. The remote flavour goes through a
// proxy; the native one drives a device in this process, as a baseline.
class Runtime {
 public:
  virtual ~Runtime() = default;

  virtual void* alloc_managed(size_t bytes) = 0;
  virtual void free_managed(void* ptr) = 0;
  virtual void launch(std::string_view kernel, std::span<void* const> regions, std::span<const uint64_t> scalars,
                      device::Grid grid) = 0;
  virtual void synchronize() = 0;

  void launch(std::string_view kernel, std::initializer_list<void*> regions,
              std::initializer_list<uint64_t> scalars = {}, device::Grid grid = {}) {
    launch(kernel, std::span<void* const>(regions.begin(), regions.size()),
           std::span<const uint64_t>(scalars.begin(), scalars.size()), grid);
  }
};

class SessionRuntime : public Runtime {
 public:
  explicit SessionRuntime(client::Session& session) : session_(session) {}

  void* alloc_managed(size_t bytes) override { return session_.malloc_managed(bytes); }
  void free_managed(void* ptr) override { session_.free_managed(ptr); }
  void launch(std::string_view kernel, std::span<void* const> regions, std::span<const uint64_t> scalars,
              device::Grid grid) override;
  void synchronize() override { session_.synchronize(); }

  client::Session& session() { return session_; }

 private:
  client::Session& session_;
};

// Managed memory is the arena itself; kernels run on synchronize().
class NativeRuntime : public Runtime {
 public:
  explicit NativeRuntime(const device::DeviceConfig& config = {});

  void* alloc_managed(size_t bytes) override;
  void free_managed(void* ptr) override;
  void launch(std::string_view kernel, std::span<void* const> regions, std::span<const uint64_t> scalars,
              device::Grid grid) override;
  void synchronize() override { device_.synchronize(); }

 private:
  device::RegionId region_of(void* ptr) const;

  std::unique_ptr<device::DriverContext> ctx_;
  device::DeviceState device_;
  std::map<void*, device::RegionId> regions_;
};

}  // namespace crum::workloads
