#include "crum/workloads/runtime.hpp"

#include <vector>

#include "crum/error.hpp"

namespace crum::workloads {

void SessionRuntime::launch(std::string_view kernel, std::span<void* const> regions, std::span<const uint64_t> scalars,
                            device::Grid grid) {
  std::vector<client::RegionRef> refs(regions.begin(), regions.end());
  session_.launch(client::kDefaultStream, kernel, refs, scalars, grid);
}

NativeRuntime::NativeRuntime(const device::DeviceConfig& config)
    : ctx_(std::make_unique<device::DriverContext>()), device_(device::DeviceState::init(*ctx_, config)) {}

void* NativeRuntime::alloc_managed(size_t bytes) {
  auto a = device_.alloc(device::RegionKind::Managed, bytes);
  void* ptr = device_.region_bytes(a.id).data();
  regions_[ptr] = a.id;
  return ptr;
}

void NativeRuntime::free_managed(void* ptr) {
  device_.free(region_of(ptr));
  regions_.erase(ptr);
}

device::RegionId NativeRuntime::region_of(void* ptr) const {
  auto it = regions_.find(ptr);
  if (it == regions_.end()) {
    throw Error(Errc::UnknownRegion, "pointer is not the start of a managed allocation");
  }
  return it->second;
}

void NativeRuntime::launch(std::string_view kernel, std::span<void* const> regions, std::span<const uint64_t> scalars,
                           device::Grid grid) {
  device::KernelTask task;
  task.kernel_name = std::string(kernel);
  for (void* r : regions) {
    task.region_args.push_back(region_of(r));
  }
  task.scalar_args.assign(scalars.begin(), scalars.end());
  task.grid = grid;
  device_.launch_kernel(device::kDefaultStream, std::move(task));
}

}  // namespace crum::workloads
