#pragma once

#include <sys/types.h>

#include <atomic>
#include <cstdint>

namespace crum::ipc {

// Cross-process futex on a word in shared memory. Both are async-signal-safe.
// Returns false when the wait timed out.
bool futex_wait(std::atomic<uint32_t>& word, uint32_t expected, int timeout_ms) noexcept;
void futex_wake_all(std::atomic<uint32_t>& word) noexcept;

// Spin iterations before sleeping; zero on single-CPU hosts where spinning
// only delays the peer we are waiting for.
int spin_budget() noexcept;

// Watches another process for exit via a pidfd (falls back to kill(pid, 0)).
class PeerWatch {
 public:
  PeerWatch() = default;
  explicit PeerWatch(pid_t pid);
  PeerWatch(PeerWatch&& other) noexcept;
  PeerWatch& operator=(PeerWatch&& other) noexcept;
  PeerWatch(const PeerWatch&) = delete;
  PeerWatch& operator=(const PeerWatch&) = delete;
  ~PeerWatch();

  pid_t pid() const { return pid_; }
  bool watching() const { return pid_ > 0; }
  // Async-signal-safe.
  bool alive() const noexcept;
  void close() noexcept;

 private:
  pid_t pid_ = 0;
  int pidfd_ = -1;
};

}  // namespace crum::ipc
