#include "crum/ipc/wait.hpp"

#include <linux/futex.h>
#include <poll.h>
#include <signal.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <climits>
#include <ctime>
#include <utility>

namespace crum::ipc {

bool futex_wait(std::atomic<uint32_t>& word, uint32_t expected, int timeout_ms) noexcept {
  timespec ts{timeout_ms / 1000, static_cast<long>(timeout_ms % 1000) * 1000000L};
  long rc = syscall(SYS_futex, reinterpret_cast<uint32_t*>(&word), FUTEX_WAIT, expected,
                    timeout_ms >= 0 ? &ts : nullptr, nullptr, 0);
  return !(rc != 0 && errno == ETIMEDOUT);
}

void futex_wake_all(std::atomic<uint32_t>& word) noexcept {
  syscall(SYS_futex, reinterpret_cast<uint32_t*>(&word), FUTEX_WAKE, INT_MAX, nullptr, nullptr, 0);
}

int spin_budget() noexcept {
  static const int budget = sysconf(_SC_NPROCESSORS_ONLN) > 1 ? 4000 : 0;
  return budget;
}

PeerWatch::PeerWatch(pid_t pid) : pid_(pid) {
#ifdef SYS_pidfd_open
  pidfd_ = static_cast<int>(syscall(SYS_pidfd_open, pid, 0));
#endif
}

PeerWatch::PeerWatch(PeerWatch&& other) noexcept
    : pid_(std::exchange(other.pid_, 0)), pidfd_(std::exchange(other.pidfd_, -1)) {}

PeerWatch& PeerWatch::operator=(PeerWatch&& other) noexcept {
  if (this != &other) {
    close();
    pid_ = std::exchange(other.pid_, 0);
    pidfd_ = std::exchange(other.pidfd_, -1);
  }
  return *this;
}

PeerWatch::~PeerWatch() { close(); }

void PeerWatch::close() noexcept {
  if (pidfd_ >= 0) {
    ::close(pidfd_);
  }
  pidfd_ = -1;
  pid_ = 0;
}

bool PeerWatch::alive() const noexcept {
  if (pid_ <= 0) {
    return false;
  }
  if (pidfd_ >= 0) {
    // A pidfd polls readable once the process has exited, zombie or not.
    pollfd pfd{pidfd_, POLLIN, 0};
    return poll(&pfd, 1, 0) == 0;
  }
  return kill(pid_, 0) == 0 || errno == EPERM;
}

}  // namespace crum::ipc
