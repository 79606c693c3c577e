#pragma once

#include <sys/types.h>

#include <chrono>
#include <string>

#include "crum/ckpt/strategy.hpp"

namespace crum::client {
class Session;
}

namespace crum::ckpt {

// Drives checkpoints for one session. At most one FORKED child is alive at a
// time; its result is collected by status()/wait().
class Engine {
 public:
  explicit Engine(client::Session& session);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  // Caller guarantees the session is RUNNING. Throws ConcurrentCheckpoint,
  // DrainFailed, WriteFailed.
  CkptReport checkpoint(const std::string& path, const Strategy& strategy);

  // Reaps a finished child without blocking.
  CkptStatus status();
  // Last known status, no reaping.
  const CkptStatus& peek() const { return status_; }
  // Blocks until any running child exits.
  CkptStatus wait();
  bool child_running() const { return child_ > 0; }

 private:
  void collect(int wait_status);

  client::Session& session_;
  pid_t child_ = -1;
  int pipe_fd_ = -1;
  std::chrono::steady_clock::time_point started_;
  CkptReport pending_;
  CkptStatus status_;
};

// Rebuilds the state saved in `path` inside a freshly opened session: replays
// the allocation log, refills every region and hands the app-state blob to
// the resume hook. CrcMismatch, FormatError, ReplayDivergence,
// AddressUnavailable.
void restore(client::Session& session, const std::string& path);

}  // namespace crum::ckpt
