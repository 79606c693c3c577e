#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crum/ckpt/strategy.hpp"
#include "crum/ipc/shared_region.hpp"

namespace crum::cli {

// CRUM_PROXY_BIN, else crum-proxy next to the running executable, else the
// path baked in at build time.
std::string proxy_binary();
std::string new_session_id();
// $TMPDIR (or /tmp) + /crum-<id>.sock
std::string control_socket_path(std::string_view session_id);

struct ProxyOptions {
  std::string session_id;  // generated when empty
  ipc::ChannelConfig channel = ipc::ChannelConfig::from_env();
  std::optional<uint64_t> arena_bytes;
  std::string binary;  // proxy_binary() when empty
  int ready_timeout_ms = 10000;
};

// A crum-proxy child serving a freshly created shared region.
class ProxyProcess {
 public:
  // NoProxy if the binary cannot be started or never reports ready.
  explicit ProxyProcess(ProxyOptions options = {});
  ~ProxyProcess();
  ProxyProcess(const ProxyProcess&) = delete;
  ProxyProcess& operator=(const ProxyProcess&) = delete;

  const std::string& session_id() const { return session_id_; }
  const std::string& shm_name() const { return region_.name(); }
  pid_t pid() const { return pid_; }
  ipc::ChannelHeader& header() const { return region_.header(); }

  // Exit code, or 128 + signal.
  int wait();
  std::optional<int> poll();
  // Waits up to `timeout`; nullopt if still running.
  std::optional<int> wait_for(std::chrono::milliseconds timeout);
  void kill(int sig);

 private:
  std::string session_id_;
  ipc::SharedRegion region_;
  pid_t pid_ = -1;
  std::optional<int> exit_code_;
};

// Spawns argv[0] (PATH lookup) with `env` added to this process's
// environment. Throws SystemError when the program cannot be started.
pid_t spawn(const std::vector<std::string>& argv, const std::map<std::string, std::string>& env);
// waitpid status to an exit code: status, or 128 + signal.
int exit_code_of(int wait_status);

// Relays checkpoint requests into a session's control mailbox and waits for
// the application to answer.
class ControlClient {
 public:
  explicit ControlClient(ipc::ChannelHeader& header) : header_(header) {}

  struct Reply {
    Errc status = Errc::Ok;
    double pause_ms = 0;
    double total_ms = 0;
    uint64_t bytes = 0;
  };

  // Blocks until the final result arrives, `alive` turns false or the
  // deadline passes (InvalidState in the latter two cases).
  Reply checkpoint(std::string_view strategy, std::string_view path, unsigned workers,
                   const std::function<bool()>& alive, std::chrono::milliseconds timeout = std::chrono::minutes(30));

 private:
  uint32_t submit(std::string_view strategy, std::string_view path, unsigned workers);
  std::optional<Reply> find(uint32_t seq) const;
  bool taken(uint32_t seq) const;

  ipc::ChannelHeader& header_;
};

struct RunOptions {
  std::vector<std::string> app;
  std::string session_id;
  bool verified = false;
  std::optional<uint32_t> pipeline_depth;
  std::optional<std::string> restart_image;
  bool quiet = false;
};

// `crum run` / `crum restart`: proxy + app + control socket. Returns the
// app's exit code; launcher failures print a crum-error line and return 1.
int run_session(const RunOptions& options);

// `crum ckpt`: sends one CKPT request over the control socket. Prints the
// reply; returns 0 on OK.
int request_checkpoint(const std::string& session_id, std::string_view strategy, const std::string& path,
                       unsigned workers);

}  // namespace crum::cli
