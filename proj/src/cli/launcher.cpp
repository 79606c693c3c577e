#include "crum/cli/launcher.hpp"

#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "crum/env.hpp"
#include "crum/ipc/wait.hpp"

extern char** environ;

namespace crum::cli {

using Clock = std::chrono::steady_clock;

namespace {

bool is_executable(const std::string& path) { return !path.empty() && access(path.c_str(), X_OK) == 0; }

void print_error(Errc code, const std::string& message) {
  std::fprintf(stderr, "crum-error: %s: %s\n", std::string(errc_name(code)).c_str(), message.c_str());
}

}  // namespace

std::string proxy_binary() {
  if (auto bin = env::get(env::kProxyBin)) {
    return *bin;
  }
  std::error_code ec;
  auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    auto sibling = (self.parent_path() / "crum-proxy").string();
    if (is_executable(sibling)) {
      return sibling;
    }
  }
#ifdef CRUM_DEFAULT_PROXY_BIN
  return CRUM_DEFAULT_PROXY_BIN;
#else
  return "crum-proxy";
#endif
}

std::string new_session_id() {
  static std::atomic<uint32_t> counter{0};
  std::random_device rd;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%d-%u-%04x", static_cast<int>(getpid()), counter.fetch_add(1), rd() & 0xffff);
  return buf;
}

std::string control_socket_path(std::string_view session_id) {
  std::string dir = env::get("TMPDIR").value_or("/tmp");
  if (dir.empty()) {
    dir = "/tmp";
  }
  return dir + "/crum-" + std::string(session_id) + ".sock";
}

int exit_code_of(int status) {
  if (WIFEXITED(status)) {
    return WEXITSTATUS(status);
  }
  if (WIFSIGNALED(status)) {
    return 128 + WTERMSIG(status);
  }
  return 1;
}

pid_t spawn(const std::vector<std::string>& argv, const std::map<std::string, std::string>& extra) {
  if (argv.empty()) {
    throw Error(Errc::InvalidArgument, "nothing to run");
  }
  std::vector<std::string> env_strings;
  for (char** e = environ; *e != nullptr; ++e) {
    std::string_view entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string_view::npos && extra.count(std::string(entry.substr(0, eq))) != 0) {
      continue;
    }
    env_strings.emplace_back(entry);
  }
  for (const auto& [k, v] : extra) {
    env_strings.push_back(k + "=" + v);
  }
  std::vector<char*> envp;
  for (auto& s : env_strings) {
    envp.push_back(s.data());
  }
  envp.push_back(nullptr);
  std::vector<std::string> args = argv;
  std::vector<char*> cargv;
  for (auto& a : args) {
    cargv.push_back(a.data());
  }
  cargv.push_back(nullptr);
  pid_t pid;
  const int rc = posix_spawnp(&pid, cargv[0], nullptr, nullptr, cargv.data(), envp.data());
  if (rc != 0) {
    errno = rc;
    throw_errno(Errc::SystemError, "cannot start " + argv[0]);
  }
  return pid;
}

ProxyProcess::ProxyProcess(ProxyOptions options)
    : session_id_(options.session_id.empty() ? new_session_id() : options.session_id),
      region_(ipc::SharedRegion::create(ipc::SharedRegion::name_for_session(session_id_), options.channel)) {
  std::map<std::string, std::string> env;
  if (options.arena_bytes) {
    env[env::kArenaBytes] = std::to_string(*options.arena_bytes);
  }
  const std::string bin = options.binary.empty() ? proxy_binary() : options.binary;
  try {
    pid_ = spawn({bin, "--shm", region_.name()}, env);
  } catch (const Error& e) {
    throw Error(Errc::NoProxy, e.what());
  }
  auto& state = region_.header().proxy_state;
  const auto deadline = Clock::now() + std::chrono::milliseconds(options.ready_timeout_ms);
  for (;;) {
    const uint32_t st = state.load(std::memory_order_acquire);
    if (st == static_cast<uint32_t>(ipc::ProxyState::Ready)) {
      return;
    }
    if (auto code = poll()) {
      throw Error(Errc::NoProxy, bin + " exited with code " + std::to_string(*code) + " before becoming ready");
    }
    if (Clock::now() > deadline) {
      kill(SIGKILL);
      wait();
      throw Error(Errc::NoProxy, bin + " did not become ready in time");
    }
    ipc::futex_wait(state, st, 20);
  }
}

ProxyProcess::~ProxyProcess() {
  if (!exit_code_ && pid_ > 0) {
    if (!wait_for(std::chrono::milliseconds(2000))) {
      kill(SIGKILL);
      wait();
    }
  }
}

std::optional<int> ProxyProcess::poll() {
  if (exit_code_ || pid_ <= 0) {
    return exit_code_;
  }
  int status = 0;
  const pid_t r = waitpid(pid_, &status, WNOHANG);
  if (r == pid_) {
    exit_code_ = exit_code_of(status);
  } else if (r < 0 && errno == ECHILD) {
    exit_code_ = 1;
  }
  return exit_code_;
}

int ProxyProcess::wait() {
  while (!exit_code_) {
    int status = 0;
    const pid_t r = waitpid(pid_, &status, 0);
    if (r == pid_) {
      exit_code_ = exit_code_of(status);
    } else if (r < 0 && errno != EINTR) {
      exit_code_ = 1;
    }
  }
  return *exit_code_;
}

std::optional<int> ProxyProcess::wait_for(std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (!poll()) {
    if (Clock::now() > deadline) {
      return std::nullopt;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  return exit_code_;
}

void ProxyProcess::kill(int sig) {
  if (!exit_code_ && pid_ > 0) {
    ::kill(pid_, sig);
  }
}

namespace {

std::mutex g_mailbox_mutex;

}  // namespace

uint32_t ControlClient::submit(std::string_view strategy, std::string_view path, unsigned workers) {
  auto& mb = header_.mailbox;
  const uint32_t seq = mb.request_seq.load(std::memory_order_acquire) + 1;
  if (strategy.size() >= sizeof(mb.request.strategy) || path.size() >= sizeof(mb.request.path)) {
    throw Error(Errc::InvalidArgument, "strategy or path too long");
  }
  ipc::ControlRequest req{};
  std::memcpy(req.strategy, strategy.data(), strategy.size());
  std::memcpy(req.path, path.data(), path.size());
  req.workers = workers;
  mb.request = req;
  mb.request_seq.store(seq, std::memory_order_release);
  return seq;
}

bool ControlClient::taken(uint32_t seq) const {
  return header_.mailbox.taken_seq.load(std::memory_order_acquire) == seq;
}

std::optional<ControlClient::Reply> ControlClient::find(uint32_t seq) const {
  auto& mb = header_.mailbox;
  const uint32_t count = mb.result_count.load(std::memory_order_acquire);
  const uint32_t n = std::min(count, ipc::kControlResultSlots);
  for (uint32_t i = 0; i < n; ++i) {
    const auto& slot = mb.results[(count - 1 - i) % ipc::kControlResultSlots];
    if (slot.request_seq == seq && slot.final != 0) {
      return Reply{static_cast<Errc>(slot.status), static_cast<double>(slot.pause_us) / 1e3,
                   static_cast<double>(slot.total_us) / 1e3, slot.image_bytes};
    }
  }
  return std::nullopt;
}

ControlClient::Reply ControlClient::checkpoint(std::string_view strategy, std::string_view path, unsigned workers,
                                               const std::function<bool()>& alive,
                                               std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  auto expired = [&] { return !alive() || Clock::now() > deadline; };
  uint32_t seq;
  {
    // One request in the slot at a time: wait for the app to take the last.
    std::lock_guard lock(g_mailbox_mutex);
    while (!taken(header_.mailbox.request_seq.load(std::memory_order_acquire))) {
      if (expired()) {
        return {Errc::InvalidState};
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    seq = submit(strategy, path, workers);
  }
  for (;;) {
    if (auto reply = find(seq)) {
      return *reply;
    }
    if (expired()) {
      return {Errc::InvalidState};
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
}

namespace {

class ControlServer {
 public:
  ControlServer(std::string path, ControlClient& client, std::function<bool()> alive)
      : path_(std::move(path)), client_(client), alive_(std::move(alive)) {
    fd_ = socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) {
      throw_errno(Errc::SystemError, "socket");
    }
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path_.size() >= sizeof(addr.sun_path)) {
      ::close(fd_);
      throw Error(Errc::InvalidArgument, "control socket path too long: " + path_);
    }
    std::strcpy(addr.sun_path, path_.c_str());
    ::unlink(path_.c_str());
    if (bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || listen(fd_, 8) != 0) {
      ::close(fd_);
      throw_errno(Errc::SystemError, "control socket " + path_);
    }
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  ~ControlServer() {
    stop_ = true;
    acceptor_.join();
    for (auto& t : workers_) {
      t.join();
    }
    ::close(fd_);
    ::unlink(path_.c_str());
  }

 private:
  void accept_loop() {
    while (!stop_) {
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) {
        continue;
      }
      const int conn = accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
      if (conn >= 0) {
        workers_.emplace_back([this, conn] { serve(conn); });
      }
    }
  }

  void serve(int conn) {
    std::string line;
    char c;
    const auto deadline = Clock::now() + std::chrono::seconds(5);
    while (line.size() < 1024 && Clock::now() < deadline) {
      pollfd p{conn, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) {
        continue;
      }
      if (::read(conn, &c, 1) != 1 || c == '\n') {
        break;
      }
      line.push_back(c);
    }
    std::istringstream in(line);
    std::string verb, strategy, path;
    unsigned workers = 0;
    in >> verb >> strategy >> path;
    if (!(in >> workers)) {
      workers = 0;
    }
    std::string reply;
    if (verb != "CKPT" || strategy.empty() || path.empty()) {
      reply = "ERR ProtocolError\n";
    } else {
      auto r = client_.checkpoint(strategy, path, workers, [this] { return !stop_ && alive_(); });
      char buf[128];
      if (r.status == Errc::Ok) {
        std::snprintf(buf, sizeof(buf), "OK %.3f %.3f %llu\n", r.pause_ms, r.total_ms,
                      static_cast<unsigned long long>(r.bytes));
      } else {
        std::snprintf(buf, sizeof(buf), "ERR %s\n", std::string(errc_name(r.status)).c_str());
      }
      reply = buf;
    }
    ssize_t ignored = ::write(conn, reply.data(), reply.size());
    (void)ignored;
    ::close(conn);
  }

  std::string path_;
  ControlClient& client_;
  std::function<bool()> alive_;
  int fd_ = -1;
  std::atomic<bool> stop_{false};
  std::thread acceptor_;
  std::vector<std::thread> workers_;  // only touched by the acceptor until stop
};

}  // namespace

int run_session(const RunOptions& options) {
  if (options.app.empty()) {
    print_error(Errc::InvalidArgument, "no application given (usage: crum run -- <app> [args])");
    return 1;
  }
  if (options.restart_image && access(options.restart_image->c_str(), R_OK) != 0) {
    print_error(Errc::RestoreFailed, "cannot read image " + *options.restart_image);
    return 1;
  }
  std::optional<ProxyProcess> proxy;
  try {
    ProxyOptions po;
    po.session_id = options.session_id;
    proxy.emplace(po);
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return 1;
  }

  std::map<std::string, std::string> env{{env::kShmName, proxy->shm_name()}, {env::kSessionId, proxy->session_id()}};
  if (options.verified) {
    env[env::kMode] = "verified";
  }
  if (options.pipeline_depth) {
    env[env::kPipelineDepth] = std::to_string(*options.pipeline_depth);
  }
  if (options.restart_image) {
    env[env::kRestart] = std::filesystem::absolute(*options.restart_image).string();
  }

  pid_t app;
  try {
    app = spawn(options.app, env);
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    proxy->kill(SIGTERM);
    return 1;
  }
  if (!options.quiet) {
    std::fprintf(stderr, "crum: session %s proxy %d app %d\n", proxy->session_id().c_str(), proxy->pid(), app);
  }

  std::atomic<bool> app_alive{true};
  int app_code = 1;
  {
    ControlClient control(proxy->header());
    std::optional<ControlServer> server;
    try {
      server.emplace(control_socket_path(proxy->session_id()), control, [&] { return app_alive.load(); });
    } catch (const Error& e) {
      print_error(e.code(), e.what());
    }
    bool proxy_reported = false;
    for (;;) {
      int status = 0;
      const pid_t r = waitpid(app, &status, WNOHANG);
      if (r == app) {
        app_code = exit_code_of(status);
        break;
      }
      if (r < 0 && errno == ECHILD) {
        break;
      }
      if (auto code = proxy->poll(); code && !proxy_reported) {
        proxy_reported = true;
        if (*code != 0) {
          print_error(Errc::ProxyGone, "proxy exited with code " + std::to_string(*code) + " while the app runs");
        }
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    app_alive = false;
  }
  if (!proxy->wait_for(std::chrono::seconds(5))) {
    proxy->kill(SIGKILL);
    proxy->wait();
  }
  return app_code;
}

int request_checkpoint(const std::string& session_id, std::string_view strategy, const std::string& path,
                       unsigned workers) {
  const std::string sock = control_socket_path(session_id);
  const int fd = socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, sock.c_str(), sizeof(addr.sun_path) - 1);
  if (fd < 0 || connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (fd >= 0) {
      ::close(fd);
    }
    print_error(Errc::NoProxy, "no running session " + session_id + " (" + sock + ")");
    return 1;
  }
  std::string line = "CKPT " + std::string(strategy) + " " + std::filesystem::absolute(path).string();
  if (workers != 0) {
    line += " " + std::to_string(workers);
  }
  line += "\n";
  if (::write(fd, line.data(), line.size()) != static_cast<ssize_t>(line.size())) {
    ::close(fd);
    print_error(Errc::ChannelClosed, "control socket write failed");
    return 1;
  }
  std::string reply;
  char c;
  while (::read(fd, &c, 1) == 1 && c != '\n') {
    reply.push_back(c);
  }
  ::close(fd);
  if (reply.rfind("OK ", 0) == 0) {
    std::printf("%s\n", reply.c_str());
    return 0;
  }
  if (reply.rfind("ERR ", 0) == 0) {
    std::fprintf(stderr, "crum-error: %s: checkpoint refused\n", reply.substr(4).c_str());
  } else {
    print_error(Errc::ProtocolError, "unexpected reply '" + reply + "'");
  }
  return 1;
}

}  // namespace crum::cli
