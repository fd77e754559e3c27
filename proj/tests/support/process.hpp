// SPDX-License-Identifier: Apache-2.0
// Child processes for CLI-level tests.
#pragma once

#include <csignal>
#include <stdexcept>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

namespace tvcache::testing {

/// A child with stdout on a pipe; stderr goes to /dev/null unless `keep_stderr`.
class Child {
 public:
  explicit Child(const std::vector<std::string>& argv, bool keep_stderr = false) {
    int fds[2];
    if (::pipe(fds) != 0) throw std::runtime_error("pipe failed");
    pid_ = ::fork();
    if (pid_ < 0) throw std::runtime_error("fork failed");
    if (pid_ == 0) {
      ::dup2(fds[1], STDOUT_FILENO);
      if (!keep_stderr) {
        const int null = ::open("/dev/null", O_WRONLY);
        ::dup2(null, STDERR_FILENO);
      }
      ::close(fds[0]);
      ::close(fds[1]);
      std::vector<char*> args;
      for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      ::execv(args[0], args.data());
      ::_exit(127);
    }
    ::close(fds[1]);
    out_ = fds[0];
  }

  ~Child() {
    if (pid_ > 0) {
      kill(SIGKILL);
      wait();
    }
    if (out_ >= 0) ::close(out_);
  }

  Child(const Child&) = delete;
  Child& operator=(const Child&) = delete;

  /// Reads stdout up to the next newline; empty at EOF.
  std::string read_line() {
    std::string line;
    char c;
    while (::read(out_, &c, 1) == 1) {
      if (c == '\n') return line;
      line.push_back(c);
    }
    return line;
  }

  std::string read_all() {
    std::string s;
    char buf[4096];
    for (ssize_t n; (n = ::read(out_, buf, sizeof buf)) > 0;) s.append(buf, static_cast<std::size_t>(n));
    return s;
  }

  void kill(int sig) {
    if (pid_ > 0) ::kill(pid_, sig);
  }

  /// Exit code, or 128 + signal number.
  int wait() {
    if (pid_ <= 0) return status_;
    int st = 0;
    ::waitpid(pid_, &st, 0);
    pid_ = -1;
    status_ = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
    return status_;
  }

 private:
  pid_t pid_ = -1;
  int out_ = -1;
  int status_ = -1;
};

struct RunResult {
  int exit_code = -1;
  std::string out;
};

inline RunResult run_command(const std::vector<std::string>& argv) {
  Child c(argv);
  RunResult r;
  r.out = c.read_all();
  r.exit_code = c.wait();
  return r;
}

}  // namespace tvcache::testing
