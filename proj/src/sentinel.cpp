#include "clowdr/sentinel.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <map>
#include <mutex>
#include <thread>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"

namespace clowdr {

namespace {

struct ProcStat {
  pid_t pid = 0;
  pid_t ppid = 0;
  unsigned long long cpu_ticks = 0;
  unsigned long long start_ticks = 0;
  long rss_pages = 0;
};

bool read_proc_stat(pid_t pid, ProcStat& out) {
  char path[64];
  std::snprintf(path, sizeof path, "/proc/%d/stat", pid);
  const int fd = ::open(path, O_RDONLY | O_CLOEXEC);
  if (fd < 0) return false;
  char buf[1024];
  const ssize_t n = ::read(fd, buf, sizeof buf - 1);
  ::close(fd);
  if (n <= 0) return false;
  buf[n] = '\0';
  // comm may contain spaces and parentheses; fields resume after the last ')'.
  const char* p = std::strrchr(buf, ')');
  if (!p) return false;
  char state = 0;
  int ppid = 0;
  unsigned long long utime = 0, stime = 0, starttime = 0;
  long long cutime = 0, cstime = 0;
  long rss = 0;
  const int got = std::sscanf(p + 2,
                              "%c %d %*d %*d %*d %*d %*u %*u %*u %*u %*u %llu %llu %lld %lld %*d %*d %*d %*d %llu "
                              "%*u %ld",
                              &state, &ppid, &utime, &stime, &cutime, &cstime, &starttime, &rss);
  if (got != 8) return false;
  out.pid = pid;
  out.ppid = ppid;
  out.cpu_ticks = utime + stime + static_cast<unsigned long long>(std::max(0LL, cutime + cstime));
  out.start_ticks = starttime;
  out.rss_pages = std::max(0L, rss);
  return true;
}

double uptime_seconds() {
  double up = 0;
  if (FILE* f = std::fopen("/proc/uptime", "re")) {
    if (std::fscanf(f, "%lf", &up) != 1) up = 0;
    std::fclose(f);
  }
  return up;
}

int open_log(const std::filesystem::path& path) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw OutputDirError("cannot open " + path.string() + ": " + std::strerror(errno));
  return fd;
}

class Fd {
 public:
  explicit Fd(int fd = -1) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

// dash does not exec the last command of `sh -c`, so the workload is usually
// a grandchild that PR_SET_PDEATHSIG on the shell never reaches. The guard is
// a forked helper blocked on a pipe from the supervisor: EOF without a byte
// means the supervisor died, and the guard kills the task's process group.
class Guard {
 public:
  explicit Guard(pid_t group) {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) return;
    const pid_t pid = ::fork();
    if (pid == 0) {
      ::close(fds[1]);
      char c;
      ssize_t n;
      do {
        n = ::read(fds[0], &c, 1);
      } while (n < 0 && errno == EINTR);
      if (n == 0) ::kill(-group, SIGKILL);
      ::_exit(0);
    }
    ::close(fds[0]);
    if (pid < 0) {
      ::close(fds[1]);
      return;
    }
    pid_ = pid;
    write_end_ = fds[1];
  }
  ~Guard() { release(); }
  Guard(const Guard&) = delete;
  Guard& operator=(const Guard&) = delete;

  // Normal completion: dismiss the guard without touching the group.
  void release() {
    if (pid_ <= 0) return;
    (void)!::write(write_end_, "x", 1);
    ::close(write_end_);
    int status;
    while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
    }
    pid_ = -1;
  }

 private:
  pid_t pid_ = -1;
  int write_end_ = -1;
};

}  // namespace

TreeUsage read_tree_usage(pid_t root) {
  ProcStat root_stat;
  if (!read_proc_stat(root, root_stat)) throw ProcessGone(root);

  std::multimap<pid_t, ProcStat> by_parent;
  if (DIR* dir = ::opendir("/proc")) {
    while (dirent* e = ::readdir(dir)) {
      char* end = nullptr;
      const long pid = std::strtol(e->d_name, &end, 10);
      if (*end != '\0' || pid <= 0 || pid == root) continue;
      ProcStat st;
      if (read_proc_stat(static_cast<pid_t>(pid), st)) by_parent.emplace(st.ppid, st);
    }
    ::closedir(dir);
  }

  static const long ticks_per_second = ::sysconf(_SC_CLK_TCK);
  static const long page_size = ::sysconf(_SC_PAGESIZE);

  TreeUsage usage;
  usage.root_age_seconds =
      std::max(0.0, uptime_seconds() - static_cast<double>(root_stat.start_ticks) / ticks_per_second);
  std::vector<ProcStat> frontier{root_stat};
  unsigned long long ticks = 0;
  while (!frontier.empty()) {
    const ProcStat st = frontier.back();
    frontier.pop_back();
    usage.pids.push_back(st.pid);
    ticks += st.cpu_ticks;
    usage.rss_bytes += static_cast<std::uint64_t>(st.rss_pages) * static_cast<std::uint64_t>(page_size);
    auto [lo, hi] = by_parent.equal_range(st.pid);
    for (auto it = lo; it != hi; ++it) frontier.push_back(it->second);
  }
  usage.cpu_seconds = static_cast<double>(ticks) / ticks_per_second;
  return usage;
}

TreeSampler::TreeSampler(pid_t root, std::chrono::steady_clock::time_point launched)
    : root_(root), launched_(launched) {}

ResourceSample TreeSampler::sample() {
  const auto usage = read_tree_usage(root_);
  const auto now = std::chrono::steady_clock::now();
  ResourceSample s;
  s.t = std::chrono::duration<double>(now - launched_).count();
  s.rss_bytes = usage.rss_bytes;
  if (last_wall_) {
    const double wall = std::chrono::duration<double>(now - *last_wall_).count();
    s.cpu_pct = wall > 0 ? std::max(0.0, usage.cpu_seconds - last_cpu_) / wall * 100.0 : 0.0;
  } else {
    const double age = std::max(usage.root_age_seconds, s.t);
    s.cpu_pct = age > 0 ? usage.cpu_seconds / age * 100.0 : 0.0;
  }
  last_wall_ = now;
  last_cpu_ = usage.cpu_seconds;
  return s;
}

ResourceSample sample_tree(pid_t root_pid) { return TreeSampler(root_pid).sample(); }

TaskRecord supervise(const TaskSpec& task, const std::filesystem::path& clowdir, const SuperviseOptions& opts) {
  if (!(opts.interval_s > 0)) throw Error(ErrorCategory::Usage, "sampling interval must be positive");
  const auto task_dir = clowdir / task.task_id;
  std::error_code ec;
  std::filesystem::create_directories(task_dir, ec);
  if (ec) throw OutputDirError("cannot create " + task_dir.string() + ": " + ec.message());

  const int attempt = opts.attempt.value_or(latest_attempt(task_dir) + 1);

  TaskRecord record;
  record.task_id = task.task_id;
  record.experiment_id = task.experiment_id;
  record.attempt = attempt;
  record.hostname = local_hostname();
  record.supervisor_pid = ::getpid();
  record.stdout_path = task.task_id + "/" + stdout_filename(attempt);
  record.stderr_path = task.task_id + "/" + stderr_filename(attempt);
  record.interval_s = opts.interval_s;
  record.rendered_command = task.rendered_command;

  Fd out(open_log(clowdir / record.stdout_path));
  Fd err(open_log(clowdir / record.stderr_path));
  Fd devnull(::open("/dev/null", O_RDONLY | O_CLOEXEC));

  int status_pipe[2];
  if (::pipe2(status_pipe, O_CLOEXEC) != 0) throw OutputDirError(std::string("pipe: ") + std::strerror(errno));
  Fd status_read(status_pipe[0]);
  Fd status_write(status_pipe[1]);

  // Everything the child touches is prepared before fork; after fork it only
  // makes async-signal-safe calls.
  const std::string cmd = task.rendered_command;
  const std::string workdir = task.workdir;
  const char* argv[] = {"sh", "-c", cmd.c_str(), nullptr};
  const pid_t parent = ::getpid();

  record.launched_at = now_us();
  record.updated_at = record.launched_at;
  const auto launched_steady = std::chrono::steady_clock::now();
  const pid_t child = ::fork();
  if (child < 0) {
    const int saved = errno;
    record.error = std::string("spawn failed: ") + std::strerror(saved);
    auto final_record = finalize_record(record, ExitStatus::exited(127), now_us());
    write_record(task_dir, final_record);
    return final_record;
  }
  if (child == 0) {
    ::setpgid(0, 0);
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) ::_exit(127);
    int e = 0;
    if (!workdir.empty() && ::chdir(workdir.c_str()) != 0) {
      e = errno;
      (void)!::write(status_pipe[1], &e, sizeof e);
      ::_exit(127);
    }
    if (devnull.get() >= 0) ::dup2(devnull.get(), STDIN_FILENO);
    ::dup2(out.get(), STDOUT_FILENO);
    ::dup2(err.get(), STDERR_FILENO);
    ::execv("/bin/sh", const_cast<char* const*>(argv));
    e = errno;
    (void)!::write(status_pipe[1], &e, sizeof e);
    ::_exit(127);
  }

  ::setpgid(child, child);  // also done by the child; whichever runs first wins
  status_write.reset();
  out.reset();
  err.reset();

  int spawn_errno = 0;
  ssize_t got;
  do {
    got = ::read(status_read.get(), &spawn_errno, sizeof spawn_errno);
  } while (got < 0 && errno == EINTR);
  if (got == static_cast<ssize_t>(sizeof spawn_errno)) {
    int status = 0;
    while (::waitpid(child, &status, 0) < 0 && errno == EINTR) {
    }
    record.error = std::string("spawn failed: ") + std::strerror(spawn_errno);
    auto final_record = finalize_record(record, ExitStatus::exited(127), now_us());
    write_record(task_dir, final_record);
    return final_record;
  }

  try {
    write_record(task_dir, record);
  } catch (const Error& e) {
    log::warn(std::string("partial record: ") + e.what());
  }

  Guard guard(child);

  std::mutex mutex;
  std::condition_variable cv;
  bool stop = false;
  std::thread sampler([&] {
    TreeSampler tree(child, launched_steady);
    auto next = launched_steady;
    std::unique_lock lock(mutex);
    while (true) {
      next += std::chrono::duration_cast<std::chrono::steady_clock::duration>(
          std::chrono::duration<double>(opts.interval_s));
      if (cv.wait_until(lock, next, [&] { return stop; })) return;
      try {
        record.samples.push_back(tree.sample());
      } catch (const ProcessGone&) {
        return;
      }
      record.updated_at = now_us();
      try {
        write_record(task_dir, record);
      } catch (const Error& e) {
        log::warn(std::string("partial record: ") + e.what());
      }
    }
  });

  // Wait without reaping so the pid stays valid while the sampler reads it.
  siginfo_t info{};
  while (::waitid(P_PID, static_cast<id_t>(child), &info, WEXITED | WNOWAIT) < 0 && errno == EINTR) {
  }
  const auto end = now_us();
  {
    std::lock_guard lock(mutex);
    stop = true;
  }
  cv.notify_all();
  sampler.join();

  int status = 0;
  while (::waitpid(child, &status, 0) < 0 && errno == EINTR) {
  }
  guard.release();
  auto final_record = finalize_record(record, ExitStatus::from_wait_status(status), end);
  if (!final_record.signal && (*final_record.exit_code == 126 || *final_record.exit_code == 127))
    final_record.error = "command not found or not executable (shell exit " +
                         std::to_string(*final_record.exit_code) + ")";
  write_record(task_dir, final_record);
  return final_record;
}

}  // namespace clowdr
