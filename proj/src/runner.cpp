#include "clowdr/runner.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <thread>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"
#include "clowdr/provenance.hpp"
#include "clowdr/sentinel.hpp"

namespace clowdr {

namespace {

namespace fs = std::filesystem;

struct Captured {
  int exit_code = -1;
  std::string out;
  std::string err;
};

Captured run_capture(const std::string& cmd) {
  int out_pipe[2], err_pipe[2];
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) throw IoError(std::string("pipe: ") + std::strerror(errno));
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    throw IoError(std::string("pipe: ") + std::strerror(errno));
  }
  const char* argv[] = {"sh", "-c", cmd.c_str(), nullptr};
  const pid_t pid = ::fork();
  if (pid == 0) {
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(err_pipe[1], STDERR_FILENO);
    ::execv("/bin/sh", const_cast<char* const*>(argv));
    ::_exit(127);
  }
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);
  Captured c;
  if (pid < 0) {
    ::close(out_pipe[0]);
    ::close(err_pipe[0]);
    c.err = std::string("fork: ") + std::strerror(errno);
    return c;
  }
  pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
  std::string* sinks[2] = {&c.out, &c.err};
  int open_count = 2;
  while (open_count > 0) {
    if (::poll(fds, 2, -1) < 0) {
      if (errno == EINTR) continue;
      break;
    }
    for (int i = 0; i < 2; ++i) {
      if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      char buf[4096];
      const ssize_t n = ::read(fds[i].fd, buf, sizeof buf);
      if (n > 0) {
        sinks[i]->append(buf, static_cast<std::size_t>(n));
      } else if (n == 0 || errno != EINTR) {
        ::close(fds[i].fd);
        fds[i].fd = -1;
        --open_count;
      }
    }
  }
  for (auto& f : fds)
    if (f.fd >= 0) ::close(f.fd);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  c.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  return c;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

std::string format_interval(double interval_s) { return json(interval_s).dump(); }

}  // namespace

BackendKind parse_backend_kind(std::string_view text) {
  if (text == "local" || text == "serial") return BackendKind::LocalSerial;
  if (text == "parallel") return BackendKind::LocalParallel;
  if (text == "cluster") return BackendKind::Cluster;
  if (text == "remote" || text == "stage") return BackendKind::RemoteStage;
  throw Error(ErrorCategory::Usage, "unknown backend: " + std::string(text));
}

DirLock::DirLock(const fs::path& clowdir) : path_(clowdir / ".lock") {
  const std::string me = local_hostname() + " " + std::to_string(::getpid()) + "\n";
  for (int tries = 0; tries < 2; ++tries) {
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
    if (fd >= 0) {
      (void)!::write(fd, me.data(), me.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw OutputDirError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    std::string holder;
    try {
      holder = trim(read_file(path_));
    } catch (const IoError&) {
      continue;
    }
    const auto space = holder.rfind(' ');
    const std::string host = space == std::string::npos ? holder : holder.substr(0, space);
    const pid_t pid = space == std::string::npos ? 0 : static_cast<pid_t>(std::atoi(holder.c_str() + space + 1));
    if (host == local_hostname() && !process_alive(pid)) {
      log::warn("removing stale lock held by " + holder);
      std::error_code ec;
      fs::remove(path_, ec);
      continue;
    }
    throw LockHeld(holder);
  }
  throw LockHeld(path_.string());
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

DispatchReport run_local(const std::vector<TaskSpec>& tasks, const fs::path& clowdir, int workers,
                         double interval_s) {
  if (workers < 1) throw Error(ErrorCategory::Usage, "workers must be >= 1");
  std::error_code ec;
  fs::create_directories(clowdir, ec);
  if (ec) throw OutputDirError("cannot create " + clowdir.string() + ": " + ec.message());
  DirLock lock(clowdir);

  std::vector<std::optional<std::pair<bool, std::string>>> outcome(tasks.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        SuperviseOptions opts;
        opts.interval_s = interval_s;
        const auto record = supervise(tasks[i], clowdir, opts);
        log::debug(tasks[i].task_id + " exited " + std::to_string(record.exit_code.value_or(-1)));
        outcome[i] = {true, "local:" + tasks[i].task_id + "/" + record_filename(record.attempt)};
      } catch (const std::exception& e) {
        outcome[i] = {false, e.what()};
      }
    }
  };
  const auto pool_size = std::min<std::size_t>(static_cast<std::size_t>(workers), tasks.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < pool_size; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  DispatchReport report;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& [ok, text] = *outcome[i];
    (ok ? report.submitted : report.failed_to_submit).emplace_back(tasks[i].task_id, text);
  }
  return report;
}

const std::string& default_submission_template() {
  static const std::string tpl =
      "#!/bin/bash\n"
      "#SBATCH --job-name={{TASK_ID}}\n"
      "#SBATCH --output={{CLOWDIR}}/{{TASK_ID}}/slurm-%j.out\n"
      "#SBATCH --ntasks=1\n"
      "#SBATCH --cpus-per-task=1\n"
      "#SBATCH --mem=4G\n"
      "#SBATCH --time=01:00:00\n"
      "\n"
      "set -u\n"
      "{{SENTINEL_CMD}}\n";
  return tpl;
}

std::string sentinel_command(const std::string& exe, const fs::path& spec_path, const fs::path& clowdir,
                             double interval_s) {
  return shell_quote(exe) + " sentinel --task " + shell_quote(spec_path.string()) + " --clowdir " +
         shell_quote(clowdir.string()) + " --interval " + format_interval(interval_s);
}

std::string render_submission(const TaskSpec& task, const fs::path& clowdir, const std::string& template_text,
                              const std::string& sentinel_exe, double interval_s) {
  const auto spec_path = clowdir / task.task_id / kTaskSpecFile;
  std::string out;
  bool saw_sentinel = false;
  std::size_t pos = 0;
  while (true) {
    const auto open = template_text.find("{{", pos);
    if (open == std::string::npos) {
      out.append(template_text, pos);
      break;
    }
    out.append(template_text, pos, open - pos);
    const auto close = template_text.find("}}", open + 2);
    if (close == std::string::npos) throw TemplateError("unterminated placeholder at offset " + std::to_string(open));
    const auto name = template_text.substr(open + 2, close - open - 2);
    if (name == "TASK_ID") {
      out += task.task_id;
    } else if (name == "CLOWDIR") {
      out += shell_quote(clowdir.string());
    } else if (name == "SENTINEL_CMD") {
      out += sentinel_command(sentinel_exe, spec_path, clowdir, interval_s);
      saw_sentinel = true;
    } else {
      throw TemplateError("unknown placeholder {{" + name + "}}");
    }
    pos = close + 2;
  }
  if (!saw_sentinel) throw TemplateError("template lacks the {{SENTINEL_CMD}} placeholder");
  return out;
}

std::string generate_submission(const TaskSpec& task, const fs::path& clowdir, const std::string& template_text,
                                const std::string& sentinel_exe, double interval_s) {
  auto script = render_submission(task, clowdir, template_text, sentinel_exe, interval_s);
  const auto dir = clowdir / task.task_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw OutputDirError("cannot create " + dir.string() + ": " + ec.message());
  const auto path = dir / "submit.sh";
  write_file_atomic(path, script);
  fs::permissions(path, fs::perms::owner_all | fs::perms::group_read | fs::perms::group_exec |
                            fs::perms::others_read | fs::perms::others_exec);
  return script;
}

DispatchReport submit_cluster(const std::vector<TaskSpec>& tasks, const fs::path& clowdir, const BackendConfig& cfg) {
  if (cfg.kind != BackendKind::Cluster) throw Error(ErrorCategory::Usage, "submit_cluster needs a cluster backend");
  const auto root = fs::absolute(clowdir);
  DirLock lock(root);
  const std::string& tpl = cfg.scheduler_template.empty() ? default_submission_template() : cfg.scheduler_template;

  std::vector<fs::path> scripts;
  for (const auto& t : tasks) {
    generate_submission(t, root, tpl, cfg.sentinel_exe, cfg.interval_s);
    scripts.push_back(root / t.task_id / "submit.sh");
  }

  DispatchReport report;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& id = tasks[i].task_id;
    if (cfg.dry_run) {
      report.submitted.emplace_back(id, scripts[i].string());
      continue;
    }
    std::string cmd = cfg.scheduler_submit_cmd;
    if (cmd.find("{{") == std::string::npos) {
      cmd += " " + shell_quote(scripts[i].string());
    } else {
      cmd = replace_all(cmd, "{{SCRIPT}}", shell_quote(scripts[i].string()));
      cmd = replace_all(cmd, "{{TASK_ID}}", id);
      cmd = replace_all(cmd, "{{n}}", std::to_string(ordinal_of(id).value_or(i)));
    }
    const auto result = run_capture(cmd);
    if (result.exit_code != 0) {
      auto excerpt = trim(result.err).substr(0, 512);
      report.failed_to_submit.emplace_back(
          id, "submit exited " + std::to_string(result.exit_code) + (excerpt.empty() ? "" : ": " + excerpt));
    } else {
      report.submitted.emplace_back(id, trim(result.out));
    }
  }
  return report;
}

DispatchReport stage_remote(const std::vector<TaskSpec>& tasks, const fs::path& clowdir, const fs::path& stage_dir,
                            const BackendConfig& cfg) {
  DirLock lock(clowdir);
  std::error_code ec;
  fs::create_directories(stage_dir, ec);
  if (ec || ::access(stage_dir.c_str(), W_OK) != 0)
    throw StageError("*", "stage directory " + stage_dir.string() + " is not writable");

  const auto descriptor = clowdir / kDescriptorFile;
  const bool have_descriptor = fs::is_regular_file(descriptor, ec);
  if (is_experiment_dir(clowdir)) fs::copy_file(clowdir / kManifestFile, stage_dir / kManifestFile,
                                                fs::copy_options::overwrite_existing, ec);
  if (have_descriptor) fs::copy_file(descriptor, stage_dir / kDescriptorFile, fs::copy_options::overwrite_existing, ec);

  DispatchReport report;
  json entries = json::array();
  for (const auto& t : tasks) {
    const auto dir = stage_dir / t.task_id;
    try {
      fs::create_directories(dir);
      write_file_atomic(dir / kTaskSpecFile, task_to_json(t).dump(2) + "\n");
      if (have_descriptor) fs::copy_file(descriptor, dir / kDescriptorFile, fs::copy_options::overwrite_existing);
      const fs::path spec_rel = fs::path(t.task_id) / kTaskSpecFile;
      entries.push_back({
          {"task_id", t.task_id},
          {"spec", spec_rel.string()},
          {"descriptor", have_descriptor ? (fs::path(t.task_id) / kDescriptorFile).string() : ""},
          {"command", sentinel_command(cfg.sentinel_exe, spec_rel, ".", cfg.interval_s)},
      });
      report.submitted.emplace_back(t.task_id, dir.string());
    } catch (const std::exception& e) {
      report.failed_to_submit.emplace_back(t.task_id, StageError(t.task_id, e.what()).what());
    }
  }
  json manifest{
      {"experiment_id", tasks.empty() ? "" : tasks.front().experiment_id},
      {"descriptor_digest", tasks.empty() ? "" : tasks.front().descriptor_digest},
      {"descriptor", have_descriptor ? kDescriptorFile : ""},
      {"interval_s", cfg.interval_s},
      {"workdir", "."},
      {"tasks", std::move(entries)},
  };
  try {
    write_file_atomic(stage_dir / "manifest.json", manifest.dump(2) + "\n");
  } catch (const Error& e) {
    throw StageError("manifest", e.what());
  }
  return report;
}

DispatchReport run_staged(const fs::path& stage_dir, double interval_s) {
  const auto root = fs::absolute(stage_dir);
  json manifest;
  try {
    manifest = json::parse(read_file(root / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw SyntaxError(std::string("staging manifest: ") + e.what());
  }
  std::vector<TaskSpec> tasks;
  for (const auto& e : manifest.at("tasks"))
    tasks.push_back(task_from_json(json::parse(read_file(root / e.at("spec").get<std::string>()))));
  return run_local(tasks, root, 1, interval_s);
}

DispatchReport dispatch(const std::vector<TaskSpec>& tasks, const fs::path& clowdir, const BackendConfig& cfg) {
  switch (cfg.kind) {
    case BackendKind::LocalSerial:
      return run_local(tasks, clowdir, 1, cfg.interval_s);
    case BackendKind::LocalParallel:
      return run_local(tasks, clowdir, cfg.workers, cfg.interval_s);
    case BackendKind::Cluster:
      return submit_cluster(tasks, clowdir, cfg);
    case BackendKind::RemoteStage:
      if (cfg.stage_dir.empty()) throw Error(ErrorCategory::Usage, "remote staging needs a stage directory");
      return stage_remote(tasks, clowdir, cfg.stage_dir, cfg);
  }
  return {};
}

}  // namespace clowdr
