#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clowdr/taskgen.hpp"

namespace clowdr {

enum class BackendKind { LocalSerial, LocalParallel, Cluster, RemoteStage };

BackendKind parse_backend_kind(std::string_view text);

struct BackendConfig {
  BackendKind kind = BackendKind::LocalSerial;
  int workers = 1;
  // Submission template text; empty selects the bundled SLURM-style template.
  std::string scheduler_template;
  // Command each script is handed to. May use {{SCRIPT}}, {{TASK_ID}} and
  // {{n}} (ordinal); with no placeholder the script path is appended.
  std::string scheduler_submit_cmd = "sbatch";
  bool dry_run = false;
  std::filesystem::path stage_dir;
  double interval_s = 1.0;
  // How generated scripts and staging manifests invoke the supervisor.
  std::string sentinel_exe = "clowdr";
};

struct DispatchReport {
  std::vector<std::pair<std::string, std::string>> submitted;         // (task_id, handle)
  std::vector<std::pair<std::string, std::string>> failed_to_submit;  // (task_id, reason)

  bool ok() const { return failed_to_submit.empty(); }
};

// Exclusive dispatcher lock on <clowdir>/.lock holding "host pid". A lock
// left by a dead process on this host is taken over.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& clowdir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

// FIFO by ordinal with at most `workers` supervisors alive at once.
DispatchReport run_local(const std::vector<TaskSpec>& tasks, const std::filesystem::path& clowdir, int workers,
                         double interval_s);

const std::string& default_submission_template();

std::string sentinel_command(const std::string& exe, const std::filesystem::path& spec_path,
                             const std::filesystem::path& clowdir, double interval_s);

// Substitutes {{TASK_ID}}, {{SENTINEL_CMD}} and {{CLOWDIR}}. Throws
// TemplateError for unknown placeholders or a missing {{SENTINEL_CMD}}.
std::string render_submission(const TaskSpec& task, const std::filesystem::path& clowdir,
                              const std::string& template_text, const std::string& sentinel_exe, double interval_s);

// render_submission, then writes <clowdir>/<task_id>/submit.sh (mode 0755).
std::string generate_submission(const TaskSpec& task, const std::filesystem::path& clowdir,
                                const std::string& template_text, const std::string& sentinel_exe = "clowdr",
                                double interval_s = 1.0);

DispatchReport submit_cluster(const std::vector<TaskSpec>& tasks, const std::filesystem::path& clowdir,
                              const BackendConfig& cfg);

// Copies specs and the descriptor into <stage_dir>/task-NNNNN/ and writes
// <stage_dir>/manifest.json describing what a remote worker runs. Executes
// nothing.
DispatchReport stage_remote(const std::vector<TaskSpec>& tasks, const std::filesystem::path& clowdir,
                            const std::filesystem::path& stage_dir, const BackendConfig& cfg = {});

// Remote-worker side: runs every task in a staged manifest serially; records
// land inside the stage directory.
DispatchReport run_staged(const std::filesystem::path& stage_dir, double interval_s);

DispatchReport dispatch(const std::vector<TaskSpec>& tasks, const std::filesystem::path& clowdir,
                        const BackendConfig& cfg);

}  // namespace clowdr
