#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "clowdr/record.hpp"
#include "clowdr/taskgen.hpp"

namespace clowdr {

// Cumulative counters for one process and its live descendants.
struct TreeUsage {
  double cpu_seconds = 0;  // utime+stime+cutime+cstime summed over the tree
  std::uint64_t rss_bytes = 0;
  std::vector<pid_t> pids;
  double root_age_seconds = 0;
};

// Walks /proc once, following parent links from root. Processes vanishing
// mid-walk contribute nothing. Throws ProcessGone when root does not exist.
TreeUsage read_tree_usage(pid_t root);

// Produces ResourceSamples for one process tree. The first sample reports
// CPU averaged over the root's lifetime; later ones use the delta since the
// previous sample divided by the wall delta.
class TreeSampler {
 public:
  explicit TreeSampler(pid_t root, std::chrono::steady_clock::time_point launched = std::chrono::steady_clock::now());

  ResourceSample sample();

 private:
  pid_t root_;
  std::chrono::steady_clock::time_point launched_;
  std::optional<std::chrono::steady_clock::time_point> last_wall_;
  double last_cpu_ = 0;
};

// One-shot sample of a process tree.
ResourceSample sample_tree(pid_t root_pid);

struct SuperviseOptions {
  double interval_s = 1.0;
  // Defaults to one past the highest attempt already on disk.
  std::optional<int> attempt;
};

// Runs task.rendered_command under /bin/sh with stdout/stderr redirected to
// per-attempt log files in <clowdir>/<task_id>/, sampling the process tree
// every interval and rewriting the partial record after each sample. Returns
// the finalized record, which is also written to disk.
TaskRecord supervise(const TaskSpec& task, const std::filesystem::path& clowdir, const SuperviseOptions& opts = {});

}  // namespace clowdr
