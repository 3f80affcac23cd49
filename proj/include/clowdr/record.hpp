#pragma once

#include <sys/types.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clowdr/descriptor.hpp"
#include "clowdr/util.hpp"

namespace clowdr {

struct ResourceSample {
  double t = 0;  // seconds since launch
  double cpu_pct = 0;
  std::uint64_t rss_bytes = 0;

  bool operator==(const ResourceSample&) const = default;
};

struct TaskRecord {
  std::string task_id;
  std::string experiment_id;
  int attempt = 1;
  std::string hostname;
  pid_t supervisor_pid = 0;
  Timestamp launched_at{};
  // Refreshed on every sample while running; lets readers tell a live
  // supervisor from a dead one on another host.
  Timestamp updated_at{};
  std::optional<Timestamp> finished_at;
  std::optional<int> exit_code;
  std::optional<int> signal;
  std::string stdout_path;  // relative to the clowdir
  std::string stderr_path;
  std::vector<ResourceSample> samples;
  double interval_s = 1.0;
  std::string rendered_command;
  std::string wrapper_version = kWrapperVersion;
  std::optional<std::string> error;

  bool finished() const { return finished_at.has_value(); }

  bool operator==(const TaskRecord&) const = default;
};

json record_to_json(const TaskRecord& r);
TaskRecord record_from_json(const json& j);

// How a child ended: a normal exit code or a terminating signal.
struct ExitStatus {
  std::optional<int> code;
  std::optional<int> signal;

  static ExitStatus exited(int code) { return {code, std::nullopt}; }
  static ExitStatus killed(int sig) { return {std::nullopt, sig}; }
  static ExitStatus from_wait_status(int status);
};

// Signal deaths are recorded as exit_code 128+signal plus the signal field.
TaskRecord finalize_record(const TaskRecord& partial, ExitStatus exit, Timestamp end);

// record.json for attempt 1, record.<n>.json after that.
std::string record_filename(int attempt);
std::string stdout_filename(int attempt);
std::string stderr_filename(int attempt);
// Attempt number encoded in a record filename, if it is one.
std::optional<int> attempt_of_record_file(std::string_view filename);

// Highest attempt number with a record file in task_dir (0 if none).
int latest_attempt(const std::filesystem::path& task_dir);

void write_record(const std::filesystem::path& task_dir, const TaskRecord& r);

// Parses the highest-attempt record; nullopt when none exists. Throws
// SyntaxError/SchemaError when the newest file is unparseable.
std::optional<TaskRecord> read_latest_record(const std::filesystem::path& task_dir);

// A record without finished_at whose supervisor can no longer finish it:
// dead pid on this host, or no heartbeat for a while on another host.
bool record_orphaned(const TaskRecord& r, Timestamp now);

}  // namespace clowdr
