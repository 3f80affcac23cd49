#pragma once

// Provenance directory ("clowdir") layout:
//
//   <clowdir>/experiment.json          manifest: ids, digest, task list, request echo
//   <clowdir>/descriptor.json          copy of the tool descriptor
//   <clowdir>/summary.json             last consolidation
//   <clowdir>/task-NNNNN/task.json     TaskSpec
//   <clowdir>/task-NNNNN/record.json   attempt 1; record.<n>.json for later attempts
//   <clowdir>/task-NNNNN/stdout.log    attempt 1; stdout.<n>.log later (same for stderr)

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clowdr/record.hpp"
#include "clowdr/taskgen.hpp"

namespace clowdr {

inline constexpr const char* kManifestFile = "experiment.json";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kDescriptorFile = "descriptor.json";
inline constexpr const char* kTaskSpecFile = "task.json";

struct ManifestEntry {
  std::string task_id;
  std::string spec;  // relative to the clowdir

  bool operator==(const ManifestEntry&) const = default;
};

struct ExperimentManifest {
  std::string experiment_id;
  std::string descriptor_digest;
  std::string descriptor_file = kDescriptorFile;
  Timestamp created_at{};
  std::vector<ManifestEntry> tasks;
  // Input ids in descriptor order; become the parameter columns of the table.
  std::vector<std::string> parameter_columns;
  json request = json::object();

  bool operator==(const ExperimentManifest&) const = default;
};

json manifest_to_json(const ExperimentManifest& m);
ExperimentManifest manifest_from_json(const json& j);

bool is_experiment_dir(const std::filesystem::path& clowdir);
// Throws NotAnExperimentDir.
ExperimentManifest read_manifest(const std::filesystem::path& clowdir);
void write_manifest(const std::filesystem::path& clowdir, const ExperimentManifest& m);

// Writes <clowdir>/<task_id>/task.json for every task.
void write_task_specs(const std::filesystem::path& clowdir, const std::vector<TaskSpec>& tasks);
std::vector<TaskSpec> load_tasks(const std::filesystem::path& clowdir, const ExperimentManifest& m);
// Latest parseable record per task; tasks without one are absent from the map.
std::map<std::string, TaskRecord> load_latest_records(const std::filesystem::path& clowdir,
                                                      const std::vector<TaskSpec>& tasks);

enum class TaskStatus { Running, Succeeded, Failed, Incomplete };

const char* to_string(TaskStatus s);
TaskStatus parse_task_status(std::string_view s);

struct TaskRow {
  std::string task_id;
  std::size_t ordinal = 0;
  TaskStatus status = TaskStatus::Incomplete;
  int attempt = 0;  // 0 when no record exists
  std::optional<Timestamp> launched_at;
  std::optional<Timestamp> finished_at;
  std::optional<double> duration_s;
  std::optional<int> exit_code;
  std::optional<int> signal;
  std::optional<std::uint64_t> peak_rss_bytes;
  std::optional<double> mean_cpu_pct;
  std::map<std::string, json> params;
  std::optional<std::string> diagnostics;

  bool operator==(const TaskRow&) const = default;
};

struct Aggregate {
  double mean_duration_s = 0;
  double max_duration_s = 0;
  std::optional<double> mean_peak_rss_bytes;
  std::optional<std::uint64_t> max_peak_rss_bytes;

  bool operator==(const Aggregate&) const = default;
};

struct ExperimentSummary {
  std::string experiment_id;
  std::string descriptor_digest;
  Timestamp generated_at{};
  std::vector<std::string> parameter_columns;
  std::vector<TaskRow> task_rows;
  std::map<std::string, int> counts;
  std::optional<Aggregate> aggregate;  // over finished tasks only
  std::string source_fingerprint;

  bool operator==(const ExperimentSummary&) const = default;
};

json row_to_json(const TaskRow& r);
TaskRow row_from_json(const json& j);
json summary_to_json(const ExperimentSummary& s);
ExperimentSummary summary_from_json(const json& j);

// (peak rss, time-weighted mean cpu). The mean integrates the cpu series with
// the trapezoid rule over t; a single sample is its own mean.
std::pair<std::optional<std::uint64_t>, std::optional<double>> peak_and_mean(std::span<const ResourceSample> samples);

// Reads every task directory and writes summary.json. Read-only with respect
// to task directories.
ExperimentSummary consolidate(const std::filesystem::path& clowdir);

// Hash over the names, sizes and mtimes of every file consolidation reads.
std::string source_fingerprint(const std::filesystem::path& clowdir, const ExperimentManifest& m);

// Returns summary.json when it is still current, otherwise consolidates.
ExperimentSummary load_or_consolidate(const std::filesystem::path& clowdir, bool* recomputed = nullptr);

struct TimelineRow {
  std::string task_id;
  std::size_t ordinal = 0;
  Timestamp start;
  std::optional<Timestamp> end;  // open while running

  bool operator==(const TimelineRow&) const = default;
};

std::vector<TimelineRow> timeline(const ExperimentSummary& summary);

enum class FilterOp { Eq, Ne, Lt, Gt, Contains };

FilterOp parse_filter_op(std::string_view op);

struct Predicate {
  std::string field;
  FilterOp op = FilterOp::Eq;
  std::string value;
};

// "field:op:value"; the value may itself contain ':'.
Predicate parse_predicate(std::string_view text);

// Value of a column for one row; JSON null when absent. Columns are the fixed
// TaskRow fields plus invocation parameters (bare id, or params.<id>).
json row_value(const TaskRow& row, std::string_view field);

// Conjunction of predicates, order preserved. A field must be a fixed column,
// one of param_columns, or a parameter present in some row; anything else is
// UnknownField.
std::vector<TaskRow> filter_rows(const std::vector<TaskRow>& rows, const std::vector<Predicate>& predicates,
                                 const std::vector<std::string>& param_columns = {});

// key is a column name, optionally prefixed with '-' for descending. Absent
// values sort last; ties keep ordinal order.
std::vector<TaskRow> sort_rows(std::vector<TaskRow> rows, std::string_view key,
                               const std::vector<std::string>& param_columns = {});

}  // namespace clowdr
