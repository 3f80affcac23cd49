#include "clowdr/record.hpp"

#include <sys/wait.h>

#include <algorithm>

#include "clowdr/errors.hpp"

namespace clowdr {

namespace {

// Heartbeat staleness threshold for supervisors on other hosts.
double orphan_after_seconds(const TaskRecord& r) { return std::max(30.0, 10.0 * r.interval_s); }

template <typename T>
T require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw SchemaError(key, std::string("record is missing ") + key);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw SchemaError(key, std::string("record field ") + key + " has the wrong type");
  }
}

}  // namespace

json record_to_json(const TaskRecord& r) {
  json samples = json::array();
  for (const auto& s : r.samples) samples.push_back(json::array({s.t, s.cpu_pct, s.rss_bytes}));
  json j{
      {"task_id", r.task_id},
      {"experiment_id", r.experiment_id},
      {"attempt", r.attempt},
      {"hostname", r.hostname},
      {"supervisor_pid", r.supervisor_pid},
      {"launched_at", format_timestamp(r.launched_at)},
      {"updated_at", format_timestamp(r.updated_at)},
      {"stdout_path", r.stdout_path},
      {"stderr_path", r.stderr_path},
      {"samples", std::move(samples)},
      {"interval_s", r.interval_s},
      {"rendered_command", r.rendered_command},
      {"wrapper_version", r.wrapper_version},
  };
  if (r.finished_at) j["finished_at"] = format_timestamp(*r.finished_at);
  if (r.exit_code) j["exit_code"] = *r.exit_code;
  if (r.signal) j["signal"] = *r.signal;
  if (r.error) j["error"] = *r.error;
  return j;
}

TaskRecord record_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("", "record must be a JSON object");
  TaskRecord r;
  r.task_id = require<std::string>(j, "task_id");
  r.experiment_id = j.value("experiment_id", "");
  r.attempt = require<int>(j, "attempt");
  if (r.attempt < 1) throw SchemaError("attempt", "record attempt must be >= 1");
  r.hostname = j.value("hostname", "");
  r.supervisor_pid = j.value("supervisor_pid", 0);
  r.launched_at = parse_timestamp(require<std::string>(j, "launched_at"));
  r.updated_at = j.contains("updated_at") ? parse_timestamp(j.at("updated_at").get<std::string>()) : r.launched_at;
  if (j.contains("finished_at") && !j.at("finished_at").is_null())
    r.finished_at = parse_timestamp(j.at("finished_at").get<std::string>());
  if (j.contains("exit_code") && !j.at("exit_code").is_null()) r.exit_code = j.at("exit_code").get<int>();
  if (j.contains("signal") && !j.at("signal").is_null()) r.signal = j.at("signal").get<int>();
  r.stdout_path = j.value("stdout_path", "");
  r.stderr_path = j.value("stderr_path", "");
  if (auto it = j.find("samples"); it != j.end() && it->is_array()) {
    for (const auto& s : *it) {
      if (!s.is_array() || s.size() != 3) throw SchemaError("samples", "samples must be [t, cpu_pct, rss_bytes]");
      r.samples.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<std::uint64_t>()});
    }
  }
  r.interval_s = j.value("interval_s", 1.0);
  r.rendered_command = j.value("rendered_command", "");
  r.wrapper_version = j.value("wrapper_version", "");
  if (j.contains("error") && j.at("error").is_string()) r.error = j.at("error").get<std::string>();
  if (r.exit_code.has_value() != r.finished_at.has_value())
    throw SchemaError("exit_code", "record must carry exit_code exactly when finished_at is present");
  return r;
}

ExitStatus ExitStatus::from_wait_status(int status) {
  if (WIFSIGNALED(status)) return killed(WTERMSIG(status));
  if (WIFEXITED(status)) return exited(WEXITSTATUS(status));
  return exited(-1);
}

TaskRecord finalize_record(const TaskRecord& partial, ExitStatus exit, Timestamp end) {
  if (partial.finished_at) throw AlreadyFinalized(partial.task_id);
  TaskRecord r = partial;
  r.finished_at = std::max(end, partial.launched_at);
  r.updated_at = *r.finished_at;
  if (exit.signal) {
    r.signal = exit.signal;
    r.exit_code = 128 + *exit.signal;
  } else {
    r.exit_code = exit.code.value_or(-1);
  }
  return r;
}

std::string record_filename(int attempt) {
  return attempt <= 1 ? "record.json" : "record." + std::to_string(attempt) + ".json";
}

std::string stdout_filename(int attempt) {
  return attempt <= 1 ? "stdout.log" : "stdout." + std::to_string(attempt) + ".log";
}

std::string stderr_filename(int attempt) {
  return attempt <= 1 ? "stderr.log" : "stderr." + std::to_string(attempt) + ".log";
}

std::optional<int> attempt_of_record_file(std::string_view name) {
  if (name == "record.json") return 1;
  constexpr std::string_view prefix = "record.", suffix = ".json";
  if (name.size() <= prefix.size() + suffix.size() || name.substr(0, prefix.size()) != prefix ||
      name.substr(name.size() - suffix.size()) != suffix)
    return std::nullopt;
  const auto digits = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
  if (digits.empty() || digits.size() > 6 ||
      !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  const int n = std::stoi(std::string(digits));
  return n >= 2 ? std::optional<int>(n) : std::nullopt;
}

int latest_attempt(const std::filesystem::path& task_dir) {
  int best = 0;
  std::error_code ec;
  for (std::filesystem::directory_iterator it(task_dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (auto a = attempt_of_record_file(it->path().filename().string())) best = std::max(best, *a);
  }
  return best;
}

void write_record(const std::filesystem::path& task_dir, const TaskRecord& r) {
  write_file_atomic(task_dir / record_filename(r.attempt), record_to_json(r).dump(1));
}

std::optional<TaskRecord> read_latest_record(const std::filesystem::path& task_dir) {
  const int attempt = latest_attempt(task_dir);
  if (attempt == 0) return std::nullopt;
  const auto path = task_dir / record_filename(attempt);
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError&) {
    // Deleted between listing and reading.
    return std::nullopt;
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SyntaxError(path.string() + ": " + e.what());
  }
  return record_from_json(j);
}

bool record_orphaned(const TaskRecord& r, Timestamp now) {
  if (r.finished_at) return false;
  if (r.hostname == local_hostname()) return !process_alive(r.supervisor_pid);
  return seconds_between(r.updated_at, now) > orphan_after_seconds(r);
}

}  // namespace clowdr
