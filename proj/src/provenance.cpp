#include "clowdr/provenance.hpp"

#include <sys/stat.h>

#include <algorithm>
#include <array>
#include <cstdlib>
#include <set>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"

namespace clowdr {

namespace {

constexpr std::array kFixedColumns = {"task_id",     "ordinal",        "status",       "attempt",
                                      "launched_at", "finished_at",    "duration_s",   "exit_code",
                                      "signal",      "peak_rss_bytes", "mean_cpu_pct", "diagnostics"};

bool is_fixed_column(std::string_view field) {
  return std::find(kFixedColumns.begin(), kFixedColumns.end(), field) != kFixedColumns.end();
}

template <typename T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? json(*v) : json(nullptr);
}

std::optional<Timestamp> optional_timestamp(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return parse_timestamp(it->get<std::string>());
}

template <typename T>
std::optional<T> optional_value(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

json parse_json_file(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SyntaxError(path.string() + ": " + e.what());
  }
}

// Numeric view of a predicate operand, when it is a full number.
std::optional<double> as_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

std::string as_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

bool scalar_matches(const json& v, FilterOp op, const std::string& target) {
  if (v.is_null()) return op == FilterOp::Ne;
  if (op == FilterOp::Contains) return as_text(v).find(target) != std::string::npos;
  int cmp = 0;
  if (v.is_number()) {
    const auto t = as_number(target);
    if (t) {
      const double x = v.get<double>();
      cmp = x < *t ? -1 : (x > *t ? 1 : 0);
    } else {
      cmp = as_text(v).compare(target);
    }
  } else {
    cmp = as_text(v).compare(target);
  }
  switch (op) {
    case FilterOp::Eq:
      return cmp == 0;
    case FilterOp::Ne:
      return cmp != 0;
    case FilterOp::Lt:
      return cmp < 0;
    case FilterOp::Gt:
      return cmp > 0;
    case FilterOp::Contains:
      break;
  }
  return false;
}

bool value_matches(const json& v, FilterOp op, const std::string& target) {
  if (!v.is_array()) return scalar_matches(v, op, target);
  // Lists match when any element does; ne is the negation of eq.
  const FilterOp inner = op == FilterOp::Ne ? FilterOp::Eq : op;
  const bool any = std::any_of(v.begin(), v.end(), [&](const json& e) { return scalar_matches(e, inner, target); });
  return op == FilterOp::Ne ? !any : any;
}

void check_field(std::string_view field, const std::vector<TaskRow>& rows,
                 const std::vector<std::string>& param_columns) {
  if (is_fixed_column(field)) return;
  std::string_view id = field;
  if (id.rfind("params.", 0) == 0) id.remove_prefix(7);
  if (std::find(param_columns.begin(), param_columns.end(), id) != param_columns.end()) return;
  for (const auto& r : rows)
    if (r.params.count(std::string(id))) return;
  throw UnknownField(std::string(field));
}

// -1/0/1 ordering of two non-null column values.
int compare_values(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>(), y = b.get<double>();
    return x < y ? -1 : (x > y ? 1 : 0);
  }
  const auto sa = as_text(a), sb = as_text(b);
  return sa < sb ? -1 : (sa > sb ? 1 : 0);
}

}  // namespace

const char* to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::Running:
      return "running";
    case TaskStatus::Succeeded:
      return "succeeded";
    case TaskStatus::Failed:
      return "failed";
    case TaskStatus::Incomplete:
      return "incomplete";
  }
  return "?";
}

TaskStatus parse_task_status(std::string_view s) {
  if (s == "running") return TaskStatus::Running;
  if (s == "succeeded") return TaskStatus::Succeeded;
  if (s == "failed") return TaskStatus::Failed;
  if (s == "incomplete") return TaskStatus::Incomplete;
  throw SchemaError("status", "unknown task status: " + std::string(s));
}

json manifest_to_json(const ExperimentManifest& m) {
  json tasks = json::array();
  for (const auto& t : m.tasks) tasks.push_back({{"task_id", t.task_id}, {"spec", t.spec}});
  return {
      {"experiment_id", m.experiment_id},
      {"descriptor_digest", m.descriptor_digest},
      {"descriptor_file", m.descriptor_file},
      {"created_at", format_timestamp(m.created_at)},
      {"tasks", std::move(tasks)},
      {"parameter_columns", m.parameter_columns},
      {"request", m.request},
  };
}

ExperimentManifest manifest_from_json(const json& j) {
  ExperimentManifest m;
  try {
    m.experiment_id = j.at("experiment_id").get<std::string>();
    m.descriptor_digest = j.value("descriptor_digest", "");
    m.descriptor_file = j.value("descriptor_file", kDescriptorFile);
    m.created_at = parse_timestamp(j.at("created_at").get<std::string>());
    for (const auto& t : j.at("tasks"))
      m.tasks.push_back({t.at("task_id").get<std::string>(), t.at("spec").get<std::string>()});
    m.parameter_columns = j.value("parameter_columns", std::vector<std::string>{});
    m.request = j.value("request", json::object());
  } catch (const json::exception& e) {
    throw SchemaError("experiment.json", std::string("malformed experiment manifest: ") + e.what());
  }
  return m;
}

bool is_experiment_dir(const std::filesystem::path& clowdir) {
  std::error_code ec;
  return std::filesystem::is_regular_file(clowdir / kManifestFile, ec);
}

ExperimentManifest read_manifest(const std::filesystem::path& clowdir) {
  if (!is_experiment_dir(clowdir)) throw NotAnExperimentDir(clowdir.string());
  return manifest_from_json(parse_json_file(clowdir / kManifestFile));
}

void write_manifest(const std::filesystem::path& clowdir, const ExperimentManifest& m) {
  write_file_atomic(clowdir / kManifestFile, manifest_to_json(m).dump(2) + "\n");
}

void write_task_specs(const std::filesystem::path& clowdir, const std::vector<TaskSpec>& tasks) {
  for (const auto& t : tasks) {
    const auto dir = clowdir / t.task_id;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw OutputDirError("cannot create " + dir.string() + ": " + ec.message());
    write_file_atomic(dir / kTaskSpecFile, task_to_json(t).dump(2) + "\n");
  }
}

std::vector<TaskSpec> load_tasks(const std::filesystem::path& clowdir, const ExperimentManifest& m) {
  std::vector<TaskSpec> tasks;
  tasks.reserve(m.tasks.size());
  for (const auto& e : m.tasks) tasks.push_back(task_from_json(parse_json_file(clowdir / e.spec)));
  return tasks;
}

std::map<std::string, TaskRecord> load_latest_records(const std::filesystem::path& clowdir,
                                                      const std::vector<TaskSpec>& tasks) {
  std::map<std::string, TaskRecord> records;
  for (const auto& t : tasks) {
    try {
      if (auto r = read_latest_record(clowdir / t.task_id)) records.emplace(t.task_id, std::move(*r));
    } catch (const Error& e) {
      log::warn(t.task_id + ": unreadable record treated as absent: " + e.what());
    }
  }
  return records;
}

json row_to_json(const TaskRow& r) {
  json j{
      {"task_id", r.task_id},
      {"ordinal", r.ordinal},
      {"status", to_string(r.status)},
      {"attempt", r.attempt},
      {"params", r.params},
  };
  j["launched_at"] = r.launched_at ? json(format_timestamp(*r.launched_at)) : json(nullptr);
  j["finished_at"] = r.finished_at ? json(format_timestamp(*r.finished_at)) : json(nullptr);
  put_optional(j, "duration_s", r.duration_s);
  put_optional(j, "exit_code", r.exit_code);
  put_optional(j, "signal", r.signal);
  put_optional(j, "peak_rss_bytes", r.peak_rss_bytes);
  put_optional(j, "mean_cpu_pct", r.mean_cpu_pct);
  put_optional(j, "diagnostics", r.diagnostics);
  return j;
}

TaskRow row_from_json(const json& j) {
  TaskRow r;
  r.task_id = j.at("task_id").get<std::string>();
  r.ordinal = j.at("ordinal").get<std::size_t>();
  r.status = parse_task_status(j.at("status").get<std::string>());
  r.attempt = j.at("attempt").get<int>();
  r.launched_at = optional_timestamp(j, "launched_at");
  r.finished_at = optional_timestamp(j, "finished_at");
  r.duration_s = optional_value<double>(j, "duration_s");
  r.exit_code = optional_value<int>(j, "exit_code");
  r.signal = optional_value<int>(j, "signal");
  r.peak_rss_bytes = optional_value<std::uint64_t>(j, "peak_rss_bytes");
  r.mean_cpu_pct = optional_value<double>(j, "mean_cpu_pct");
  r.diagnostics = optional_value<std::string>(j, "diagnostics");
  if (auto it = j.find("params"); it != j.end() && it->is_object())
    for (const auto& [k, v] : it->items()) r.params.emplace(k, v);
  return r;
}

json summary_to_json(const ExperimentSummary& s) {
  json rows = json::array();
  for (const auto& r : s.task_rows) rows.push_back(row_to_json(r));
  json j{
      {"experiment_id", s.experiment_id},
      {"descriptor_digest", s.descriptor_digest},
      {"generated_at", format_timestamp(s.generated_at)},
      {"parameter_columns", s.parameter_columns},
      {"task_rows", std::move(rows)},
      {"counts", s.counts},
      {"source_fingerprint", s.source_fingerprint},
  };
  if (s.aggregate) {
    json a{{"mean_duration_s", s.aggregate->mean_duration_s}, {"max_duration_s", s.aggregate->max_duration_s}};
    put_optional(a, "mean_peak_rss_bytes", s.aggregate->mean_peak_rss_bytes);
    put_optional(a, "max_peak_rss_bytes", s.aggregate->max_peak_rss_bytes);
    j["aggregate"] = std::move(a);
  } else {
    j["aggregate"] = nullptr;
  }
  return j;
}

ExperimentSummary summary_from_json(const json& j) {
  ExperimentSummary s;
  try {
    s.experiment_id = j.at("experiment_id").get<std::string>();
    s.descriptor_digest = j.value("descriptor_digest", "");
    s.generated_at = parse_timestamp(j.at("generated_at").get<std::string>());
    s.parameter_columns = j.value("parameter_columns", std::vector<std::string>{});
    for (const auto& r : j.at("task_rows")) s.task_rows.push_back(row_from_json(r));
    s.counts = j.at("counts").get<std::map<std::string, int>>();
    s.source_fingerprint = j.value("source_fingerprint", "");
    if (auto it = j.find("aggregate"); it != j.end() && it->is_object()) {
      Aggregate a;
      a.mean_duration_s = it->at("mean_duration_s").get<double>();
      a.max_duration_s = it->at("max_duration_s").get<double>();
      a.mean_peak_rss_bytes = optional_value<double>(*it, "mean_peak_rss_bytes");
      a.max_peak_rss_bytes = optional_value<std::uint64_t>(*it, "max_peak_rss_bytes");
      s.aggregate = a;
    }
  } catch (const json::exception& e) {
    throw SchemaError("summary", std::string("malformed summary: ") + e.what());
  }
  return s;
}

std::pair<std::optional<std::uint64_t>, std::optional<double>> peak_and_mean(std::span<const ResourceSample> samples) {
  if (samples.empty()) return {std::nullopt, std::nullopt};
  std::uint64_t peak = 0;
  for (const auto& s : samples) peak = std::max(peak, s.rss_bytes);
  const double span = samples.back().t - samples.front().t;
  if (samples.size() == 1 || span <= 0) return {peak, samples.front().cpu_pct};
  double area = 0;
  for (std::size_t i = 1; i < samples.size(); ++i)
    area += 0.5 * (samples[i - 1].cpu_pct + samples[i].cpu_pct) * (samples[i].t - samples[i - 1].t);
  return {peak, area / span};
}

std::string source_fingerprint(const std::filesystem::path& clowdir, const ExperimentManifest& m) {
  std::string acc;
  auto add = [&](const std::filesystem::path& p) {
    struct stat st {};
    if (::stat(p.c_str(), &st) != 0) return;
    acc += p.filename().string() + ' ' + std::to_string(st.st_size) + ' ' + std::to_string(st.st_mtim.tv_sec) + '.' +
           std::to_string(st.st_mtim.tv_nsec) + '\n';
  };
  add(clowdir / kManifestFile);
  for (const auto& e : m.tasks) {
    const auto dir = clowdir / e.task_id;
    acc += e.task_id + '\n';
    add(clowdir / e.spec);
    std::vector<std::filesystem::path> records;
    std::error_code ec;
    for (std::filesystem::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec))
      if (attempt_of_record_file(it->path().filename().string())) records.push_back(it->path());
    std::sort(records.begin(), records.end());
    for (const auto& r : records) add(r);
  }
  return sha256_hex(acc);
}

ExperimentSummary consolidate(const std::filesystem::path& clowdir) {
  const auto manifest = read_manifest(clowdir);
  ExperimentSummary s;
  s.experiment_id = manifest.experiment_id;
  s.descriptor_digest = manifest.descriptor_digest;
  s.parameter_columns = manifest.parameter_columns;
  s.source_fingerprint = source_fingerprint(clowdir, manifest);
  s.generated_at = now_us();
  s.counts = {{"running", 0}, {"succeeded", 0}, {"failed", 0}, {"incomplete", 0}};

  for (std::size_t i = 0; i < manifest.tasks.size(); ++i) {
    const auto& entry = manifest.tasks[i];
    TaskRow row;
    row.task_id = entry.task_id;
    row.ordinal = ordinal_of(entry.task_id).value_or(i);
    try {
      const auto spec = task_from_json(parse_json_file(clowdir / entry.spec));
      row.params = spec.invocation.values;
    } catch (const Error& e) {
      row.diagnostics = std::string("task spec: ") + e.what();
    }

    std::optional<TaskRecord> record;
    try {
      record = read_latest_record(clowdir / entry.task_id);
    } catch (const Error& e) {
      row.diagnostics = std::string("record: ") + e.what();
      row.attempt = latest_attempt(clowdir / entry.task_id);
    }

    if (record) {
      row.attempt = record->attempt;
      row.launched_at = record->launched_at;
      row.finished_at = record->finished_at;
      row.exit_code = record->exit_code;
      row.signal = record->signal;
      std::tie(row.peak_rss_bytes, row.mean_cpu_pct) = peak_and_mean(record->samples);
      if (record->finished_at) {
        row.duration_s = seconds_between(record->launched_at, *record->finished_at);
        row.status = *record->exit_code == 0 ? TaskStatus::Succeeded : TaskStatus::Failed;
      } else if (record_orphaned(*record, s.generated_at)) {
        row.status = TaskStatus::Incomplete;
        row.diagnostics = "supervisor exited without finalizing the record";
      } else {
        row.status = TaskStatus::Running;
      }
    }
    ++s.counts[to_string(row.status)];
    s.task_rows.push_back(std::move(row));
  }
  std::stable_sort(s.task_rows.begin(), s.task_rows.end(),
                   [](const TaskRow& a, const TaskRow& b) { return a.ordinal < b.ordinal; });

  std::vector<const TaskRow*> finished;
  for (const auto& r : s.task_rows)
    if (r.duration_s) finished.push_back(&r);
  if (!finished.empty()) {
    Aggregate a;
    double total = 0, rss_total = 0;
    std::size_t rss_count = 0;
    for (const auto* r : finished) {
      total += *r->duration_s;
      a.max_duration_s = std::max(a.max_duration_s, *r->duration_s);
      if (r->peak_rss_bytes) {
        rss_total += static_cast<double>(*r->peak_rss_bytes);
        ++rss_count;
        a.max_peak_rss_bytes = std::max(a.max_peak_rss_bytes.value_or(0), *r->peak_rss_bytes);
      }
    }
    a.mean_duration_s = total / static_cast<double>(finished.size());
    if (rss_count) a.mean_peak_rss_bytes = rss_total / static_cast<double>(rss_count);
    s.aggregate = a;
  }

  write_file_atomic(clowdir / kSummaryFile, summary_to_json(s).dump(1) + "\n");
  return s;
}

ExperimentSummary load_or_consolidate(const std::filesystem::path& clowdir, bool* recomputed) {
  const auto manifest = read_manifest(clowdir);
  if (recomputed) *recomputed = false;
  try {
    auto cached = summary_from_json(parse_json_file(clowdir / kSummaryFile));
    const bool any_running = std::any_of(cached.task_rows.begin(), cached.task_rows.end(),
                                         [](const TaskRow& r) { return r.status == TaskStatus::Running; });
    if (!any_running && cached.source_fingerprint == source_fingerprint(clowdir, manifest)) return cached;
  } catch (const Error&) {
    // Missing or unreadable summary; fall through and rebuild it.
  }
  if (recomputed) *recomputed = true;
  return consolidate(clowdir);
}

std::vector<TimelineRow> timeline(const ExperimentSummary& summary) {
  std::vector<TimelineRow> rows;
  for (const auto& r : summary.task_rows)
    if (r.launched_at) rows.push_back({r.task_id, r.ordinal, *r.launched_at, r.finished_at});
  std::sort(rows.begin(), rows.end(), [](const TimelineRow& a, const TimelineRow& b) {
    return a.start != b.start ? a.start < b.start : a.ordinal < b.ordinal;
  });
  return rows;
}

FilterOp parse_filter_op(std::string_view op) {
  if (op == "eq") return FilterOp::Eq;
  if (op == "ne") return FilterOp::Ne;
  if (op == "lt") return FilterOp::Lt;
  if (op == "gt") return FilterOp::Gt;
  if (op == "contains") return FilterOp::Contains;
  throw BadOperator(std::string(op));
}

Predicate parse_predicate(std::string_view text) {
  const auto first = text.find(':');
  if (first == std::string_view::npos) throw BadOperator(std::string(text));
  const auto second = text.find(':', first + 1);
  const auto op = text.substr(first + 1, second == std::string_view::npos ? std::string_view::npos : second - first - 1);
  Predicate p;
  p.field = std::string(text.substr(0, first));
  p.op = parse_filter_op(op);
  p.value = second == std::string_view::npos ? std::string() : std::string(text.substr(second + 1));
  return p;
}

json row_value(const TaskRow& row, std::string_view field) {
  if (is_fixed_column(field)) {
    json j = row_to_json(row);
    return j.at(std::string(field));
  }
  std::string_view id = field;
  if (id.rfind("params.", 0) == 0) id.remove_prefix(7);
  auto it = row.params.find(std::string(id));
  return it == row.params.end() ? json(nullptr) : it->second;
}

std::vector<TaskRow> filter_rows(const std::vector<TaskRow>& rows, const std::vector<Predicate>& predicates,
                                 const std::vector<std::string>& param_columns) {
  for (const auto& p : predicates) check_field(p.field, rows, param_columns);
  std::vector<TaskRow> out;
  for (const auto& row : rows) {
    const bool keep = std::all_of(predicates.begin(), predicates.end(), [&](const Predicate& p) {
      return value_matches(row_value(row, p.field), p.op, p.value);
    });
    if (keep) out.push_back(row);
  }
  return out;
}

std::vector<TaskRow> sort_rows(std::vector<TaskRow> rows, std::string_view key,
                               const std::vector<std::string>& param_columns) {
  if (key.empty()) return rows;
  const bool descending = key.front() == '-';
  if (descending || key.front() == '+') key.remove_prefix(1);
  check_field(key, rows, param_columns);
  std::vector<std::pair<json, TaskRow>> keyed;
  keyed.reserve(rows.size());
  for (auto& r : rows) keyed.emplace_back(row_value(r, key), std::move(r));
  std::stable_sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    const bool an = a.first.is_null(), bn = b.first.is_null();
    if (an || bn) {
      if (an != bn) return bn;
      return a.second.ordinal < b.second.ordinal;
    }
    const int c = compare_values(a.first, b.first);
    if (c != 0) return descending ? c > 0 : c < 0;
    return a.second.ordinal < b.second.ordinal;
  });
  std::vector<TaskRow> out;
  out.reserve(keyed.size());
  for (auto& [_, r] : keyed) out.push_back(std::move(r));
  return out;
}

}  // namespace clowdr
