#include "clowdr/portal.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <thread>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"

namespace clowdr {

namespace {

namespace fs = std::filesystem;

HttpResponse json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

HttpResponse error_response(int status, const std::string& message, const std::string& token = {}) {
  json body{{"error", message}};
  if (!token.empty()) body["token"] = token;
  return json_response(status, body);
}

json envelope(json data, Timestamp generated_at, std::optional<bool> stale, const std::string& diagnostics = {}) {
  json j{{"data", std::move(data)}, {"generated_at", format_timestamp(generated_at)}};
  if (stale) j["stale"] = *stale;
  if (!diagnostics.empty()) j["diagnostics"] = diagnostics;
  return j;
}

bool planned_task(const ExperimentManifest& m, const std::string& task_id) {
  return std::any_of(m.tasks.begin(), m.tasks.end(), [&](const ManifestEntry& e) { return e.task_id == task_id; });
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  if (value.empty() || !std::all_of(value.begin(), value.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw Error(ErrorCategory::Usage, key + " must be a non-negative integer");
  return static_cast<std::size_t>(std::stoull(value));
}

std::string content_type_for(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  return "application/octet-stream";
}

json rows_json(const std::vector<TaskRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back(row_to_json(r));
  return out;
}

}  // namespace

std::pair<std::vector<TaskRow>, std::size_t> query_rows(const ExperimentSummary& summary, const QueryParams& query) {
  std::vector<Predicate> predicates;
  std::string sort_key;
  std::optional<std::size_t> limit;
  std::size_t offset = 0;
  for (const auto& [key, value] : query) {
    if (key == "sort") {
      sort_key = value;
    } else if (key == "limit") {
      limit = parse_count(key, value);
    } else if (key == "offset") {
      offset = parse_count(key, value);
    } else if (key == "filter") {
      predicates.push_back(parse_predicate(value));
    } else {
      predicates.push_back({key, FilterOp::Eq, value});
    }
  }
  auto rows = filter_rows(summary.task_rows, predicates, summary.parameter_columns);
  rows = sort_rows(std::move(rows), sort_key, summary.parameter_columns);
  const std::size_t total = rows.size();
  const std::size_t begin = std::min(offset, rows.size());
  const std::size_t end = limit ? std::min(rows.size(), begin + *limit) : rows.size();
  return {std::vector<TaskRow>(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                               rows.begin() + static_cast<std::ptrdiff_t>(end)),
          total};
}

json usage_payload(const std::string& task_id, const std::optional<TaskRecord>& record) {
  json samples = json::array();
  if (record)
    for (const auto& s : record->samples) samples.push_back(json::array({s.t, s.cpu_pct, s.rss_bytes}));
  return {
      {"task_id", task_id},
      {"attempt", record ? record->attempt : 0},
      {"finished", record && record->finished()},
      {"interval_s", record ? json(record->interval_s) : json(nullptr)},
      {"samples", std::move(samples)},
  };
}

Portal::Portal(fs::path clowdir, fs::path assets_dir)
    : clowdir_(std::move(clowdir)), assets_dir_(std::move(assets_dir)) {}

Portal::Fresh Portal::fresh_summary() {
  std::lock_guard lock(recompute_mutex_);
  try {
    return {load_or_consolidate(clowdir_), false, {}};
  } catch (const NotAnExperimentDir&) {
    throw;
  } catch (const Error& e) {
    // Fall back to the last materialized summary, flagged as stale.
    auto cached = summary_from_json(json::parse(read_file(clowdir_ / kSummaryFile)));
    return {std::move(cached), true, e.what()};
  }
}

HttpResponse Portal::get_experiment() {
  try {
    auto fresh = fresh_summary();
    return json_response(200, envelope(summary_to_json(fresh.summary), fresh.summary.generated_at, fresh.stale,
                                       fresh.diagnostics));
  } catch (const NotAnExperimentDir& e) {
    return error_response(404, e.what());
  } catch (const std::exception& e) {
    return error_response(500, std::string("consolidation failed: ") + e.what());
  }
}

HttpResponse Portal::get_tasks(const QueryParams& query) {
  Fresh fresh;
  try {
    fresh = fresh_summary();
  } catch (const NotAnExperimentDir& e) {
    return error_response(404, e.what());
  } catch (const std::exception& e) {
    return error_response(500, std::string("consolidation failed: ") + e.what());
  }
  try {
    auto [rows, total] = query_rows(fresh.summary, query);
    auto body = envelope(rows_json(rows), fresh.summary.generated_at, fresh.stale, fresh.diagnostics);
    body["total"] = total;
    return json_response(200, body);
  } catch (const UnknownField& e) {
    return error_response(400, e.what(), e.field());
  } catch (const BadOperator& e) {
    return error_response(400, e.what(), e.op());
  } catch (const Error& e) {
    return error_response(400, e.what());
  }
}

HttpResponse Portal::get_usage(const std::string& task_id) {
  try {
    const auto manifest = read_manifest(clowdir_);
    if (!planned_task(manifest, task_id)) return error_response(404, "unknown task: " + task_id);
    const auto record = read_latest_record(clowdir_ / task_id);
    const Timestamp when = record ? record->updated_at : manifest.created_at;
    return json_response(200, envelope(usage_payload(task_id, record), when, false));
  } catch (const NotAnExperimentDir& e) {
    return error_response(404, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

HttpResponse Portal::get_logs(const std::string& task_id, const std::string& stream, std::optional<std::size_t> tail) {
  try {
    const auto manifest = read_manifest(clowdir_);
    if (!planned_task(manifest, task_id)) return error_response(404, "unknown task: " + task_id);
    if (stream != "stdout" && stream != "stderr") return error_response(404, "unknown stream: " + stream);
    const auto record = read_latest_record(clowdir_ / task_id);
    if (!record) return error_response(404, task_id + " has not started");
    const auto path = clowdir_ / (stream == "stdout" ? record->stdout_path : record->stderr_path);
    std::string bytes;
    try {
      bytes = read_file(path);
    } catch (const IoError&) {
      return error_response(404, "log not found: " + stream);
    }
    if (tail && *tail < bytes.size()) bytes.erase(0, bytes.size() - *tail);
    return {200, "text/plain", std::move(bytes)};
  } catch (const NotAnExperimentDir& e) {
    return error_response(404, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

HttpResponse Portal::healthz() const { return json_response(200, {{"status", "ok"}}); }

HttpResponse Portal::get_asset(const std::string& path) const {
  std::string rel = path;
  while (!rel.empty() && rel.front() == '/') rel.erase(0, 1);
  if (rel.empty()) rel = "index.html";
  const fs::path relative = fs::path(rel).lexically_normal();
  if (relative.empty() || *relative.begin() == "..") return error_response(404, "not found");
  if (!assets_dir_.empty()) {
    const auto full = assets_dir_ / relative;
    std::error_code ec;
    if (fs::is_regular_file(full, ec)) return {200, content_type_for(full), read_file(full)};
  }
  if (relative == "index.html") return {200, "text/html", fallback_index_html()};
  return error_response(404, "not found");
}

struct PortalServer::Impl {
  Portal& portal;
  httplib::Server server;
  bool bound = false;
  std::atomic<bool> listened{false};

  explicit Impl(Portal& p) : portal(p) {
    // httplib's default also sets SO_REUSEPORT, which lets a second portal
    // bind a port that is already serving.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    auto send = [](httplib::Response& res, const HttpResponse& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Get("/healthz", [&, send](const httplib::Request&, httplib::Response& res) { send(res, portal.healthz()); });
    server.Get("/api/experiment",
               [&, send](const httplib::Request&, httplib::Response& res) { send(res, portal.get_experiment()); });
    server.Get("/api/tasks", [&, send](const httplib::Request& req, httplib::Response& res) {
      QueryParams q(req.params.begin(), req.params.end());
      send(res, portal.get_tasks(q));
    });
    server.Get(R"(/api/tasks/([^/]+)/usage)", [&, send](const httplib::Request& req, httplib::Response& res) {
      send(res, portal.get_usage(req.matches[1]));
    });
    server.Get(R"(/api/tasks/([^/]+)/logs/([^/]+))", [&, send](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::size_t> tail;
      if (req.has_param("tail")) {
        try {
          tail = parse_count("tail", req.get_param_value("tail"));
        } catch (const Error& e) {
          send(res, error_response(400, e.what()));
          return;
        }
      }
      send(res, portal.get_logs(req.matches[1], req.matches[2], tail));
    });
    server.Get(R"(/(.*))", [&, send](const httplib::Request& req, httplib::Response& res) {
      send(res, portal.get_asset(req.matches[1]));
    });
  }
};

PortalServer::PortalServer(Portal& portal) : impl_(std::make_unique<Impl>(portal)) {}
PortalServer::~PortalServer() {
  // httplib only closes its socket from stop() while listening, so a bound
  // but unused socket would leak and keep accepting into its backlog.
  if (impl_->bound && !impl_->listened) {
    std::thread drain([this] { listen(); });
    wait_until_ready();
    stop();
    drain.join();
  }
  stop();
}

int PortalServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) throw PortInUse(port);
    impl_->bound = true;
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw PortInUse(port);
  impl_->bound = true;
  return port;
}

void PortalServer::listen() {
  impl_->listened = true;
  impl_->server.listen_after_bind();
}

bool PortalServer::wait_until_ready(std::chrono::milliseconds timeout) const {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (!impl_->server.is_running()) {
    if (std::chrono::steady_clock::now() > deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  return true;
}

void PortalServer::stop() {
  if (impl_) impl_->server.stop();
}

ExportManifest export_static(const fs::path& clowdir, const fs::path& outdir, const fs::path& assets_dir) {
  const auto summary = load_or_consolidate(clowdir);
  const auto manifest = read_manifest(clowdir);
  ExportManifest result;

  auto write = [&](const fs::path& rel, std::string_view contents) {
    try {
      const auto full = outdir / rel;
      fs::create_directories(full.parent_path());
      write_file_atomic(full, contents);
      result.files.push_back(rel.generic_string());
    } catch (const std::exception& e) {
      result.errors.emplace_back(rel.generic_string(), e.what());
    }
  };

  const json experiment = envelope(summary_to_json(summary), summary.generated_at, std::nullopt);
  json tasks = envelope(rows_json(summary.task_rows), summary.generated_at, std::nullopt);
  tasks["total"] = summary.task_rows.size();
  write("data/experiment.json", experiment.dump(1) + "\n");
  write("data/tasks.json", tasks.dump(1) + "\n");

  json usage_all = json::object();
  for (const auto& entry : manifest.tasks) {
    std::optional<TaskRecord> record;
    try {
      record = read_latest_record(clowdir / entry.task_id);
    } catch (const std::exception& e) {
      result.errors.emplace_back(entry.task_id, e.what());
    }
    const Timestamp when = record ? record->updated_at : manifest.created_at;
    const json usage = envelope(usage_payload(entry.task_id, record), when, std::nullopt);
    write(fs::path("data/usage") / (entry.task_id + ".json"), usage.dump(1) + "\n");
    usage_all[entry.task_id] = usage;
    if (!record) continue;
    for (const auto& [name, rel] : {std::pair{"stdout.log", record->stdout_path}, {"stderr.log", record->stderr_path}}) {
      try {
        write(fs::path("data/logs") / entry.task_id / name, read_file(clowdir / rel));
      } catch (const std::exception& e) {
        result.errors.emplace_back(rel, e.what());
      }
    }
  }

  const json bundle{{"experiment", experiment}, {"tasks", tasks}, {"usage", usage_all}};
  write("data/bundle.js", "window.CLOWDR_DATA = " + bundle.dump() + ";\n");

  std::error_code ec;
  bool have_index = false;
  if (!assets_dir.empty() && fs::is_directory(assets_dir, ec)) {
    for (fs::recursive_directory_iterator it(assets_dir, ec), end; !ec && it != end; it.increment(ec)) {
      if (!it->is_regular_file()) continue;
      const auto rel = fs::relative(it->path(), assets_dir);
      if (*rel.begin() == "data") continue;
      try {
        write(rel, read_file(it->path()));
        if (rel == "index.html") have_index = true;
      } catch (const std::exception& e) {
        result.errors.emplace_back(rel.generic_string(), e.what());
      }
    }
  }
  if (!have_index) write("index.html", fallback_index_html());
  return result;
}

const std::string& fallback_index_html() {
  static const std::string html = R"HTML(<!doctype html>
<html>
<head>
<meta charset="utf-8">
<title>Experiment</title>
<style>
body { font-family: sans-serif; margin: 1.5em; }
table { border-collapse: collapse; }
td, th { border: 1px solid #ccc; padding: 2px 8px; font-size: 13px; }
.failed { background: #fdd; } .running { background: #ffd; } .incomplete { background: #eee; }
</style>
<script src="data/bundle.js"></script>
</head>
<body>
<h1 id="title">Experiment</h1>
<p id="counts"></p>
<table id="tasks"></table>
<script>
async function load() {
  if (window.CLOWDR_DATA) return window.CLOWDR_DATA;
  const get = (u) => fetch(u).then((r) => r.json());
  return { experiment: await get("api/experiment"), tasks: await get("api/tasks") };
}
function cell(row, v) {
  const td = document.createElement("td");
  td.textContent = v === null || v === undefined ? "" : (typeof v === "object" ? JSON.stringify(v) : v);
  row.appendChild(td);
}
function render(d) {
  const s = d.experiment.data;
  document.getElementById("title").textContent = s.experiment_id;
  document.getElementById("counts").textContent =
    Object.entries(s.counts).map(([k, v]) => k + ": " + v).join("  ");
  const cols = ["task_id", "status", "attempt", "duration_s", "exit_code", "peak_rss_bytes", "mean_cpu_pct"];
  const table = document.getElementById("tasks");
  table.innerHTML = "";
  const head = table.insertRow();
  for (const c of cols.concat(s.parameter_columns)) cell(head, c);
  for (const r of d.tasks.data) {
    const tr = table.insertRow();
    tr.className = r.status;
    for (const c of cols) cell(tr, r[c]);
    for (const p of s.parameter_columns) cell(tr, r.params[p]);
  }
}
async function tick() {
  try { render(await load()); } catch (e) { document.getElementById("counts").textContent = String(e); }
  if (!window.CLOWDR_DATA) setTimeout(tick, 5000);
}
tick();
</script>
</body>
</html>
)HTML";
  return html;
}

}  // namespace clowdr
