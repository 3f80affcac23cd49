#pragma once

// Read-only HTTP view over one provenance directory.
//
//   GET /api/experiment                 ExperimentSummary envelope
//   GET /api/tasks                      TaskRow list envelope; query:
//        status=<s>, <field>=<value>    equality filters
//        filter=<field>:<op>:<value>    repeatable, op in eq|ne|lt|gt|contains
//        sort=[-]<field>, limit=<n>, offset=<n>
//   GET /api/tasks/{id}/usage           resource samples of the newest attempt
//   GET /api/tasks/{id}/logs/{stream}   raw stdout/stderr bytes, ?tail=<bytes>
//   GET /healthz
//   GET /                               dashboard assets
//
// Envelopes are {"data": ..., "generated_at": ..., "stale": bool} with a
// "diagnostics" string whenever stale is true.

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clowdr/provenance.hpp"

namespace clowdr {

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

using QueryParams = std::multimap<std::string, std::string>;

class Portal {
 public:
  explicit Portal(std::filesystem::path clowdir, std::filesystem::path assets_dir = {});

  HttpResponse get_experiment();
  HttpResponse get_tasks(const QueryParams& query);
  HttpResponse get_usage(const std::string& task_id);
  HttpResponse get_logs(const std::string& task_id, const std::string& stream, std::optional<std::size_t> tail);
  HttpResponse healthz() const;
  HttpResponse get_asset(const std::string& path) const;

  const std::filesystem::path& clowdir() const { return clowdir_; }

 private:
  struct Fresh {
    ExperimentSummary summary;
    bool stale = false;
    std::string diagnostics;
  };
  // Serialized so at most one consolidation runs at a time.
  Fresh fresh_summary();

  std::filesystem::path clowdir_;
  std::filesystem::path assets_dir_;
  std::mutex recompute_mutex_;
};

// Builds the /api/tasks result: filter, then sort, then paginate. Throws
// UnknownField / BadOperator / Error(Usage) for bad queries.
std::pair<std::vector<TaskRow>, std::size_t> query_rows(const ExperimentSummary& summary, const QueryParams& query);

json usage_payload(const std::string& task_id, const std::optional<TaskRecord>& record);

// Binds httplib to a Portal. bind() throws PortInUse.
class PortalServer {
 public:
  explicit PortalServer(Portal& portal);
  ~PortalServer();
  PortalServer(const PortalServer&) = delete;
  PortalServer& operator=(const PortalServer&) = delete;

  // Returns the bound port (useful with port 0).
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  // Waits (bounded) until listen() is accepting, so a following stop() is not
  // lost. Returns false on timeout.
  bool wait_until_ready(std::chrono::milliseconds timeout = std::chrono::seconds(5)) const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct ExportManifest {
  std::vector<std::string> files;  // relative to outdir
  std::vector<std::pair<std::string, std::string>> errors;

  bool ok() const { return errors.empty(); }
};

// Writes a server-free bundle: data/experiment.json, data/tasks.json,
// data/usage/<id>.json, data/logs/<id>/{stdout,stderr}.log, data/bundle.js
// and the dashboard assets. Per-file failures are collected, not thrown.
ExportManifest export_static(const std::filesystem::path& clowdir, const std::filesystem::path& outdir,
                             const std::filesystem::path& assets_dir = {});

const std::string& fallback_index_html();

}  // namespace clowdr
