#include "clowdr/cli.hpp"

#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <random>
#include <thread>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"
#include "clowdr/portal.hpp"
#include "clowdr/provenance.hpp"
#include "clowdr/runner.hpp"
#include "clowdr/sentinel.hpp"

namespace clowdr {

namespace {

namespace fs = std::filesystem;

constexpr const char* kConfigFile = "clowdr.ini";

struct BackendFlags {
  std::string backend = "local";
  int workers = 1;
  double interval = 1.0;
  std::string template_path;
  std::string submit_cmd = "sbatch";
  bool dry_run = false;
  std::string stage_dir;
  std::string sentinel_exe;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--backend", backend, "local, parallel, cluster or remote")
        ->envname("CLOWDR_BACKEND")
        ->capture_default_str();
    cmd.add_option("--workers", workers, "Concurrent local supervisors")
        ->envname("CLOWDR_WORKERS")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd.add_option("--interval", interval, "Resource sampling interval in seconds")
        ->envname("CLOWDR_INTERVAL")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd.add_option("--template", template_path, "Cluster submission template (default: bundled SLURM-style)")
        ->envname("CLOWDR_TEMPLATE");
    cmd.add_option("--submit-cmd", submit_cmd, "Scheduler submission command")
        ->envname("CLOWDR_SUBMIT_CMD")
        ->capture_default_str();
    cmd.add_flag("--dry-run", dry_run, "Cluster: write submission scripts without submitting")
        ->envname("CLOWDR_DRY_RUN");
    cmd.add_option("--stage-dir", stage_dir, "Remote: staging directory")->envname("CLOWDR_STAGE_DIR");
    cmd.add_option("--sentinel-exe", sentinel_exe, "Supervisor command used in scripts (default: this binary)")
        ->envname("CLOWDR_SENTINEL_EXE");
  }

  BackendConfig config() const {
    BackendConfig cfg;
    cfg.kind = parse_backend_kind(backend);
    cfg.workers = workers;
    if (cfg.kind == BackendKind::LocalSerial && workers > 1) cfg.kind = BackendKind::LocalParallel;
    cfg.interval_s = interval;
    if (!template_path.empty()) cfg.scheduler_template = read_file(template_path);
    cfg.scheduler_submit_cmd = submit_cmd;
    cfg.dry_run = dry_run;
    cfg.stage_dir = stage_dir;
    cfg.sentinel_exe = sentinel_exe.empty() ? self_exe() : sentinel_exe;
    return cfg;
  }

  static std::string self_exe() {
    std::error_code ec;
    auto p = fs::read_symlink("/proc/self/exe", ec);
    return ec ? std::string("clowdr") : p.string();
  }
};

std::string new_experiment_id(const std::string& digest) {
  auto stamp = format_timestamp(Clock::now());  // 2026-10-15T08:30:00.250000Z
  std::string compact;
  for (char c : stamp.substr(0, 19))
    if (c != '-' && c != ':') compact += c;
  std::random_device rd;
  char suffix[8];
  std::snprintf(suffix, sizeof suffix, "%04x", static_cast<unsigned>(rd() & 0xffff));
  return "exp-" + compact + "-" + digest.substr(0, 8) + suffix;
}

std::vector<Invocation> load_invocations(const std::vector<std::string>& files) {
  std::vector<Invocation> invs;
  for (const auto& f : files) {
    json j;
    try {
      j = json::parse(read_file(f));
    } catch (const json::parse_error& e) {
      throw SyntaxError(f + ": " + e.what());
    }
    if (j.is_array()) {
      for (const auto& e : j) invs.push_back(invocation_from_json(e));
    } else {
      invs.push_back(invocation_from_json(j));
    }
  }
  return invs;
}

int report_dispatch(const DispatchReport& report) {
  for (const auto& [id, reason] : report.failed_to_submit) log::warn(id + ": " + reason);
  log::info("dispatched " + std::to_string(report.submitted.size()) + " task(s), " +
            std::to_string(report.failed_to_submit.size()) + " failed to dispatch");
  return report.ok() ? 0 : exit_code_for(ErrorCategory::Dispatch);
}

struct RunArgs {
  std::string descriptor;
  std::vector<std::string> invocations;
  std::string sweep;
  std::string bids;
  std::vector<std::string> participants;
  std::vector<std::string> sessions;
  std::string experiment_id;
  std::string workdir;
  BackendFlags backend;
};

int cmd_run(const RunArgs& a, const std::string& clowdir_flag) {
  const std::string raw = read_file(a.descriptor);
  const auto descriptor = parse_descriptor(raw);
  const auto digest = sha256_hex(raw);
  const auto experiment_id = a.experiment_id.empty() ? new_experiment_id(digest) : a.experiment_id;
  const fs::path clowdir = fs::absolute(clowdir_flag.empty() ? fs::path("clowdr-runs") / experiment_id
                                                             : fs::path(clowdir_flag));
  if (is_experiment_dir(clowdir))
    throw IoError(clowdir.string() + " already holds an experiment; use `rerun` instead");
  const auto cfg = a.backend.config();

  ExpansionContext ctx;
  ctx.experiment_id = experiment_id;
  ctx.descriptor_digest = digest;
  ctx.created_at = now_us();
  ctx.workdir = fs::absolute(a.workdir.empty() ? fs::current_path() : fs::path(a.workdir)).lexically_normal().string();

  json request{{"invocations", a.invocations}, {"workdir", ctx.workdir}};
  std::vector<TaskSpec> tasks;
  auto invs = load_invocations(a.invocations);
  if (!a.bids.empty() || !a.sweep.empty()) {
    if (invs.size() > 1) throw Error(ErrorCategory::Usage, "sweep and BIDS modes take at most one base invocation");
    const Invocation base = invs.empty() ? Invocation{} : invs.front();
    if (!a.bids.empty()) {
      BidsRequest req;
      req.bids_dir = fs::absolute(a.bids).lexically_normal();
      if (!a.participants.empty()) req.participants = a.participants;
      if (!a.sessions.empty()) req.sessions = a.sessions;
      tasks = expand_bids(descriptor, base, req, ctx);
      request["mode"] = "bids";
      request["bids_dir"] = req.bids_dir.string();
      request["participants"] = a.participants;
      request["sessions"] = a.sessions;
    } else {
      const auto sweep = parse_sweep(read_file(a.sweep));
      tasks = expand_sweep(descriptor, base, sweep, ctx);
      request["mode"] = "sweep";
      json s = json::object();
      for (const auto& [k, v] : sweep) s[k] = v;
      request["sweep"] = s;
    }
  } else {
    if (a.invocations.empty())
      throw Error(ErrorCategory::Usage, "give --invocation files, a --sweep file or a --bids directory");
    tasks = expand_invocation_list(descriptor, invs, ctx);
    request["mode"] = "invocations";
  }

  std::error_code ec;
  fs::create_directories(clowdir, ec);
  if (ec) throw OutputDirError("cannot create " + clowdir.string() + ": " + ec.message());
  write_file_atomic(clowdir / kDescriptorFile, raw);
  write_task_specs(clowdir, tasks);
  ExperimentManifest manifest;
  manifest.experiment_id = experiment_id;
  manifest.descriptor_digest = digest;
  manifest.created_at = ctx.created_at;
  for (const auto& t : tasks)
    manifest.tasks.push_back({t.task_id, (fs::path(t.task_id) / kTaskSpecFile).string()});
  for (const auto& in : descriptor.inputs) manifest.parameter_columns.push_back(in.id);
  manifest.request = request;
  write_manifest(clowdir, manifest);

  log::info("experiment " + experiment_id + ": " + std::to_string(tasks.size()) + " task(s)");
  std::cout << clowdir.string() << std::endl;
  return report_dispatch(dispatch(tasks, clowdir, cfg));
}

int cmd_rerun(const fs::path& clowdir, const std::string& mode, const BackendFlags& backend) {
  const auto manifest = read_manifest(clowdir);
  const auto cfg = backend.config();
  const auto tasks = load_tasks(clowdir, manifest);
  const auto records = load_latest_records(clowdir, tasks);
  const auto plan = plan_rerun(tasks, records, parse_rerun_mode(mode));
  if (plan.empty()) {
    log::info("nothing to do");
    return 0;
  }
  std::string ids;
  for (const auto& t : plan) ids += (ids.empty() ? "" : " ") + t.task_id;
  log::info("planned: " + ids);
  return report_dispatch(dispatch(plan, fs::absolute(clowdir), cfg));
}

int cmd_status(const fs::path& clowdir, bool as_json) {
  const auto summary = load_or_consolidate(clowdir);
  if (as_json) {
    std::cout << summary_to_json(summary).dump(2) << std::endl;
    return 0;
  }
  std::string line = summary.experiment_id + ":";
  for (const auto& [status, n] : summary.counts) line += " " + status + "=" + std::to_string(n);
  log::info(line);
  if (summary.aggregate) {
    const auto& a = *summary.aggregate;
    char buf[256];
    std::snprintf(buf, sizeof buf, "duration mean %.2fs max %.2fs", a.mean_duration_s, a.max_duration_s);
    std::string agg = buf;
    if (a.max_peak_rss_bytes) {
      std::snprintf(buf, sizeof buf, "; peak rss mean %.1f MiB max %.1f MiB", *a.mean_peak_rss_bytes / 1048576.0,
                    static_cast<double>(*a.max_peak_rss_bytes) / 1048576.0);
      agg += buf;
    }
    log::info(agg);
  }
  return 0;
}

int cmd_share(const fs::path& clowdir, const std::string& host, int port, const std::string& export_dir,
              const std::string& assets) {
  if (!is_experiment_dir(clowdir)) throw NotAnExperimentDir(clowdir.string());
  if (!export_dir.empty()) {
    const auto manifest = export_static(clowdir, export_dir, assets);
    for (const auto& [file, reason] : manifest.errors) log::warn(file + ": " + reason);
    log::info("exported " + std::to_string(manifest.files.size()) + " file(s)");
    std::cout << fs::absolute(export_dir).string() << std::endl;
    return manifest.ok() ? 0 : exit_code_for(ErrorCategory::Io);
  }

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Portal portal(clowdir, assets);
  PortalServer server(portal);
  const int bound = server.bind(host, port);
  log::info("serving " + clowdir.string() + " at http://" + host + ":" + std::to_string(bound) + "/");
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.wait_until_ready();
    server.stop();
  });
  server.listen();
  // listen() can also return on its own; wake the waiter so it can exit.
  ::kill(::getpid(), SIGTERM);
  waiter.join();
  return 0;
}

int cmd_sentinel(const fs::path& spec_path, const fs::path& clowdir, double interval, int attempt) {
  json j;
  try {
    j = json::parse(read_file(spec_path));
  } catch (const json::parse_error& e) {
    throw SyntaxError(spec_path.string() + ": " + e.what());
  }
  const auto task = task_from_json(j);
  SuperviseOptions opts;
  opts.interval_s = interval;
  if (attempt > 0) opts.attempt = attempt;
  const auto record = supervise(task, clowdir, opts);
  return std::clamp(record.exit_code.value_or(1), 0, 255);
}

// Lets the config file default to <clowdir>/clowdr.ini before parsing.
std::string prescan_clowdir(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string_view arg = argv[i];
    if (arg == "--clowdir" && i + 1 < argc) return argv[i + 1];
    if (arg.rfind("--clowdir=", 0) == 0) return std::string(arg.substr(10));
  }
  if (const char* env = std::getenv("CLOWDR_CLOWDIR")) return env;
  return {};
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Batch experiment orchestration with per-task provenance records"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kWrapperVersion);

  std::string verbosity = "normal";
  app.add_option("--verbosity", verbosity, "quiet, normal or debug")
      ->envname("CLOWDR_VERBOSITY")
      ->check(CLI::IsMember({"quiet", "normal", "debug"}))
      ->capture_default_str();
  bool quiet = false, debug = false;
  app.add_flag("-q,--quiet", quiet, "Same as --verbosity quiet");
  app.add_flag("-d,--debug", debug, "Same as --verbosity debug");

  const auto prescanned = prescan_clowdir(argc, argv);
  app.set_config("--config", prescanned.empty() ? "" : (fs::path(prescanned) / kConfigFile).string(),
                 "INI/TOML file with flag defaults (default: <clowdir>/clowdr.ini)");
  app.allow_config_extras(CLI::config_extras_mode::ignore);

  std::string clowdir;
  auto add_clowdir = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--clowdir", clowdir, "Experiment provenance directory")->envname("CLOWDR_CLOWDIR");
    if (required) opt->required();
  };

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Expand tasks from a descriptor and dispatch them");
  add_clowdir(run_cmd, false);
  run_cmd->add_option("--descriptor", run.descriptor, "Tool descriptor (JSON)")
      ->required()
      ->check(CLI::ExistingFile)
      ->envname("CLOWDR_DESCRIPTOR");
  run_cmd->add_option("--invocation", run.invocations, "Invocation file (object or array); repeatable")
      ->check(CLI::ExistingFile);
  run_cmd->add_option("--sweep", run.sweep, "Sweep file: input id -> array of values")->check(CLI::ExistingFile);
  run_cmd->add_option("--bids", run.bids, "BIDS dataset; one task per participant (and session)")
      ->check(CLI::ExistingDirectory);
  run_cmd->add_option("--participant", run.participants, "Restrict BIDS expansion to these labels");
  run_cmd->add_option("--session", run.sessions, "Restrict BIDS expansion to these sessions");
  run_cmd->add_option("--experiment-id", run.experiment_id, "Explicit experiment id");
  run_cmd->add_option("--workdir", run.workdir, "Working directory for tasks (default: current directory)");
  run.backend.add_to(*run_cmd);
  run_cmd->get_option("--sweep")->excludes(run_cmd->get_option("--bids"));

  std::string mode = "full";
  BackendFlags rerun_backend;
  auto* rerun_cmd = app.add_subcommand("rerun", "Re-execute all, failed, or incomplete tasks");
  add_clowdir(rerun_cmd, true);
  rerun_cmd->add_option("--mode", mode, "full, failures or incomplete")
      ->check(CLI::IsMember({"full", "failures", "incomplete"}))
      ->capture_default_str();
  rerun_backend.add_to(*rerun_cmd);

  bool as_json = false;
  auto* status_cmd = app.add_subcommand("status", "Consolidate records and report progress");
  add_clowdir(status_cmd, true);
  status_cmd->add_flag("--json", as_json, "Print the experiment summary as JSON on stdout");

  std::string host = "127.0.0.1", export_dir, assets;
  int port = 8050;
  auto* share_cmd = app.add_subcommand("share", "Serve the experiment portal or export a static bundle");
  add_clowdir(share_cmd, true);
  share_cmd->add_option("--host", host, "Bind address")->envname("CLOWDR_HOST")->capture_default_str();
  share_cmd->add_option("--port", port, "Port")->envname("CLOWDR_PORT")->capture_default_str();
  share_cmd->add_option("--export", export_dir, "Write a static bundle here instead of serving");
  share_cmd->add_option("--assets", assets, "Dashboard build directory")->envname("CLOWDR_ASSETS");

  std::string spec;
  double interval = 1.0;
  int attempt = 0;
  auto* sentinel_cmd = app.add_subcommand("sentinel", "Supervise one task and write its record");
  add_clowdir(sentinel_cmd, true);
  sentinel_cmd->add_option("--task", spec, "Task spec (task.json)")->required()->check(CLI::ExistingFile);
  sentinel_cmd->add_option("--interval", interval, "Sampling interval in seconds")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sentinel_cmd->add_option("--attempt", attempt, "Attempt number (default: next)");

  std::string stage;
  auto* worker_cmd = app.add_subcommand("worker", "Execute a staged remote-backend directory");
  worker_cmd->add_option("--stage", stage, "Stage directory containing manifest.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  worker_cmd->add_option("--interval", interval, "Sampling interval in seconds")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code_for(ErrorCategory::Usage);
  }

  log::set_level(quiet ? log::Level::Quiet
                       : debug || verbosity == "debug" ? log::Level::Debug
                       : verbosity == "quiet"          ? log::Level::Quiet
                                                       : log::Level::Normal);

  try {
    if (*run_cmd) return cmd_run(run, clowdir);
    if (*rerun_cmd) return cmd_rerun(clowdir, mode, rerun_backend);
    if (*status_cmd) return cmd_status(clowdir, as_json);
    if (*share_cmd) return cmd_share(clowdir, host, port, export_dir, assets);
    if (*sentinel_cmd) return cmd_sentinel(spec, clowdir, interval, attempt);
    if (*worker_cmd) {
      const auto report = run_staged(stage, interval);
      return report_dispatch(report);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(ErrorCategory::Io);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(ErrorCategory::Internal);
  }
  return exit_code_for(ErrorCategory::Usage);
}

}  // namespace clowdr
