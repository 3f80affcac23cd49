#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <sys/types.h>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clowdr/descriptor.hpp"
#include "clowdr/provenance.hpp"
#include "clowdr/record.hpp"
#include "clowdr/taskgen.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using clowdr::json;

// Locations baked in by CMake.
fs::path clowdr_exe();
fs::path tools_dir();
fs::path share_dir();
fs::path golden_dir();

// Prepends tools_dir() to PATH so descriptors can name clowdr-toy.
void put_tools_on_path();

class TempDir {
 public:
  explicit TempDir(std::string_view tag = "t");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const fs::path& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// Word splitting the way a POSIX shell does it for plain words, single
// quotes, double quotes and backslashes. No expansions.
std::vector<std::string> shell_split(std::string_view text);

struct ProcResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs `cmd` under /bin/sh and captures both streams.
ProcResult run_shell(const std::string& cmd);

// fork/exec without a shell; returns the child pid.
pid_t spawn(const std::vector<std::string>& argv);
// Waits for pid; returns the exit code or 128+signal.
int wait_exit(pid_t pid);

// A TaskSpec for a raw shell command.
clowdr::TaskSpec raw_task(const std::string& command, std::size_t ordinal = 0,
                          const std::string& experiment_id = "exp-raw");

void write_text(const fs::path& path, std::string_view text);

clowdr::ToolDescriptor toy_descriptor();
clowdr::ToolDescriptor load_descriptor(const fs::path& path);
clowdr::ExpansionContext context(std::string experiment_id = "exp-test", fs::path workdir = {});

// Writes descriptor.json, task specs and experiment.json; returns the tasks.
std::vector<clowdr::TaskSpec> init_experiment(const fs::path& clowdir, const clowdr::ToolDescriptor& d,
                                              const std::vector<clowdr::Invocation>& invs,
                                              std::string experiment_id = "exp-test");

// One synthetic task state for portal/provenance fixtures.
struct FixtureTask {
  json params = json::object();
  enum class State { Succeeded, Failed, Running, Missing } state = State::Succeeded;
  int exit_code = 0;
  double start_s = 0;  // offset from the fixture epoch
  double duration_s = 1;
  std::vector<clowdr::ResourceSample> samples;
};

// Builds a clowdir whose records reflect `tasks` without executing anything.
// Inputs: participant_label (String) and n (Number).
std::vector<clowdr::TaskSpec> write_fixture(const fs::path& clowdir, const std::vector<FixtureTask>& tasks);

std::vector<FixtureTask> random_fixture(std::mt19937& rng, std::size_t n);

// Sweep-line maximum number of simultaneously open [start, end) intervals.
int max_overlap(std::vector<std::pair<double, double>> intervals);

// Independent trapezoid integral by fine midpoint sampling of the piecewise
// linear interpolant.
double numeric_time_weighted_mean(const std::vector<std::pair<double, double>>& points, int steps = 100000);

unsigned online_cores();

// Record fields that must agree across backends: everything except
// timestamps, host, pid and the sample series. Adds the stdout bytes.
json record_essence(const fs::path& clowdir, const clowdr::TaskRecord& r);

// Four quick toy tasks (exit codes 0..3) used by the golden-file and backend
// equivalence checks. Specs are written under clowdir.
std::vector<clowdr::TaskSpec> golden_plan(const fs::path& clowdir);

// A PortalServer on an ephemeral port, listening on a background thread.
class LiveServer {
 public:
  explicit LiveServer(const fs::path& clowdir, const fs::path& assets = {});
  ~LiveServer();
  int port() const { return port_; }
  // GET returning (status, body); status -1 on transport failure.
  std::pair<int, std::string> get(const std::string& path_and_query) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

// Independent top-k by peak RSS: descending, rows without a value excluded,
// ties broken by ordinal.
std::vector<std::string> top_k_by_peak(const std::vector<clowdr::TaskRow>& rows, std::size_t k);

inline const fs::path kGoldenClowdir = "/tmp/clowdr-golden";

// Inputs a (Number), b (String), c (String, choices p|q|r), d (File),
// e (Number, optional) and v (Flag).
clowdr::ToolDescriptor sweep_descriptor();

// Up to 4 keys with up to 4 values each. With allow_invalid, at most one
// value somewhere is of the wrong kind or outside the choices.
clowdr::SweepParams random_sweep(std::mt19937& rng, bool allow_invalid);

// Nested-loop enumeration in sorted key order, validating every assignment.
// Throws the ValidationError of the first invalid assignment.
std::vector<clowdr::Invocation> sweep_oracle(const clowdr::ToolDescriptor& d, const clowdr::Invocation& base,
                                             const clowdr::SweepParams& sweep);

// Creates <root>/sub-<p>[/ses-<s>]/anat for each entry, plus distractor files.
void make_bids(const fs::path& root, const std::vector<std::pair<std::string, std::vector<std::string>>>& layout);

// Independent walk of a BIDS tree: (participant, session) pairs, session ""
// for participants without ses-* directories.
std::vector<std::pair<std::string, std::string>> bids_walk_oracle(
    const fs::path& root, const std::optional<std::vector<std::string>>& participants,
    const std::optional<std::vector<std::string>>& sessions, bool use_sessions);

}  // namespace testsupport
