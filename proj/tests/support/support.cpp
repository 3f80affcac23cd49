#include "support.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <thread>

#include "clowdr/util.hpp"

namespace testsupport {

using namespace clowdr;

fs::path clowdr_exe() { return CLOWDR_TEST_EXE; }
fs::path tools_dir() { return fs::path(CLOWDR_TEST_EXE).parent_path(); }
fs::path share_dir() { return CLOWDR_TEST_SHARE; }
fs::path golden_dir() { return CLOWDR_TEST_GOLDEN; }

void put_tools_on_path() {
  const char* old = std::getenv("PATH");
  std::string path = tools_dir().string();
  if (old && *old) path += std::string(":") + old;
  ::setenv("PATH", path.c_str(), 1);
}

TempDir::TempDir(std::string_view tag) {
  static std::atomic<int> counter{0};
  const auto base = fs::temp_directory_path();
  for (;;) {
    path_ = base / ("clowdr-test-" + std::string(tag) + "-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter++));
    if (fs::create_directory(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::vector<std::string> shell_split(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  bool in_word = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == ' ' || c == '\t' || c == '\n') {
      if (in_word) words.push_back(std::move(cur)), cur.clear(), in_word = false;
      continue;
    }
    in_word = true;
    if (c == '\'') {
      const auto end = s.find('\'', i + 1);
      if (end == std::string_view::npos) throw std::runtime_error("unterminated single quote");
      cur.append(s.substr(i + 1, end - i - 1));
      i = end;
    } else if (c == '"') {
      for (++i; i < s.size() && s[i] != '"'; ++i) {
        if (s[i] == '\\' && i + 1 < s.size() && std::string_view("$`\"\\\n").find(s[i + 1]) != std::string_view::npos)
          ++i;
        cur += s[i];
      }
      if (i >= s.size()) throw std::runtime_error("unterminated double quote");
    } else if (c == '\\' && i + 1 < s.size()) {
      cur += s[++i];
    } else {
      cur += c;
    }
  }
  if (in_word) words.push_back(std::move(cur));
  return words;
}

ProcResult run_shell(const std::string& cmd) {
  TempDir tmp("sh");
  const auto out = tmp / "out", err = tmp / "err";
  const std::string full = "( " + cmd + " ) >" + shell_quote(out.string()) + " 2>" + shell_quote(err.string());
  const int status = std::system(full.c_str());
  ProcResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

void write_text(const fs::path& path, std::string_view text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
}

ToolDescriptor toy_descriptor() { return load_descriptor(share_dir() / "descriptors" / "toy.json"); }

ToolDescriptor load_descriptor(const fs::path& path) { return parse_descriptor(read_file(path)); }

ExpansionContext context(std::string experiment_id, fs::path workdir) {
  ExpansionContext ctx;
  ctx.experiment_id = std::move(experiment_id);
  ctx.descriptor_digest = std::string(64, 'a');
  ctx.created_at = parse_timestamp("2026-01-01T00:00:00.000000Z");
  ctx.workdir = workdir.string();
  return ctx;
}

std::vector<TaskSpec> init_experiment(const fs::path& clowdir, const ToolDescriptor& d,
                                      const std::vector<Invocation>& invs, std::string experiment_id) {
  auto ctx = context(std::move(experiment_id), clowdir);
  const auto raw = descriptor_to_json(d).dump(2);
  ctx.descriptor_digest = sha256_hex(raw);
  auto tasks = expand_invocation_list(d, invs, ctx);
  fs::create_directories(clowdir);
  write_file_atomic(clowdir / kDescriptorFile, raw);
  write_task_specs(clowdir, tasks);
  ExperimentManifest m;
  m.experiment_id = ctx.experiment_id;
  m.descriptor_digest = ctx.descriptor_digest;
  m.created_at = ctx.created_at;
  for (const auto& t : tasks) m.tasks.push_back({t.task_id, t.task_id + "/" + kTaskSpecFile});
  for (const auto& in : d.inputs) m.parameter_columns.push_back(in.id);
  write_manifest(clowdir, m);
  return tasks;
}

namespace {

ToolDescriptor fixture_descriptor() {
  return parse_descriptor(R"({
    "name": "fixture", "tool-version": "1", "command-line": "echo [P] [N]",
    "inputs": [
      {"id": "participant_label", "type": "String", "value-key": "[P]"},
      {"id": "n", "type": "Number", "value-key": "[N]", "optional": true}
    ]})");
}

}  // namespace

std::vector<TaskSpec> write_fixture(const fs::path& clowdir, const std::vector<FixtureTask>& fixture) {
  std::vector<Invocation> invs;
  for (const auto& f : fixture) invs.push_back(invocation_from_json(f.params));
  auto tasks = init_experiment(clowdir, fixture_descriptor(), invs, "exp-fixture");
  const auto epoch = parse_timestamp("2026-03-01T12:00:00.000000Z");
  auto at = [&](double s) {
    return epoch + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
  };
  for (std::size_t i = 0; i < fixture.size(); ++i) {
    const auto& f = fixture[i];
    if (f.state == FixtureTask::State::Missing) continue;
    TaskRecord r;
    r.task_id = tasks[i].task_id;
    r.experiment_id = tasks[i].experiment_id;
    r.hostname = local_hostname();
    r.supervisor_pid = ::getpid();
    r.launched_at = at(f.start_s);
    r.updated_at = f.state == FixtureTask::State::Running ? Clock::now() : at(f.start_s + f.duration_s);
    r.stdout_path = r.task_id + "/" + stdout_filename(1);
    r.stderr_path = r.task_id + "/" + stderr_filename(1);
    r.samples = f.samples;
    r.interval_s = 1.0;
    r.rendered_command = tasks[i].rendered_command;
    if (f.state != FixtureTask::State::Running) {
      r.finished_at = at(f.start_s + f.duration_s);
      r.exit_code = f.state == FixtureTask::State::Succeeded ? 0 : (f.exit_code == 0 ? 1 : f.exit_code);
    }
    write_text(clowdir / r.stdout_path, "out " + r.task_id + "\n");
    write_text(clowdir / r.stderr_path, "");
    write_record(clowdir / r.task_id, r);
  }
  return tasks;
}

std::vector<FixtureTask> random_fixture(std::mt19937& rng, std::size_t n) {
  static const char* labels[] = {"100206", "100307", "100408", "100610", "101006"};
  std::uniform_int_distribution<int> pick(0, 4), state(0, 9), nsamples(0, 6), num(0, 50);
  std::uniform_real_distribution<double> start(0, 100), dur(0.5, 30), cpu(0, 180);
  std::uniform_int_distribution<std::uint64_t> rss(1 << 20, 1ull << 32);
  std::vector<FixtureTask> out;
  for (std::size_t i = 0; i < n; ++i) {
    FixtureTask f;
    f.params = {{"participant_label", labels[pick(rng)]}, {"n", num(rng)}};
    const int s = state(rng);
    f.state = s < 6   ? FixtureTask::State::Succeeded
              : s < 8 ? FixtureTask::State::Failed
              : s < 9 ? FixtureTask::State::Missing
                      : FixtureTask::State::Running;
    f.exit_code = s < 6 ? 0 : 1 + pick(rng);
    f.start_s = start(rng);
    f.duration_s = dur(rng);
    const int k = nsamples(rng);
    for (int j = 0; j < k; ++j) f.samples.push_back({static_cast<double>(j), cpu(rng), rss(rng)});
    out.push_back(std::move(f));
  }
  return out;
}

int max_overlap(std::vector<std::pair<double, double>> intervals) {
  std::vector<std::pair<double, int>> events;
  for (const auto& [a, b] : intervals) {
    events.emplace_back(a, +1);
    events.emplace_back(b, -1);
  }
  // Ends sort before starts at the same instant: [a,b) then [b,c) never overlap.
  std::sort(events.begin(), events.end());
  int open = 0, best = 0;
  for (const auto& [t, delta] : events) best = std::max(best, open += delta);
  return best;
}

double numeric_time_weighted_mean(const std::vector<std::pair<double, double>>& pts, int steps) {
  if (pts.size() == 1) return pts[0].second;
  const double t0 = pts.front().first, t1 = pts.back().first;
  const double h = (t1 - t0) / steps;
  double acc = 0;
  std::size_t seg = 0;
  for (int i = 0; i < steps; ++i) {
    const double t = t0 + (i + 0.5) * h;
    while (seg + 2 < pts.size() && t > pts[seg + 1].first) ++seg;
    const auto [ta, va] = pts[seg];
    const auto [tb, vb] = pts[seg + 1];
    const double v = tb == ta ? va : va + (vb - va) * (t - ta) / (tb - ta);
    acc += v * h;
  }
  return acc / (t1 - t0);
}

unsigned online_cores() {
  const long n = ::sysconf(_SC_NPROCESSORS_ONLN);
  return n > 0 ? static_cast<unsigned>(n) : 1u;
}

}  // namespace testsupport

namespace testsupport {

ToolDescriptor sweep_descriptor() {
  return parse_descriptor(R"({
    "name": "sweepable", "tool-version": "1", "command-line": "run [A] [B] [C] [D] [E] [V]",
    "inputs": [
      {"id": "a", "type": "Number", "value-key": "[A]", "optional": true, "default-value": 0},
      {"id": "b", "type": "String", "value-key": "[B]", "optional": true},
      {"id": "c", "type": "String", "value-key": "[C]", "value-choices": ["p", "q", "r"], "optional": true},
      {"id": "d", "type": "File", "value-key": "[D]", "command-line-flag": "-d", "optional": true},
      {"id": "e", "type": "Number", "value-key": "[E]", "command-line-flag": "--e", "optional": true},
      {"id": "v", "type": "Flag", "value-key": "[V]", "command-line-flag": "-v", "optional": true}
    ]})");
}

SweepParams random_sweep(std::mt19937& rng, bool allow_invalid) {
  std::vector<std::string> keys{"a", "b", "c", "d", "e"};
  std::shuffle(keys.begin(), keys.end(), rng);
  std::uniform_int_distribution<int> nkeys(1, 4), nvals(1, 4), small(-5, 99), coin(0, 9);
  keys.resize(static_cast<std::size_t>(nkeys(rng)));
  SweepParams sweep;
  for (const auto& k : keys) {
    auto& vals = sweep[k];
    const int n = nvals(rng);
    for (int i = 0; i < n; ++i) {
      if (k == "a" || k == "e") vals.push_back(coin(rng) < 5 ? json(small(rng)) : json(small(rng) + 0.5));
      else if (k == "c") vals.push_back(std::string(1, "pqr"[i % 3]));
      else if (k == "d") vals.push_back("/data/f" + std::to_string(small(rng)));
      else vals.push_back("s" + std::to_string(small(rng)) + (coin(rng) < 2 ? " spaced" : ""));
    }
  }
  if (allow_invalid && coin(rng) < 3) {
    auto it = std::next(sweep.begin(), std::uniform_int_distribution<long>(0, long(sweep.size()) - 1)(rng));
    auto& slot = it->second[std::uniform_int_distribution<std::size_t>(0, it->second.size() - 1)(rng)];
    if (it->first == "c") slot = "z";
    else if (it->first == "a" || it->first == "e") slot = true;
    else slot = 42;
  }
  return sweep;
}

namespace {

void enumerate(const ToolDescriptor& d, const Invocation& current, std::vector<std::string>::const_iterator key,
               std::vector<std::string>::const_iterator end, const SweepParams& sweep, std::vector<Invocation>& out) {
  if (key == end) {
    out.push_back(validate_invocation(d, current));
    return;
  }
  for (const auto& v : sweep.at(*key)) {
    Invocation next = current;
    next.values[*key] = v;
    enumerate(d, next, std::next(key), end, sweep, out);
  }
}

}  // namespace

std::vector<Invocation> sweep_oracle(const ToolDescriptor& d, const Invocation& base, const SweepParams& sweep) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : sweep) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::vector<Invocation> out;
  enumerate(d, base, keys.cbegin(), keys.cend(), sweep, out);
  return out;
}

void make_bids(const fs::path& root, const std::vector<std::pair<std::string, std::vector<std::string>>>& layout) {
  fs::create_directories(root);
  write_text(root / "dataset_description.json", R"({"Name": "synthetic", "BIDSVersion": "1.8.0"})");
  write_text(root / "participants.tsv", "participant_id\n");
  for (const auto& [p, sessions] : layout) {
    const auto sub = root / ("sub-" + p);
    if (sessions.empty()) fs::create_directories(sub / "anat");
    for (const auto& s : sessions) fs::create_directories(sub / ("ses-" + s) / "anat");
    write_text(sub / ("sub-" + p + "_sessions.tsv"), "session_id\n");
  }
  // Distractors a naive glob would pick up.
  write_text(root / "sub-notadir", "");
  fs::create_directories(root / "derivatives" / "sub-99");
}

std::vector<std::pair<std::string, std::string>> bids_walk_oracle(
    const fs::path& root, const std::optional<std::vector<std::string>>& participants,
    const std::optional<std::vector<std::string>>& sessions, bool use_sessions) {
  std::map<std::string, std::set<std::string>> tree;
  for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
    if (!it->is_directory()) continue;
    const auto rel = fs::relative(it->path(), root);
    const auto parts = std::vector<fs::path>(rel.begin(), rel.end());
    const auto name0 = parts[0].string();
    if (name0.rfind("sub-", 0) != 0) {
      it.disable_recursion_pending();
      continue;
    }
    tree[name0.substr(4)];
    if (parts.size() == 2 && parts[1].string().rfind("ses-", 0) == 0) tree[name0.substr(4)].insert(parts[1].string().substr(4));
    if (parts.size() >= 2) it.disable_recursion_pending();
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [p, ses] : tree) {
    if (participants && std::find(participants->begin(), participants->end(), p) == participants->end()) continue;
    if (!use_sessions) {
      out.emplace_back(p, "");
      continue;
    }
    if (!sessions && ses.empty()) out.emplace_back(p, "");
    for (const auto& s : ses)
      if (!sessions || std::find(sessions->begin(), sessions->end(), s) != sessions->end()) out.emplace_back(p, s);
  }
  return out;
}

}  // namespace testsupport

namespace testsupport {

pid_t spawn(const std::vector<std::string>& argv) {
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const pid_t pid = ::fork();
  if (pid == 0) {
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  if (pid < 0) throw std::runtime_error("fork failed");
  return pid;
}

int wait_exit(pid_t pid) {
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
}

TaskSpec raw_task(const std::string& command, std::size_t ordinal, const std::string& experiment_id) {
  TaskSpec t;
  t.task_id = task_id_for(ordinal);
  t.experiment_id = experiment_id;
  t.rendered_command = command;
  t.descriptor_digest = std::string(64, '0');
  t.created_at = Clock::now();
  return t;
}

}  // namespace testsupport

namespace testsupport {

json record_essence(const fs::path& clowdir, const TaskRecord& r) {
  return {{"task_id", r.task_id},
          {"experiment_id", r.experiment_id},
          {"attempt", r.attempt},
          {"exit_code", r.exit_code ? json(*r.exit_code) : json()},
          {"signal", r.signal ? json(*r.signal) : json()},
          {"finished", r.finished()},
          {"stdout_path", r.stdout_path},
          {"stderr_path", r.stderr_path},
          {"rendered_command", r.rendered_command},
          {"wrapper_version", r.wrapper_version},
          {"error", r.error ? json(*r.error) : json()},
          {"stdout", read_file(clowdir / r.stdout_path)}};
}

std::vector<TaskSpec> golden_plan(const fs::path& clowdir) {
  const auto d = toy_descriptor();
  auto ctx = context("exp-golden", clowdir);
  const Invocation base{{{"mb", 1}, {"burn", 0}, {"sleep", 0.1}, {"stdout_bytes", 200}}};
  auto tasks = expand_sweep(d, base, {{"exit_code", {0, 1, 2, 3}}}, ctx);
  fs::create_directories(clowdir);
  write_task_specs(clowdir, tasks);
  return tasks;
}

}  // namespace testsupport

#include <httplib.h>

#include "clowdr/portal.hpp"

namespace testsupport {

struct LiveServer::Impl {
  Portal portal;
  PortalServer server;
  std::thread thread;

  Impl(const fs::path& clowdir, const fs::path& assets) : portal(clowdir, assets), server(portal) {}
};

LiveServer::LiveServer(const fs::path& clowdir, const fs::path& assets)
    : impl_(std::make_unique<Impl>(clowdir, assets)) {
  port_ = impl_->server.bind("127.0.0.1", 0);
  impl_->thread = std::thread([this] { impl_->server.listen(); });
  if (!impl_->server.wait_until_ready()) throw std::runtime_error("portal did not start");
}

LiveServer::~LiveServer() {
  impl_->server.stop();
  impl_->thread.join();
}

std::pair<int, std::string> LiveServer::get(const std::string& path_and_query) const {
  httplib::Client client("127.0.0.1", port_);
  client.set_read_timeout(30, 0);
  auto res = client.Get(path_and_query);
  if (!res) return {-1, {}};
  return {res->status, res->body};
}

std::vector<std::string> top_k_by_peak(const std::vector<TaskRow>& rows, std::size_t k) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (const auto& r : rows)
    if (r.peak_rss_bytes) keyed.emplace_back(*r.peak_rss_bytes, r.ordinal);
  // Larger peak first; equal peaks by smaller ordinal.
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, keyed.size()); ++i) out.push_back(task_id_for(keyed[i].second));
  return out;
}

}  // namespace testsupport
