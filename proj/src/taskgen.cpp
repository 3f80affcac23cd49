#include "clowdr/taskgen.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "clowdr/errors.hpp"
#include "clowdr/log.hpp"
#include "clowdr/record.hpp"

namespace clowdr {

namespace {

TaskSpec make_task(const ToolDescriptor& d, Invocation normalized, std::size_t ordinal,
                   const ExpansionContext& ctx) {
  TaskSpec t;
  t.task_id = task_id_for(ordinal);
  t.experiment_id = ctx.experiment_id;
  t.rendered_command = render_command(d, normalized);
  if (d.container)
    t.rendered_command =
        containerize_command(*d.container, t.rendered_command, ctx.workdir.empty() ? "/" : ctx.workdir);
  t.invocation = std::move(normalized);
  t.descriptor_digest = ctx.descriptor_digest;
  t.created_at = ctx.created_at;
  t.workdir = ctx.workdir;
  return t;
}

std::string strip_prefix(const std::string& label, std::string_view prefix) {
  return label.rfind(prefix, 0) == 0 ? label.substr(prefix.size()) : label;
}

std::vector<std::string> labelled_dirs(const std::filesystem::path& dir, std::string_view prefix) {
  std::vector<std::string> labels;
  std::error_code ec;
  for (std::filesystem::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    const auto name = it->path().filename().string();
    if (name.size() > prefix.size() && name.rfind(prefix, 0) == 0 && it->is_directory(ec))
      labels.push_back(name.substr(prefix.size()));
  }
  std::sort(labels.begin(), labels.end());
  return labels;
}

}  // namespace

std::string task_id_for(std::size_t ordinal) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "task-%05zu", ordinal);
  return buf;
}

std::optional<std::size_t> ordinal_of(std::string_view task_id) {
  constexpr std::string_view prefix = "task-";
  if (task_id.size() < prefix.size() + 5 || task_id.substr(0, prefix.size()) != prefix) return std::nullopt;
  std::size_t n = 0;
  for (char c : task_id.substr(prefix.size())) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + static_cast<std::size_t>(c - '0');
  }
  if (task_id_for(n) != task_id) return std::nullopt;
  return n;
}

json task_to_json(const TaskSpec& t) {
  return {
      {"task_id", t.task_id},
      {"experiment_id", t.experiment_id},
      {"invocation", invocation_to_json(t.invocation)},
      {"rendered_command", t.rendered_command},
      {"descriptor_digest", t.descriptor_digest},
      {"created_at", format_timestamp(t.created_at)},
      {"workdir", t.workdir},
  };
}

TaskSpec task_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("", "task spec must be a JSON object");
  TaskSpec t;
  try {
    t.task_id = j.at("task_id").get<std::string>();
    t.experiment_id = j.value("experiment_id", "");
    t.invocation = invocation_from_json(j.value("invocation", json::object()));
    t.rendered_command = j.at("rendered_command").get<std::string>();
    t.descriptor_digest = j.value("descriptor_digest", "");
    t.created_at = parse_timestamp(j.at("created_at").get<std::string>());
    t.workdir = j.value("workdir", "");
  } catch (const json::exception& e) {
    throw SchemaError("task", std::string("malformed task spec: ") + e.what());
  }
  if (!ordinal_of(t.task_id)) throw SchemaError("task_id", "malformed task id " + t.task_id);
  return t;
}

SweepParams parse_sweep(std::string_view raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw SyntaxError(std::string("sweep file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("", "sweep file must be an object of id -> array");
  SweepParams sweep;
  for (const auto& [key, values] : j.items()) {
    if (!values.is_array()) throw ValidationError(ValidationKind::InvalidSweep, key, "sweep values must be an array");
    sweep[key] = std::vector<json>(values.begin(), values.end());
  }
  return sweep;
}

std::vector<TaskSpec> expand_invocation_list(const ToolDescriptor& d, const std::vector<Invocation>& invs,
                                             const ExpansionContext& ctx) {
  if (invs.empty()) log::warn("invocation list is empty; no tasks generated");
  std::vector<Invocation> normalized;
  normalized.reserve(invs.size());
  for (std::size_t i = 0; i < invs.size(); ++i) {
    try {
      normalized.push_back(validate_invocation(d, invs[i]));
    } catch (const ValidationError& e) {
      throw e.at_index(i);
    }
  }
  std::vector<TaskSpec> tasks;
  tasks.reserve(normalized.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) tasks.push_back(make_task(d, std::move(normalized[i]), i, ctx));
  return tasks;
}

std::vector<TaskSpec> expand_sweep(const ToolDescriptor& d, const Invocation& base, const SweepParams& sweep,
                                   const ExpansionContext& ctx) {
  std::vector<std::string> keys;
  std::vector<std::vector<json>> lists;
  for (const auto& [id, values] : sweep) {
    const InputSpec* in = d.find_input(id);
    if (!in) throw ValidationError(ValidationKind::UnknownInput, id, "sweep key is not a descriptor input");
    if (in->kind == InputKind::Flag)
      throw ValidationError(ValidationKind::InvalidSweep, id, "Flag inputs cannot be swept");
    if (values.empty()) throw ValidationError(ValidationKind::InvalidSweep, id, "sweep value list is empty");
    std::vector<json> checked;
    for (const auto& v : values) checked.push_back(validate_value(*in, v));
    keys.push_back(id);
    lists.push_back(std::move(checked));
  }
  if (keys.empty()) throw ValidationError(ValidationKind::InvalidSweep, "", "sweep has no parameters");

  std::vector<Invocation> assignments;
  std::vector<std::size_t> digits(keys.size(), 0);
  while (true) {
    Invocation inv = base;
    for (std::size_t k = 0; k < keys.size(); ++k) inv.values[keys[k]] = lists[k][digits[k]];
    assignments.push_back(validate_invocation(d, inv));

    // Odometer increment, last key fastest.
    std::size_t k = keys.size();
    while (k > 0 && ++digits[k - 1] == lists[k - 1].size()) {
      digits[k - 1] = 0;
      --k;
    }
    if (k == 0) break;
  }

  std::vector<TaskSpec> tasks;
  tasks.reserve(assignments.size());
  for (std::size_t i = 0; i < assignments.size(); ++i) tasks.push_back(make_task(d, std::move(assignments[i]), i, ctx));
  return tasks;
}

std::vector<std::pair<std::string, std::string>> discover_bids(const BidsRequest& req, bool use_sessions) {
  std::error_code ec;
  if (!std::filesystem::is_directory(req.bids_dir, ec)) throw NotABidsDir(req.bids_dir.string());
  const auto available = labelled_dirs(req.bids_dir, "sub-");
  if (available.empty()) throw NotABidsDir(req.bids_dir.string());

  std::vector<std::string> participants;
  if (req.participants) {
    std::set<std::string> wanted;
    for (const auto& p : *req.participants) {
      auto label = strip_prefix(p, "sub-");
      if (!std::binary_search(available.begin(), available.end(), label)) throw UnknownParticipant(label);
      wanted.insert(label);
    }
    participants.assign(wanted.begin(), wanted.end());
  } else {
    participants = available;
  }

  std::set<std::string> wanted_sessions;
  if (req.sessions)
    for (const auto& s : *req.sessions) wanted_sessions.insert(strip_prefix(s, "ses-"));
  std::set<std::string> matched_sessions;

  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& p : participants) {
    if (!use_sessions) {
      pairs.emplace_back(p, "");
      continue;
    }
    const auto sessions = labelled_dirs(req.bids_dir / ("sub-" + p), "ses-");
    if (!req.sessions) {
      if (sessions.empty()) pairs.emplace_back(p, "");
      for (const auto& s : sessions) pairs.emplace_back(p, s);
      continue;
    }
    for (const auto& s : sessions) {
      if (wanted_sessions.count(s)) {
        pairs.emplace_back(p, s);
        matched_sessions.insert(s);
      }
    }
  }
  for (const auto& s : wanted_sessions)
    if (!matched_sessions.count(s)) throw UnknownSession(s);
  return pairs;
}

std::vector<TaskSpec> expand_bids(const ToolDescriptor& d, const Invocation& base, const BidsRequest& req,
                                  const ExpansionContext& ctx) {
  const InputSpec* participant_input = d.find_input("participant_label");
  if (!participant_input)
    throw SchemaError("participant_label", "BIDS expansion requires a participant_label input");
  const InputSpec* session_input = d.find_input("session_label");
  if (req.sessions && !session_input)
    throw SchemaError("session_label", "session labels were given but the descriptor has no session_label input");

  const auto pairs = discover_bids(req, session_input != nullptr);

  std::vector<Invocation> normalized;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [participant, session] = pairs[i];
    Invocation inv = base;
    if (const InputSpec* dir_input = d.find_input("bids_dir"); dir_input && !inv.values.count("bids_dir"))
      inv.values["bids_dir"] = req.bids_dir.string();
    inv.values["participant_label"] = validate_value(*participant_input, participant);
    if (!session.empty()) inv.values["session_label"] = validate_value(*session_input, session);
    try {
      normalized.push_back(validate_invocation(d, inv));
    } catch (const ValidationError& e) {
      throw e.at_index(i);
    }
  }
  std::vector<TaskSpec> tasks;
  for (std::size_t i = 0; i < normalized.size(); ++i) tasks.push_back(make_task(d, std::move(normalized[i]), i, ctx));
  return tasks;
}

RerunMode parse_rerun_mode(std::string_view text) {
  if (text == "full") return RerunMode::Full;
  if (text == "failures" || text == "failures-only") return RerunMode::FailuresOnly;
  if (text == "incomplete" || text == "incomplete-only") return RerunMode::IncompleteOnly;
  throw Error(ErrorCategory::Usage, "unknown rerun mode: " + std::string(text));
}

std::vector<TaskSpec> plan_rerun(const std::vector<TaskSpec>& tasks, const std::map<std::string, TaskRecord>& records,
                                 RerunMode mode) {
  std::vector<TaskSpec> plan;
  for (const auto& t : tasks) {
    auto it = records.find(t.task_id);
    const TaskRecord* r = it == records.end() ? nullptr : &it->second;
    bool selected = false;
    switch (mode) {
      case RerunMode::Full:
        selected = true;
        break;
      case RerunMode::FailuresOnly:
        selected = r && r->exit_code && *r->exit_code != 0;
        break;
      case RerunMode::IncompleteOnly:
        selected = !r || !r->finished_at;
        break;
    }
    if (selected) plan.push_back(t);
  }
  if (plan.empty()) log::warn("re-execution plan is empty");
  return plan;
}

}  // namespace clowdr
