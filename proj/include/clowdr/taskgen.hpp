#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clowdr/descriptor.hpp"
#include "clowdr/util.hpp"

namespace clowdr {

struct TaskRecord;

struct TaskSpec {
  std::string task_id;
  std::string experiment_id;
  Invocation invocation;
  std::string rendered_command;
  std::string descriptor_digest;
  Timestamp created_at;
  // Directory the command runs in; empty means the supervisor's cwd.
  std::string workdir;

  bool operator==(const TaskSpec&) const = default;
};

json task_to_json(const TaskSpec& t);
TaskSpec task_from_json(const json& j);

// "task-00003" <-> 3
std::string task_id_for(std::size_t ordinal);
std::optional<std::size_t> ordinal_of(std::string_view task_id);

// Identity shared by every task of one expansion. Passing created_at in keeps
// expansion a pure function of its inputs.
struct ExpansionContext {
  std::string experiment_id;
  std::string descriptor_digest;
  Timestamp created_at{};
  std::string workdir;
};

using SweepParams = std::map<std::string, std::vector<json>>;

SweepParams parse_sweep(std::string_view raw);

std::vector<TaskSpec> expand_invocation_list(const ToolDescriptor& d, const std::vector<Invocation>& invs,
                                             const ExpansionContext& ctx);

// Cartesian product over the sweep lists. The first key in sorted order is
// the most significant digit of the enumeration.
std::vector<TaskSpec> expand_sweep(const ToolDescriptor& d, const Invocation& base, const SweepParams& sweep,
                                   const ExpansionContext& ctx);

struct BidsRequest {
  std::filesystem::path bids_dir;
  std::optional<std::vector<std::string>> participants;
  std::optional<std::vector<std::string>> sessions;
};

// (participant, session) pairs present in a dataset. session is empty for
// participants without ses-* directories.
std::vector<std::pair<std::string, std::string>> discover_bids(const BidsRequest& req, bool use_sessions);

std::vector<TaskSpec> expand_bids(const ToolDescriptor& d, const Invocation& base, const BidsRequest& req,
                                  const ExpansionContext& ctx);

enum class RerunMode { Full, FailuresOnly, IncompleteOnly };

RerunMode parse_rerun_mode(std::string_view text);

std::vector<TaskSpec> plan_rerun(const std::vector<TaskSpec>& tasks,
                                 const std::map<std::string, TaskRecord>& records, RerunMode mode);

}  // namespace clowdr
