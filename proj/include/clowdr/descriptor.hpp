#pragma once

// Boutiques-subset tool descriptors, invocations, and command rendering.
//
// Supported per input: id, value-key, type (String/Number/Flag/File),
// optional, default-value, command-line-flag, value-choices, list.
// Descriptors that rely on anything the renderer would silently ignore
// (groups, inter-input requirements, numeric bounds, list separators, ...)
// are rejected with UnsupportedFeature.

#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace clowdr {

using json = nlohmann::json;

enum class InputKind { String, Number, Flag, File };

const char* to_string(InputKind kind);

struct InputSpec {
  std::string id;
  std::string value_key;
  InputKind kind = InputKind::String;
  bool optional = false;
  std::optional<json> default_value;
  std::optional<std::string> command_line_flag;
  std::optional<std::vector<json>> value_choices;
  bool is_list = false;
  // Supported-but-unused keys such as "name" and "description".
  json extras = json::object();

  bool operator==(const InputSpec&) const = default;
};

enum class ContainerRuntime { Docker, Singularity };

struct BindMount {
  std::string host_path;
  std::string container_path;

  bool operator==(const BindMount&) const = default;
};

struct ContainerSpec {
  ContainerRuntime runtime = ContainerRuntime::Docker;
  std::string image;
  std::vector<BindMount> bind_mounts;

  bool operator==(const ContainerSpec&) const = default;
};

struct OutputSpec {
  std::string id;
  std::string path_template;

  bool operator==(const OutputSpec&) const = default;
};

struct ToolDescriptor {
  std::string name;
  std::string tool_version;
  std::string command_line;
  std::vector<InputSpec> inputs;
  std::optional<ContainerSpec> container;
  std::vector<OutputSpec> outputs;
  // Unknown top-level keys, preserved verbatim.
  json extras = json::object();

  const InputSpec* find_input(std::string_view id) const;
  std::vector<std::string> output_globs() const;

  bool operator==(const ToolDescriptor&) const = default;
};

// Input id -> value. Values are JSON strings, numbers, booleans or arrays of those.
struct Invocation {
  std::map<std::string, json> values;

  bool operator==(const Invocation&) const = default;
};

ToolDescriptor parse_descriptor(std::string_view raw);
json descriptor_to_json(const ToolDescriptor& d);

Invocation parse_invocation(std::string_view raw);
Invocation invocation_from_json(const json& j);
json invocation_to_json(const Invocation& inv);

// Fills defaults for absent inputs and normalizes scalars given to list
// inputs into one-element lists. Idempotent.
Invocation validate_invocation(const ToolDescriptor& d, const Invocation& inv);

// Checks a single value against one input (kind and choices). Returns the
// normalized value.
json validate_value(const InputSpec& input, const json& value);

std::string render_command(const ToolDescriptor& d, const Invocation& normalized);

std::string containerize_command(const ContainerSpec& c, std::string_view cmd, std::string_view workdir);

// Every `[A-Z0-9_]+` value-key occurrence in `text`, in order.
std::vector<std::string> find_value_keys(std::string_view text);

}  // namespace clowdr
