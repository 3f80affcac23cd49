#include "clowdr/descriptor.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>

#include "clowdr/errors.hpp"
#include "clowdr/util.hpp"

namespace clowdr {

namespace {

constexpr std::array kUnsupportedTopLevel = {"groups", "environment-variables"};

constexpr std::array kUnsupportedInputKeys = {
    "requires-inputs",   "disables-inputs",   "value-requires",           "value-disables",
    "minimum",           "maximum",           "exclusive-minimum",        "exclusive-maximum",
    "min-list-entries",  "max-list-entries",  "list-separator",           "command-line-flag-separator",
    "uses-absolute-path"};

constexpr std::array kKnownInputKeys = {"id",           "value-key",     "type",
                                        "optional",     "default-value", "command-line-flag",
                                        "value-choices", "list"};

constexpr std::array kKnownTopLevel = {"name", "tool-version", "command-line", "inputs", "container-image",
                                       "output-files"};

template <std::size_t N>
bool contains(const std::array<const char*, N>& keys, std::string_view key) {
  return std::any_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; });
}

bool is_valid_id(std::string_view id) {
  return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  });
}

bool is_value_key(std::string_view key) {
  if (key.size() < 3 || key.front() != '[' || key.back() != ']') return false;
  return std::all_of(key.begin() + 1, key.end() - 1, [](char c) {
    return std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_';
  });
}

std::string string_field(const json& obj, const char* key, const std::string& where, bool required) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    if (required) throw SchemaError(where + key, where + key + " is required");
    return {};
  }
  if (!it->is_string()) throw SchemaError(where + key, where + key + " must be a string");
  return it->get<std::string>();
}

bool matches_kind(InputKind kind, const json& v) {
  switch (kind) {
    case InputKind::String:
    case InputKind::File:
      return v.is_string();
    case InputKind::Number:
      return v.is_number();
    case InputKind::Flag:
      return v.is_boolean();
  }
  return false;
}

InputKind parse_kind(const json& v, const std::string& where) {
  if (!v.is_string()) throw SchemaError(where + "type", where + "type must be a string");
  const auto s = v.get<std::string>();
  if (s == "String") return InputKind::String;
  if (s == "Number") return InputKind::Number;
  if (s == "Flag") return InputKind::Flag;
  if (s == "File") return InputKind::File;
  throw SchemaError(where + "type", where + "type \"" + s + "\" is not one of String, Number, Flag, File");
}

// Checks a value (possibly a list) against kind and choices without throwing
// ValidationError; returns an empty string when fine.
std::string describe_mismatch(const InputSpec& in, const json& v) {
  auto check_one = [&](const json& e) -> std::string {
    if (!matches_kind(in.kind, e)) return "type";
    if (in.value_choices && std::find(in.value_choices->begin(), in.value_choices->end(), e) == in.value_choices->end())
      return "choice";
    return {};
  };
  if (v.is_array()) {
    if (!in.is_list) return "type";
    for (const auto& e : v)
      if (auto r = check_one(e); !r.empty()) return r;
    return {};
  }
  return check_one(v);
}

InputSpec parse_input(const json& j, std::size_t index) {
  const std::string where = "inputs[" + std::to_string(index) + "].";
  if (!j.is_object()) throw SchemaError("inputs[" + std::to_string(index) + "]", "each input must be an object");
  for (const auto& [key, _] : j.items()) {
    if (contains(kUnsupportedInputKeys, key))
      throw UnsupportedFeature(key, where + key + " is not supported by this descriptor subset");
  }

  InputSpec in;
  in.id = string_field(j, "id", where, true);
  if (!is_valid_id(in.id)) throw SchemaError(where + "id", where + "id \"" + in.id + "\" must match [A-Za-z0-9_]+");
  in.value_key = string_field(j, "value-key", where, true);
  if (!is_value_key(in.value_key))
    throw SchemaError(where + "value-key", where + "value-key \"" + in.value_key + "\" must match \\[[A-Z0-9_]+\\]");
  if (!j.contains("type")) throw SchemaError(where + "type", where + "type is required");
  in.kind = parse_kind(j.at("type"), where);

  if (auto it = j.find("optional"); it != j.end() && !it->is_null()) {
    if (!it->is_boolean()) throw SchemaError(where + "optional", where + "optional must be a boolean");
    in.optional = it->get<bool>();
  }
  if (auto it = j.find("list"); it != j.end() && !it->is_null()) {
    if (!it->is_boolean()) throw SchemaError(where + "list", where + "list must be a boolean");
    in.is_list = it->get<bool>();
  }
  if (auto it = j.find("command-line-flag"); it != j.end() && !it->is_null()) {
    if (!it->is_string() || it->get<std::string>().empty())
      throw SchemaError(where + "command-line-flag", where + "command-line-flag must be a non-empty string");
    in.command_line_flag = it->get<std::string>();
  }
  if (auto it = j.find("value-choices"); it != j.end() && !it->is_null()) {
    if (!it->is_array() || it->empty())
      throw SchemaError(where + "value-choices", where + "value-choices must be a non-empty array");
    std::vector<json> choices;
    for (const auto& c : *it) {
      if (!matches_kind(in.kind, c) || c.is_array())
        throw SchemaError(where + "value-choices", where + "value-choices entries must match type " +
                                                       std::string(to_string(in.kind)));
      choices.push_back(c);
    }
    in.value_choices = std::move(choices);
  }
  if (auto it = j.find("default-value"); it != j.end() && !it->is_null()) in.default_value = *it;

  if (in.kind == InputKind::Flag) {
    if (in.value_choices) throw SchemaError(where + "value-choices", where + "Flag inputs cannot have value-choices");
    if (in.is_list) throw SchemaError(where + "list", where + "Flag inputs cannot be lists");
    if (in.default_value && *in.default_value != json(false))
      throw SchemaError(where + "default-value", where + "Flag default-value may only be false");
    if (!in.command_line_flag)
      throw SchemaError(where + "command-line-flag", where + "Flag inputs require a command-line-flag");
  }
  if (in.default_value) {
    const auto mismatch = describe_mismatch(in, *in.default_value);
    if (mismatch == "type")
      throw SchemaError(where + "default-value",
                        where + "default-value does not match type " + std::string(to_string(in.kind)));
    if (mismatch == "choice")
      throw SchemaError(where + "default-value", where + "default-value is not one of value-choices");
    if (in.is_list && !in.default_value->is_array()) in.default_value = json::array({*in.default_value});
  }

  for (const auto& [key, value] : j.items())
    if (!contains(kKnownInputKeys, key)) in.extras[key] = value;
  return in;
}

ContainerSpec parse_container(const json& j) {
  const std::string where = "container-image.";
  if (!j.is_object()) throw SchemaError("container-image", "container-image must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "type" && key != "image" && key != "binds")
      throw UnsupportedFeature(key, where + key + " is not supported by this descriptor subset");
  }
  ContainerSpec c;
  std::string type = string_field(j, "type", where, true);
  std::transform(type.begin(), type.end(), type.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (type == "docker")
    c.runtime = ContainerRuntime::Docker;
  else if (type == "singularity")
    c.runtime = ContainerRuntime::Singularity;
  else
    throw UnsupportedFeature("container-image.type", where + "type \"" + type + "\" is not docker or singularity");
  c.image = string_field(j, "image", where, true);
  if (c.image.empty()) throw SchemaError(where + "image", where + "image must be non-empty");
  if (auto it = j.find("binds"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw SchemaError(where + "binds", where + "binds must be an array");
    for (const auto& b : *it) {
      if (!b.is_string()) throw SchemaError(where + "binds", where + "binds entries must be \"host:container\"");
      const auto s = b.get<std::string>();
      const auto colon = s.find(':');
      BindMount m{s.substr(0, colon), colon == std::string::npos ? s : s.substr(colon + 1)};
      if (m.host_path.empty() || m.host_path.front() != '/' || m.container_path.empty() ||
          m.container_path.front() != '/')
        throw SchemaError(where + "binds", where + "bind mount \"" + s + "\" must use absolute paths");
      c.bind_mounts.push_back(std::move(m));
    }
  }
  return c;
}

OutputSpec parse_output(const json& j, std::size_t index) {
  const std::string where = "output-files[" + std::to_string(index) + "].";
  if (!j.is_object()) throw SchemaError("output-files[" + std::to_string(index) + "]", "outputs must be objects");
  if (j.contains("path-template-stripped-extensions"))
    throw UnsupportedFeature("path-template-stripped-extensions",
                             where + "path-template-stripped-extensions is not supported by this descriptor subset");
  OutputSpec o;
  o.id = string_field(j, "id", where, false);
  o.path_template = string_field(j, "path-template", where, true);
  return o;
}

void check_command_line_bindings(const ToolDescriptor& d) {
  std::map<std::string, int> uses;
  for (const auto& key : find_value_keys(d.command_line)) ++uses[key];
  std::set<std::string> seen;
  for (std::size_t i = 0; i < d.inputs.size(); ++i) {
    const auto& in = d.inputs[i];
    const std::string where = "inputs[" + std::to_string(i) + "]";
    if (!seen.insert(in.value_key).second)
      throw SchemaError(where + ".value-key", "duplicate value-key " + in.value_key);
    if (uses[in.value_key] > 1)
      throw SchemaError("command-line", in.value_key + " appears more than once in command-line");
  }
  for (const auto& [key, count] : uses) {
    if (!seen.count(key)) throw SchemaError("command-line", key + " unbound");
  }
}

std::string render_scalar(const json& v) {
  if (v.is_string()) return shell_quote(v.get_ref<const std::string&>());
  return shell_quote(v.dump());
}

// Collapses whitespace runs outside quotes and trims the ends.
std::string collapse_whitespace(std::string_view s) {
  std::string out;
  char quote = 0;
  bool pending_space = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (quote) {
      out += c;
      if (c == '\\' && quote == '"' && i + 1 < s.size()) {
        out += s[++i];
      } else if (c == quote) {
        quote = 0;
      }
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += c;
    if (c == '\\' && i + 1 < s.size()) {
      out += s[++i];
    } else if (c == '\'' || c == '"') {
      quote = c;
    }
  }
  return out;
}

}  // namespace

const char* to_string(InputKind kind) {
  switch (kind) {
    case InputKind::String:
      return "String";
    case InputKind::Number:
      return "Number";
    case InputKind::Flag:
      return "Flag";
    case InputKind::File:
      return "File";
  }
  return "?";
}

const InputSpec* ToolDescriptor::find_input(std::string_view id) const {
  for (const auto& in : inputs)
    if (in.id == id) return &in;
  return nullptr;
}

std::vector<std::string> ToolDescriptor::output_globs() const {
  std::vector<std::string> globs;
  for (const auto& o : outputs) globs.push_back(o.path_template);
  return globs;
}

std::vector<std::string> find_value_keys(std::string_view text) {
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '[') continue;
    const auto close = text.find(']', i + 1);
    if (close == std::string_view::npos) break;
    const auto candidate = text.substr(i, close - i + 1);
    if (is_value_key(candidate)) {
      keys.emplace_back(candidate);
      i = close;
    }
  }
  return keys;
}

ToolDescriptor parse_descriptor(std::string_view raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw SyntaxError(std::string("descriptor is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("", "descriptor must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (contains(kUnsupportedTopLevel, key))
      throw UnsupportedFeature(key, key + " is not supported by this descriptor subset");
  }

  ToolDescriptor d;
  d.name = string_field(j, "name", "", true);
  d.tool_version = string_field(j, "tool-version", "", false);
  d.command_line = string_field(j, "command-line", "", true);
  if (trim(d.command_line).empty()) throw SchemaError("command-line", "command-line must be non-empty");

  if (auto it = j.find("inputs"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw SchemaError("inputs", "inputs must be an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < it->size(); ++i) {
      auto in = parse_input((*it)[i], i);
      if (!ids.insert(in.id).second)
        throw SchemaError("inputs[" + std::to_string(i) + "].id", "duplicate input id \"" + in.id + "\"");
      d.inputs.push_back(std::move(in));
    }
  }
  if (auto it = j.find("container-image"); it != j.end() && !it->is_null()) d.container = parse_container(*it);
  if (auto it = j.find("output-files"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw SchemaError("output-files", "output-files must be an array");
    for (std::size_t i = 0; i < it->size(); ++i) d.outputs.push_back(parse_output((*it)[i], i));
  }
  for (const auto& [key, value] : j.items())
    if (!contains(kKnownTopLevel, key)) d.extras[key] = value;

  check_command_line_bindings(d);
  return d;
}

json descriptor_to_json(const ToolDescriptor& d) {
  json j = d.extras;
  j["name"] = d.name;
  j["tool-version"] = d.tool_version;
  j["command-line"] = d.command_line;
  json inputs = json::array();
  for (const auto& in : d.inputs) {
    json e = in.extras;
    e["id"] = in.id;
    e["value-key"] = in.value_key;
    e["type"] = to_string(in.kind);
    e["optional"] = in.optional;
    e["list"] = in.is_list;
    if (in.default_value) e["default-value"] = *in.default_value;
    if (in.command_line_flag) e["command-line-flag"] = *in.command_line_flag;
    if (in.value_choices) e["value-choices"] = *in.value_choices;
    inputs.push_back(std::move(e));
  }
  j["inputs"] = std::move(inputs);
  if (d.container) {
    json binds = json::array();
    for (const auto& b : d.container->bind_mounts) binds.push_back(b.host_path + ":" + b.container_path);
    j["container-image"] = {
        {"type", d.container->runtime == ContainerRuntime::Docker ? "docker" : "singularity"},
        {"image", d.container->image},
        {"binds", std::move(binds)},
    };
  }
  if (!d.outputs.empty()) {
    json outs = json::array();
    for (const auto& o : d.outputs) {
      json e{{"path-template", o.path_template}};
      if (!o.id.empty()) e["id"] = o.id;
      outs.push_back(std::move(e));
    }
    j["output-files"] = std::move(outs);
  }
  return j;
}

Invocation invocation_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("", "invocation must be a JSON object");
  Invocation inv;
  for (const auto& [key, value] : j.items()) inv.values.emplace(key, value);
  return inv;
}

Invocation parse_invocation(std::string_view raw) {
  try {
    return invocation_from_json(json::parse(raw));
  } catch (const json::parse_error& e) {
    throw SyntaxError(std::string("invocation is not valid JSON: ") + e.what());
  }
}

json invocation_to_json(const Invocation& inv) {
  json j = json::object();
  for (const auto& [key, value] : inv.values) j[key] = value;
  return j;
}

json validate_value(const InputSpec& input, const json& value) {
  const auto mismatch = describe_mismatch(input, value);
  if (mismatch == "type")
    throw ValidationError(ValidationKind::TypeMismatch, input.id,
                          "expected " + std::string(input.is_list ? "list of " : "") + to_string(input.kind) +
                              ", got " + value.dump());
  if (mismatch == "choice")
    throw ValidationError(ValidationKind::ChoiceViolation, input.id, value.dump() + " is not an allowed choice");
  if (input.is_list && !value.is_array()) return json::array({value});
  return value;
}

Invocation validate_invocation(const ToolDescriptor& d, const Invocation& inv) {
  for (const auto& [id, _] : inv.values)
    if (!d.find_input(id)) throw ValidationError(ValidationKind::UnknownInput, id);

  Invocation out;
  for (const auto& in : d.inputs) {
    auto it = inv.values.find(in.id);
    if (it != inv.values.end() && !it->second.is_null()) {
      out.values[in.id] = validate_value(in, it->second);
    } else if (in.default_value) {
      out.values[in.id] = *in.default_value;
    } else if (in.kind == InputKind::Flag) {
      out.values[in.id] = false;
    } else if (!in.optional) {
      throw ValidationError(ValidationKind::MissingRequired, in.id);
    }
  }
  return out;
}

std::string render_command(const ToolDescriptor& d, const Invocation& normalized) {
  std::map<std::string, std::string> replacement;
  for (const auto& in : d.inputs) {
    std::string text;
    auto it = normalized.values.find(in.id);
    if (it != normalized.values.end() && !it->second.is_null()) {
      const json& v = it->second;
      if (in.kind == InputKind::Flag) {
        if (v.is_boolean() && v.get<bool>() && in.command_line_flag) text = *in.command_line_flag;
      } else {
        std::string rendered;
        if (v.is_array()) {
          for (const auto& e : v) {
            if (!rendered.empty()) rendered += ' ';
            rendered += render_scalar(e);
          }
        } else {
          rendered = render_scalar(v);
        }
        if (!rendered.empty() || !v.is_array())
          text = in.command_line_flag ? *in.command_line_flag + " " + rendered : rendered;
      }
    }
    replacement[in.value_key] = std::move(text);
  }

  std::string out;
  const std::string_view tpl = d.command_line;
  for (std::size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] == '[') {
      const auto close = tpl.find(']', i + 1);
      if (close != std::string_view::npos) {
        const auto candidate = tpl.substr(i, close - i + 1);
        if (is_value_key(candidate)) {
          auto r = replacement.find(std::string(candidate));
          if (r == replacement.end()) throw UnresolvedKey(std::string(candidate));
          out += r->second;
          i = close;
          continue;
        }
      }
    }
    out += tpl[i];
  }
  return collapse_whitespace(out);
}

std::string containerize_command(const ContainerSpec& c, std::string_view cmd, std::string_view workdir) {
  std::string out;
  if (c.runtime == ContainerRuntime::Docker) {
    out = "docker run --rm";
    for (const auto& m : c.bind_mounts) out += " -v " + shell_quote(m.host_path + ":" + m.container_path);
    out += " -w " + shell_quote(workdir);
  } else {
    out = "singularity exec";
    for (const auto& m : c.bind_mounts) out += " -B " + shell_quote(m.host_path + ":" + m.container_path);
    out += " --pwd " + shell_quote(workdir);
  }
  out += " " + shell_quote(c.image) + " sh -c " + single_quote(cmd);
  return out;
}

}  // namespace clowdr
