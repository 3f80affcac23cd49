#include <gtest/gtest.h>

#include <random>
#include <regex>

#include "clowdr/descriptor.hpp"
#include "clowdr/errors.hpp"
#include "support.hpp"

using namespace clowdr;
using testsupport::shell_split;

namespace {

const char* kEcho = R"({"name": "echo", "tool-version": "1", "command-line": "echo [MSG]",
  "inputs": [{"id": "msg", "type": "String", "value-key": "[MSG]"}]})";

const char* kBidsApp = R"({
  "name": "ndmg", "tool-version": "0.0.5",
  "command-line": "app [BIDS_DIR] [OUTPUT_DIR] [LEVEL] [PARTICIPANT_LABEL]",
  "inputs": [
    {"id": "bids_dir", "type": "File", "value-key": "[BIDS_DIR]"},
    {"id": "output_dir", "type": "File", "value-key": "[OUTPUT_DIR]"},
    {"id": "analysis_level", "type": "String", "value-key": "[LEVEL]", "value-choices": ["participant", "group"]},
    {"id": "participant_label", "type": "String", "value-key": "[PARTICIPANT_LABEL]",
     "command-line-flag": "--participant_label", "list": true, "optional": true}
  ],
  "container-image": {"type": "docker", "image": "neurodata/m3r-release"},
  "custom": {"kept": [1, 2, 3]}
})";

ToolDescriptor with_inputs(const std::string& command_line, const std::string& inputs) {
  return parse_descriptor(R"({"name": "t", "tool-version": "1", "command-line": ")" + command_line +
                          R"(", "inputs": )" + inputs + "}");
}

template <class Fn>
ValidationKind kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no ValidationError thrown";
  return ValidationKind::UnknownInput;
}

}  // namespace

TEST(ParseDescriptor, MinimalEcho) {
  const auto d = parse_descriptor(kEcho);
  EXPECT_EQ(d.command_line, "echo [MSG]");
  ASSERT_EQ(d.inputs.size(), 1u);
  EXPECT_EQ(d.inputs[0].id, "msg");
  EXPECT_EQ(d.inputs[0].kind, InputKind::String);
}

TEST(ParseDescriptor, UnboundValueKeyNamesTheKey) {
  try {
    with_inputs("echo [GONE]", "[]");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("[GONE] unbound"), std::string::npos) << e.what();
  }
}

TEST(ParseDescriptor, BidsAppGivesTableColumns) {
  const auto d = parse_descriptor(kBidsApp);
  std::vector<std::string> ids;
  for (const auto& in : d.inputs) ids.push_back(in.id);
  EXPECT_EQ(ids, (std::vector<std::string>{"bids_dir", "output_dir", "analysis_level", "participant_label"}));
  EXPECT_TRUE(d.inputs[3].is_list);
  ASSERT_TRUE(d.container);
  EXPECT_EQ(d.container->image, "neurodata/m3r-release");
}

TEST(ParseDescriptor, RoundTripsIncludingUnknownKeys) {
  const auto d = parse_descriptor(kBidsApp);
  const auto again = parse_descriptor(descriptor_to_json(d).dump());
  EXPECT_EQ(d, again);
  EXPECT_EQ(descriptor_to_json(again)["custom"], json::parse(R"({"kept": [1, 2, 3]})"));
}

TEST(ParseDescriptor, SyntaxAndSchemaErrors) {
  EXPECT_THROW(parse_descriptor("{not json"), SyntaxError);
  EXPECT_THROW(parse_descriptor(R"({"name": "x"})"), SchemaError);
  // Duplicate value-key.
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "a", "type": "String", "value-key": "[X]"},
                                        {"id": "b", "type": "String", "value-key": "[X]"}])"),
               SchemaError);
  // Bad id pattern.
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "has space", "type": "String", "value-key": "[X]"}])"), SchemaError);
  // Default does not match kind.
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "a", "type": "Number", "value-key": "[X]", "default-value": "ten"}])"),
               SchemaError);
  // Default outside choices.
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "a", "type": "String", "value-key": "[X]",
                                        "value-choices": ["p", "g"], "default-value": "q"}])"),
               SchemaError);
  // Flag with a true default.
  EXPECT_THROW(with_inputs("a [V]", R"([{"id": "v", "type": "Flag", "value-key": "[V]",
                                        "command-line-flag": "-v", "default-value": true}])"),
               SchemaError);
}

TEST(ParseDescriptor, UnsupportedFeaturesFailLoudly) {
  EXPECT_THROW(parse_descriptor(R"({"name": "t", "tool-version": "1", "command-line": "a", "inputs": [],
                                    "groups": [{"id": "g", "members": []}]})"),
               UnsupportedFeature);
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "a", "type": "Number", "value-key": "[X]", "minimum": 0}])"),
               UnsupportedFeature);
  EXPECT_THROW(with_inputs("a [X] [Y]", R"([{"id": "a", "type": "String", "value-key": "[X]", "requires-inputs": ["b"]},
                                            {"id": "b", "type": "String", "value-key": "[Y]"}])"),
               UnsupportedFeature);
  EXPECT_THROW(with_inputs("a [X]", R"([{"id": "a", "type": "String", "value-key": "[X]", "list": true,
                                        "list-separator": ","}])"),
               UnsupportedFeature);
  EXPECT_THROW(parse_descriptor(R"({"name": "t", "tool-version": "1", "command-line": "a", "inputs": [],
                                    "container-image": {"type": "rkt", "image": "x"}})"),
               UnsupportedFeature);
}

TEST(ValidateInvocation, MissingRequired) {
  const auto d = parse_descriptor(kEcho);
  EXPECT_EQ(kind_of([&] { validate_invocation(d, {}); }), ValidationKind::MissingRequired);
}

TEST(ValidateInvocation, FlagDefaultsToFalse) {
  const auto d = with_inputs("a [V]", R"([{"id": "verbose", "type": "Flag", "value-key": "[V]",
                                          "command-line-flag": "-v", "optional": true, "default-value": false}])");
  const auto n = validate_invocation(d, {});
  EXPECT_EQ(n.values.at("verbose"), json(false));
}

TEST(ValidateInvocation, ChoicesTypesAndUnknownInputs) {
  const auto d = parse_descriptor(kBidsApp);
  Invocation ok{{{"bids_dir", "/data"}, {"output_dir", "/out"}, {"analysis_level", "participant"}}};
  EXPECT_NO_THROW(validate_invocation(d, ok));

  auto bad_choice = ok;
  bad_choice.values["analysis_level"] = "session";
  EXPECT_EQ(kind_of([&] { validate_invocation(d, bad_choice); }), ValidationKind::ChoiceViolation);

  auto bad_type = ok;
  bad_type.values["bids_dir"] = 3;
  EXPECT_EQ(kind_of([&] { validate_invocation(d, bad_type); }), ValidationKind::TypeMismatch);

  auto unknown = ok;
  unknown.values["colour"] = "red";
  EXPECT_EQ(kind_of([&] { validate_invocation(d, unknown); }), ValidationKind::UnknownInput);

  auto list_of_wrong = ok;
  list_of_wrong.values["participant_label"] = json::array({"100206", 7});
  EXPECT_EQ(kind_of([&] { validate_invocation(d, list_of_wrong); }), ValidationKind::TypeMismatch);
}

TEST(ValidateInvocation, IsIdempotent) {
  const auto d = parse_descriptor(kBidsApp);
  Invocation inv{{{"bids_dir", "/data"}, {"output_dir", "/out"}, {"analysis_level", "group"},
                  {"participant_label", "100206"}}};
  const auto once = validate_invocation(d, inv);
  EXPECT_EQ(once.values.at("participant_label"), json::array({"100206"}));
  EXPECT_EQ(validate_invocation(d, once), once);
}

TEST(RenderCommand, DirectSubstitution) {
  const auto d = parse_descriptor(kEcho);
  EXPECT_EQ(render_command(d, validate_invocation(d, Invocation{{{"msg", "hello"}}})), "echo hello");
}

TEST(RenderCommand, FlagsPresentOnlyWhenTrue) {
  const auto d = with_inputs("tool [V] end", R"([{"id": "v", "type": "Flag", "value-key": "[V]",
                                                "command-line-flag": "-v", "optional": true}])");
  EXPECT_EQ(render_command(d, validate_invocation(d, Invocation{{{"v", true}}})), "tool -v end");
  EXPECT_EQ(render_command(d, validate_invocation(d, Invocation{{{"v", false}}})), "tool end");
  EXPECT_EQ(render_command(d, validate_invocation(d, {})), "tool end");
}

TEST(RenderCommand, BidsAppRowZero) {
  const auto d = parse_descriptor(kBidsApp);
  Invocation inv{{{"bids_dir", "/data/hcp1200_mir"}, {"output_dir", "/data/hcp1200_mir"},
                  {"analysis_level", "participant"}, {"participant_label", json::array({"100206"})}}};
  EXPECT_EQ(render_command(d, validate_invocation(d, inv)),
            "app /data/hcp1200_mir /data/hcp1200_mir participant --participant_label 100206");
}

TEST(RenderCommand, ListsAreSpaceJoinedAndNumbersVerbatim) {
  const auto d = with_inputs("t [XS] [N]", R"([{"id": "xs", "type": "String", "value-key": "[XS]", "list": true},
                                             {"id": "n", "type": "Number", "value-key": "[N]"}])");
  const auto cmd = render_command(d, validate_invocation(d, Invocation{{{"xs", {"a", "b c"}}, {"n", 2.5}}}));
  EXPECT_EQ(shell_split(cmd), (std::vector<std::string>{"t", "a", "b c", "2.5"}));
}

TEST(RenderCommand, QuotedValuesSplitBackIntoIntendedArguments) {
  const auto d = with_inputs("prog [A] [B]", R"([{"id": "a", "type": "String", "value-key": "[A]",
                                                "command-line-flag": "--a"},
                                               {"id": "b", "type": "String", "value-key": "[B]"}])");
  std::mt19937 rng(11);
  const std::string alphabet = "xy Z '\"\\$*;\t";
  std::uniform_int_distribution<std::size_t> len(1, 8), ch(0, alphabet.size() - 1);
  const std::regex leftover(R"(\[[A-Z0-9_]+\])");
  for (int i = 0; i < 300; ++i) {
    std::string a, b;
    for (std::size_t n = len(rng); n > 0; --n) a += alphabet[ch(rng)];
    for (std::size_t n = len(rng); n > 0; --n) b += alphabet[ch(rng)];
    const auto inv = validate_invocation(d, Invocation{{{"a", a}, {"b", b}}});
    const auto cmd = render_command(d, inv);
    EXPECT_EQ(cmd, render_command(d, inv));
    EXPECT_FALSE(std::regex_search(cmd, leftover)) << cmd;
    EXPECT_EQ(shell_split(cmd), (std::vector<std::string>{"prog", "--a", a, b})) << cmd;
  }
}

TEST(RenderCommand, CollapsesWhitespaceFromAbsentInputs) {
  const auto d = with_inputs("a   [X]   [Y]  b", R"([{"id": "x", "type": "String", "value-key": "[X]", "optional": true},
                                                   {"id": "y", "type": "String", "value-key": "[Y]", "optional": true}])");
  EXPECT_EQ(render_command(d, validate_invocation(d, {})), "a b");
}

TEST(Containerize, DockerExactForm) {
  ContainerSpec c{ContainerRuntime::Docker, "busybox", {}};
  EXPECT_EQ(containerize_command(c, "echo hi", "/w"), "docker run --rm -w /w busybox sh -c 'echo hi'");
}

TEST(Containerize, SingularityBindsInOrder) {
  ContainerSpec c{ContainerRuntime::Singularity, "tool.sif", {{"/data", "/data"}, {"/scratch", "/tmp"}}};
  const auto out = containerize_command(c, "ls", "/w");
  EXPECT_NE(out.find("-B /data:/data"), std::string::npos);
  EXPECT_LT(out.find("/data:/data"), out.find("/scratch:/tmp"));
  EXPECT_EQ(out.rfind("singularity exec", 0), 0u);
  EXPECT_NE(out.find("--pwd /w"), std::string::npos);
}

TEST(Containerize, ImageReferenceAndSplittability) {
  ContainerSpec c{ContainerRuntime::Docker, "neurodata/m3r-release", {{"/data", "/data"}}};
  EXPECT_NE(containerize_command(c, "true", "/w").find("neurodata/m3r-release"), std::string::npos);
  const auto words = shell_split(containerize_command(c, "true", "/w"));
  EXPECT_EQ(words.back(), "true");
  EXPECT_EQ(words[words.size() - 2], "-c");
  const auto tricky = shell_split(containerize_command(c, "echo 'it''s' \"$X\"", "/w"));
  EXPECT_EQ(tricky.back(), "echo 'it''s' \"$X\"");
}

TEST(FindValueKeys, InOrder) {
  EXPECT_EQ(find_value_keys("a [X] b [Y_2] [x] [Z]"), (std::vector<std::string>{"[X]", "[Y_2]", "[Z]"}));
}
