#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace clowdr {

// Broad error classes; each maps onto one CLI exit status.
enum class ErrorCategory {
  Usage,     // 2
  Schema,    // 3: descriptor, invocation, template and expansion problems
  Dispatch,  // 4
  Io,        // 5
  Internal,
};

int exit_code_for(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

// Malformed JSON (or an unparseable timestamp inside otherwise valid JSON).
class SyntaxError : public Error {
 public:
  explicit SyntaxError(const std::string& what) : Error(ErrorCategory::Schema, what) {}
};

// Structurally invalid descriptor; the message names the offending field.
class SchemaError : public Error {
 public:
  SchemaError(std::string field, const std::string& what)
      : Error(ErrorCategory::Schema, what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Descriptor uses a Boutiques feature outside the implemented subset.
class UnsupportedFeature : public Error {
 public:
  UnsupportedFeature(std::string feature, const std::string& what)
      : Error(ErrorCategory::Schema, what), feature_(std::move(feature)) {}
  const std::string& feature() const noexcept { return feature_; }

 private:
  std::string feature_;
};

enum class ValidationKind {
  MissingRequired,
  TypeMismatch,
  ChoiceViolation,
  UnknownInput,
  InvalidSweep,
};

const char* to_string(ValidationKind kind);

class ValidationError : public Error {
 public:
  ValidationError(ValidationKind kind, std::string input_id, std::string detail = {},
                  std::optional<std::size_t> index = std::nullopt);

  ValidationKind kind() const noexcept { return kind_; }
  const std::string& input_id() const noexcept { return input_id_; }
  // Position of the offending invocation when expanding a list.
  std::optional<std::size_t> index() const noexcept { return index_; }

  ValidationError at_index(std::size_t index) const;

 private:
  ValidationKind kind_;
  std::string input_id_;
  std::string detail_;
  std::optional<std::size_t> index_;
};

// A value-key survived rendering. Indicates a bug, not bad input.
class UnresolvedKey : public Error {
 public:
  explicit UnresolvedKey(const std::string& key)
      : Error(ErrorCategory::Internal, key + " unresolved after rendering") {}
};

class NotABidsDir : public Error {
 public:
  explicit NotABidsDir(const std::string& path)
      : Error(ErrorCategory::Schema, "not a BIDS dataset (no sub-* directories): " + path) {}
};

class UnknownParticipant : public Error {
 public:
  explicit UnknownParticipant(const std::string& label)
      : Error(ErrorCategory::Schema, "participant not present in dataset: " + label) {}
};

class UnknownSession : public Error {
 public:
  explicit UnknownSession(const std::string& label)
      : Error(ErrorCategory::Schema, "session not present for any participant: " + label) {}
};

class TemplateError : public Error {
 public:
  explicit TemplateError(const std::string& what) : Error(ErrorCategory::Schema, what) {}
};

class OutputDirError : public Error {
 public:
  explicit OutputDirError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

class ProcessGone : public Error {
 public:
  explicit ProcessGone(int pid)
      : Error(ErrorCategory::Internal, "process " + std::to_string(pid) + " is gone") {}
};

class AlreadyFinalized : public Error {
 public:
  explicit AlreadyFinalized(const std::string& task_id)
      : Error(ErrorCategory::Internal, "record for " + task_id + " is already finalized") {}
};

class NotAnExperimentDir : public Error {
 public:
  explicit NotAnExperimentDir(const std::string& path)
      : Error(ErrorCategory::Io, "not an experiment directory (no experiment.json): " + path) {}
};

class StageError : public Error {
 public:
  StageError(const std::string& task_id, const std::string& reason)
      : Error(ErrorCategory::Dispatch, "staging " + task_id + ": " + reason) {}
};

class LockHeld : public Error {
 public:
  explicit LockHeld(const std::string& holder)
      : Error(ErrorCategory::Dispatch, "experiment directory is locked by " + holder) {}
};

class PortInUse : public Error {
 public:
  explicit PortInUse(int port)
      : Error(ErrorCategory::Dispatch, "port " + std::to_string(port) + " is already in use") {}
};

class UnknownField : public Error {
 public:
  explicit UnknownField(std::string field)
      : Error(ErrorCategory::Usage, "unknown field: " + field), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class BadOperator : public Error {
 public:
  explicit BadOperator(std::string op)
      : Error(ErrorCategory::Usage, "bad operator: " + op), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace clowdr
