#include "clowdr/util.hpp"

#include <openssl/evp.h>
#include <signal.h>
#include <unistd.h>

#include <atomic>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "clowdr/errors.hpp"

namespace clowdr {

int exit_code_for(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::Usage:
      return 2;
    case ErrorCategory::Schema:
      return 3;
    case ErrorCategory::Dispatch:
      return 4;
    case ErrorCategory::Io:
      return 5;
    case ErrorCategory::Internal:
      return 70;
  }
  return 70;
}

const char* to_string(ValidationKind kind) {
  switch (kind) {
    case ValidationKind::MissingRequired:
      return "MissingRequired";
    case ValidationKind::TypeMismatch:
      return "TypeMismatch";
    case ValidationKind::ChoiceViolation:
      return "ChoiceViolation";
    case ValidationKind::UnknownInput:
      return "UnknownInput";
    case ValidationKind::InvalidSweep:
      return "InvalidSweep";
  }
  return "?";
}

namespace {

std::string validation_message(ValidationKind kind, const std::string& id, const std::string& detail,
                               std::optional<std::size_t> index) {
  std::string msg;
  if (index) msg = "invocation " + std::to_string(*index) + ": ";
  msg += std::string(to_string(kind)) + "(\"" + id + "\")";
  if (!detail.empty()) msg += ": " + detail;
  return msg;
}

}  // namespace

ValidationError::ValidationError(ValidationKind kind, std::string input_id, std::string detail,
                                 std::optional<std::size_t> index)
    : Error(ErrorCategory::Schema, validation_message(kind, input_id, detail, index)),
      kind_(kind),
      input_id_(std::move(input_id)),
      detail_(std::move(detail)),
      index_(index) {}

ValidationError ValidationError::at_index(std::size_t index) const {
  return ValidationError(kind_, input_id_, detail_, index);
}

std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  auto us = duration_cast<microseconds>(t.time_since_epoch()).count();
  auto secs = static_cast<std::time_t>(us / 1'000'000);
  auto frac = us % 1'000'000;
  if (frac < 0) {
    frac += 1'000'000;
    --secs;
  }
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%06ldZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<long>(frac));
  return buf;
}

Timestamp parse_timestamp(std::string_view text) {
  std::string s(text);
  std::tm tm{};
  int consumed = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour,
                  &tm.tm_min, &tm.tm_sec, &consumed) != 6) {
    throw SyntaxError("bad timestamp: " + s);
  }
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  long long micros = 0;
  std::size_t pos = static_cast<std::size_t>(consumed);
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      if (digits < 6) {
        micros = micros * 10 + (s[pos] - '0');
        ++digits;
      }
      ++pos;
    }
    while (digits++ < 6) micros *= 10;
  }
  if (pos >= s.size() || (s[pos] != 'Z' && s[pos] != 'z')) throw SyntaxError("timestamp is not UTC: " + s);
  const std::time_t secs = timegm(&tm);
  return Timestamp(std::chrono::seconds(secs)) + std::chrono::microseconds(micros);
}

Timestamp now_us() { return std::chrono::floor<std::chrono::microseconds>(Clock::now()); }

double seconds_between(Timestamp from, Timestamp to) {
  return std::chrono::duration<double>(to - from).count();
}

std::string shell_quote(std::string_view text) {
  if (text.empty()) return "''";
  for (char c : text) {
    const bool safe = std::isalnum(static_cast<unsigned char>(c)) || std::strchr("@%+=:,./_-", c) != nullptr;
    if (!safe) return single_quote(text);
  }
  return std::string(text);
}

std::string single_quote(std::string_view text) {
  std::string out = "'";
  for (char c : text) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += '\'';
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string() + ": " + std::strerror(errno));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  static std::atomic<unsigned> counter{0};
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string() + ": " + std::strerror(errno));
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string local_hostname() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof buf - 1) != 0) return "unknown";
  return buf;
}

bool process_alive(pid_t pid) {
  if (pid <= 0) return false;
  return ::kill(pid, 0) == 0 || errno == EPERM;
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

}  // namespace clowdr
