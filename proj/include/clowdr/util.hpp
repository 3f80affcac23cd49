#pragma once

#include <sys/types.h>

#include <chrono>
#include <filesystem>
#include <string>
#include <string_view>

namespace clowdr {

namespace fs = std::filesystem;

using Clock = std::chrono::system_clock;
using Timestamp = Clock::time_point;

inline constexpr const char* kWrapperVersion = "0.1.0";

// RFC 3339 UTC with microsecond precision, e.g. 2026-10-15T08:30:00.250000Z.
std::string format_timestamp(Timestamp t);
Timestamp parse_timestamp(std::string_view text);

// Current time at the microsecond precision timestamps are stored with, so
// in-memory values compare equal to what a round trip through JSON yields.
Timestamp now_us();

double seconds_between(Timestamp from, Timestamp to);

// Quotes only when the text contains characters outside [A-Za-z0-9@%+=:,./_-].
std::string shell_quote(std::string_view text);
// Always wraps in single quotes, escaping embedded quotes as '\''.
std::string single_quote(std::string_view text);

std::string read_file(const fs::path& path);
// Writes to a sibling temporary file and renames it over `path`, so readers
// only ever see the previous or the new contents.
void write_file_atomic(const fs::path& path, std::string_view contents);

std::string sha256_hex(std::string_view bytes);

std::string local_hostname();
bool process_alive(pid_t pid);

std::string trim(std::string_view text);

}  // namespace clowdr
