#pragma once

#include <string_view>

// Human-facing diagnostics. Everything goes to stderr; stdout is reserved
// for machine output.
namespace clowdr::log {

enum class Level { Quiet, Normal, Debug };

void set_level(Level level);
Level level();

void warn(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace clowdr::log
