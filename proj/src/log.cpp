#include "clowdr/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace clowdr::log {

namespace {
std::atomic<Level> g_level{Level::Normal};
std::mutex g_mutex;

void emit(std::string_view prefix, std::string_view msg) {
  std::lock_guard lock(g_mutex);
  std::cerr << prefix << msg << '\n';
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void warn(std::string_view msg) {
  if (g_level != Level::Quiet) emit("warning: ", msg);
}

void info(std::string_view msg) {
  if (g_level != Level::Quiet) emit("", msg);
}

void debug(std::string_view msg) {
  if (g_level == Level::Debug) emit("debug: ", msg);
}

}  // namespace clowdr::log
