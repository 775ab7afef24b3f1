#include "focusdpo/log.hpp"

#include <atomic>
#include <iostream>

namespace focusdpo::log {

namespace {
std::atomic<Level> g_level{Level::warn};
}

void set_level(Level l) { g_level.store(l); }
Level level() { return g_level.load(); }

void info(const std::string& message) {
    if (level() <= Level::info) std::clog << "[info] " << message << '\n';
}

void warn(const std::string& message) {
    if (level() <= Level::warn) std::clog << "[warn] " << message << '\n';
}

}  // namespace focusdpo::log
