#pragma once

#include <string>

namespace focusdpo::log {

enum class Level { debug = 0, info = 1, warn = 2, silent = 3 };

void set_level(Level level);
Level level();

void info(const std::string& message);
void warn(const std::string& message);

}  // namespace focusdpo::log
