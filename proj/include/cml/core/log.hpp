#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <string_view>

namespace cml::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

struct Sink {
  Level min_level = Level::info;
  std::function<void(Level, std::string_view)> write = [](Level lvl, std::string_view msg) {
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::clog << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
  };
};

inline Sink& sink() {
  static Sink s;
  return s;
}

inline void emit(Level lvl, std::string_view msg) {
  auto& s = sink();
  if (lvl >= s.min_level && s.write) s.write(lvl, msg);
}

inline void debug(std::string_view msg) { emit(Level::debug, msg); }
inline void info(std::string_view msg) { emit(Level::info, msg); }
inline void warn(std::string_view msg) { emit(Level::warn, msg); }
inline void error(std::string_view msg) { emit(Level::error, msg); }

}  // namespace cml::log
