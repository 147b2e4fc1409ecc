#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace flowdpt {

enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3, quiet = 4 };

inline std::atomic<LogLevel>& log_threshold() {
  static std::atomic<LogLevel> level{LogLevel::info};
  return level;
}

inline void set_log_level(LogLevel level) { log_threshold().store(level); }

inline void log(LogLevel level, std::string_view msg) {
  if (level < log_threshold().load()) return;
  static std::mutex mu;
  static constexpr const char* kTags[] = {"debug", "info", "warning", "error"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[" << kTags[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_info(std::string_view msg) { log(LogLevel::info, msg); }
inline void log_warning(std::string_view msg) { log(LogLevel::warning, msg); }
inline void log_error(std::string_view msg) { log(LogLevel::error, msg); }

}  // namespace flowdpt
