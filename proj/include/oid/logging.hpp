#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace oid::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

// Verbosity comes from the OID_LOG environment variable: error|info|debug.
inline Level threshold() noexcept {
  static Level lv = [] {
    const char* e = std::getenv("OID_LOG");
    if (!e) return Level::Error;
    if (std::strcmp(e, "debug") == 0) return Level::Debug;
    if (std::strcmp(e, "info") == 0) return Level::Info;
    return Level::Error;
  }();
  return lv;
}

inline void write(Level lv, const std::string& msg) {
  if (lv > threshold()) return;
  const char* tag = lv == Level::Error ? "error" : (lv == Level::Info ? "info" : "debug");
  std::fprintf(stderr, "[oid:%s] %s\n", tag, msg.c_str());
}

inline void info(const std::string& msg) { write(Level::Info, msg); }
inline void debug(const std::string& msg) { write(Level::Debug, msg); }
inline void error(const std::string& msg) { write(Level::Error, msg); }

}  // namespace oid::log
