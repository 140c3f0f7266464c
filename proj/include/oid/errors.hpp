#pragma once

#include <stdexcept>
#include <string>

namespace oid {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelError : Error { using Error::Error; };      // malformed network or inverter data
struct NumericalError : Error { using Error::Error; };  // linear-algebra breakdown
struct SolveError : Error { using Error::Error; };      // conic solve ended without a usable point
struct PartitionError : Error { using Error::Error; };  // cluster partition violates the tree rules
struct ProtocolError : Error { using Error::Error; };   // illegal agent-to-agent message
struct FormatError : Error { using Error::Error; };     // unreadable scenario / log file

// A matrix that was supposed to be numerically rank one is not.
struct RankError : Error {
  double ratio;  // second-to-first eigenvalue ratio that failed the check
  RankError(const std::string& what, double r) : Error(what), ratio(r) {}
};

}  // namespace oid
