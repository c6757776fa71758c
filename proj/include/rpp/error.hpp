#pragma once

#include <stdexcept>
#include <string>

namespace rpp {

// Mirrors rpp_status in rpp.h; the C API maps one onto the other.
enum class ErrorKind {
  kUsage = 1,
  kConfig = 2,
  kDimension = 3,
  kDomain = 4,
  kNumeric = 5,
  kInput = 6,
  kIo = 7,
  kAssertion = 8,
  kTraining = 9,
  kInternal = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

const char* to_string(ErrorKind kind) noexcept;

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace rpp
