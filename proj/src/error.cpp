#include "rpp/error.hpp"

namespace rpp {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kAssertion: return "assertion failed";
    case ErrorKind::kTraining: return "training error";
    case ErrorKind::kInternal: return "internal error";
  }
  return "unknown error";
}

}  // namespace rpp
