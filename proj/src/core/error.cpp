#include "camelu/error.hpp"

namespace camelu {

std::string_view error_kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::index: return "index";
    case ErrorKind::contract: return "contract";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::lookup: return "lookup";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::fit: return "fit";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace camelu
