#include "fprb/errors.hpp"

namespace fprb {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::internal: return "internal";
  }
  return "internal";
}

}  // namespace fprb
