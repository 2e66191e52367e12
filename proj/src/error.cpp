#include "fewshot/error.hpp"

namespace fewshot {

int exit_code(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument:
    case Errc::shape_mismatch:
    case Errc::domain_error:
    case Errc::autograd:
    case Errc::config:
      return 2;
    case Errc::io:
    case Errc::bad_magic:
    case Errc::bad_version:
    case Errc::truncated:
    case Errc::label_out_of_range:
    case Errc::checksum:
      return 3;
    case Errc::non_finite:
      return 4;
    case Errc::incompatible:
      return 5;
  }
  return 1;
}

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::domain_error: return "domain_error";
    case Errc::autograd: return "autograd";
    case Errc::non_finite: return "non_finite";
    case Errc::config: return "config";
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::bad_version: return "bad_version";
    case Errc::truncated: return "truncated";
    case Errc::label_out_of_range: return "label_out_of_range";
    case Errc::checksum: return "checksum";
    case Errc::incompatible: return "incompatible";
  }
  return "unknown";
}

}  // namespace fewshot
