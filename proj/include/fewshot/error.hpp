#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

/// Error categories raised by the library. Each maps onto one process exit
/// code through exit_code().
enum class Errc {
  invalid_argument,
  shape_mismatch,
  domain_error,      // e.g. log of a nonpositive value, zero-norm row
  autograd,          // non-scalar loss, double backward, missing grad
  non_finite,        // NaN/Inf produced or supplied
  config,            // malformed or unknown configuration key
  io,                // unreadable/unwritable path
  bad_magic,
  bad_version,       // dataset version
  truncated,
  label_out_of_range,
  checksum,
  incompatible,      // architecture or checkpoint version mismatch
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// 0 success, 2 usage/config, 3 I/O and dataset format, 4 numerical failure,
/// 5 compatibility.
int exit_code(Errc code) noexcept;

const char* errc_name(Errc code) noexcept;

}  // namespace fewshot
