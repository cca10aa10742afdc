// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mlaforge {

enum class ErrorCode {
  usage,
  invalid_config,
  rank_bounds,
  shape,
  bad_magic,
  bad_version,
  manifest_mismatch,
  truncated,
  schema,
  io,
  variant_mismatch,
  corpus_mismatch,
  verification_failed,
  non_convergence,
};

const char* to_string(ErrorCode code);

// Process exit status for a failure of the given kind:
// 2 usage, 3 format, 4 verification, 5 numeric non-convergence.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mlaforge
