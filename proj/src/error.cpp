// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/error.hpp"

namespace mlaforge {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::usage: return "usage";
    case ErrorCode::invalid_config: return "invalid_config";
    case ErrorCode::rank_bounds: return "rank_bounds";
    case ErrorCode::shape: return "shape";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::bad_version: return "bad_version";
    case ErrorCode::manifest_mismatch: return "manifest_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::schema: return "schema";
    case ErrorCode::io: return "io";
    case ErrorCode::variant_mismatch: return "variant_mismatch";
    case ErrorCode::corpus_mismatch: return "corpus_mismatch";
    case ErrorCode::verification_failed: return "verification_failed";
    case ErrorCode::non_convergence: return "non_convergence";
  }
  return "unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::usage:
    case ErrorCode::invalid_config:
    case ErrorCode::rank_bounds:
      return 2;
    case ErrorCode::verification_failed:
      return 4;
    case ErrorCode::non_convergence:
      return 5;
    default:
      return 3;
  }
}

}  // namespace mlaforge
