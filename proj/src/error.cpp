#include "conceptlens/error.hpp"

namespace clens {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::parse: return "parse";
    case ErrorCode::unknown_label: return "unknown_label";
    case ErrorCode::duplicate_id: return "duplicate_id";
    case ErrorCode::empty_dataset: return "empty_dataset";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::length_mismatch: return "length_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::io: return "io";
    case ErrorCode::digest_mismatch: return "digest_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::topology_mismatch: return "topology_mismatch";
    case ErrorCode::missing_class: return "missing_class";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::insufficient_support: return "insufficient_support";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::vocabulary: return "vocabulary";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::driver: return "driver";
  }
  return "unknown";
}

}  // namespace clens
