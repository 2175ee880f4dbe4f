#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clens {

enum class ErrorCode {
  parse,
  unknown_label,
  duplicate_id,
  empty_dataset,
  invalid_argument,
  length_mismatch,
  non_finite,
  io,
  digest_mismatch,
  truncated,
  topology_mismatch,
  missing_class,
  out_of_range,
  insufficient_support,
  degenerate,
  vocabulary,
  divergence,
  protocol,
  driver,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace clens
