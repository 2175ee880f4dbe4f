#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/driver.hpp"
#include "conceptlens/error.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace clens {

inline constexpr std::string_view kProtocolVersion = "conceptlens-driver/1";

enum class MessageKind { hello, run, result, error };

std::string_view kind_name(MessageKind kind);

struct HelloInfo {
  std::string protocol{kProtocolVersion};
  std::optional<ModelTopology> topology;  // present in the driver's reply
  std::optional<int> context_length;
  std::string driver;

  bool operator==(const HelloInfo&) const = default;
};

struct ErrorInfo {
  std::string code;
  std::string detail;

  bool operator==(const ErrorInfo&) const = default;
};

/// One protocol line. Only the payload matching `kind` is meaningful.
struct Message {
  MessageKind kind = MessageKind::hello;
  std::string id;
  HelloInfo hello;
  RunRequest run;
  RunResult result;
  ErrorInfo error;

  static Message make_hello(std::string id, HelloInfo info);
  static Message make_run(std::string id, RunRequest request);
  static Message make_result(std::string id, RunResult result);
  static Message make_error(std::string id, std::string code, std::string detail);
};

bool operator==(const Message& a, const Message& b);

/// Raised for lines that are not JSON objects ("malformed") or that break
/// the message schema ("schema"); `field` holds the offending path.
class ProtocolError : public Error {
 public:
  ProtocolError(std::string code, std::string field, const std::string& detail);
  const std::string& wire_code() const { return code_; }
  const std::string& field() const { return field_; }
  /// Wire detail: the field path followed by the reason.
  std::string wire_detail() const { return field_.empty() ? detail_ : field_ + ": " + detail_; }

 private:
  std::string code_;
  std::string field_;
  std::string detail_;
};

/// Single-line JSON, no trailing newline. Floats are written as their
/// shortest round-trip decimal.
std::string encode_message(const Message& message);

/// Unknown fields are ignored.
Message decode_message(std::string_view line);

}  // namespace clens
