#pragma once

#include "conceptlens/driver.hpp"
#include "conceptlens/protocol.hpp"

#include <deque>
#include <iosfwd>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <sys/types.h>

namespace clens {

/// Line-oriented duplex channel. Lines never contain the newline.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(const std::string& line) = 0;
  /// std::nullopt once the peer has gone away.
  virtual std::optional<std::string> receive() = 0;
  /// Human-readable reason for the last failure, for error messages.
  virtual std::string loss_reason() { return "stream closed"; }
};

/// Runs `command` through /bin/sh with its stdin and stdout connected to a
/// socket pair.
class ChildProcessTransport final : public Transport {
 public:
  explicit ChildProcessTransport(const std::string& command);
  ~ChildProcessTransport() override;
  ChildProcessTransport(const ChildProcessTransport&) = delete;
  ChildProcessTransport& operator=(const ChildProcessTransport&) = delete;

  void send(const std::string& line) override;
  std::optional<std::string> receive() override;
  std::string loss_reason() override;

 private:
  void reap(bool block);

  int fd_ = -1;
  pid_t pid_ = -1;
  std::optional<int> exit_status_;
  std::string buffer_;
  std::string failure_;
};

class DriverServer;

/// In-process transport wired straight to a server. With `reverse_order`
/// pending replies are delivered newest first, which exercises id-based
/// reassembly.
class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(Driver& backend, bool reverse_order = false);
  ~LoopbackTransport() override;

  void send(const std::string& line) override;
  std::optional<std::string> receive() override;

  /// Every line the client sent and the server produced, in order.
  const std::vector<std::string>& transcript() const { return transcript_; }

 private:
  std::unique_ptr<DriverServer> server_;
  bool reverse_;
  std::deque<std::string> pending_;
  std::vector<std::string> transcript_;
};

/// Answers protocol lines with a backend driver.
class DriverServer {
 public:
  explicit DriverServer(Driver& backend);

  /// Reply line for one incoming line (exactly one per line).
  std::string handle(const std::string& line);

 private:
  Driver& backend_;
  bool greeted_ = false;
  std::set<std::string> seen_ids_;
};

/// Serves until `in` reaches end of stream. Flushes after every reply.
void serve_stream(Driver& backend, std::istream& in, std::ostream& out);

/// Client side of a session. The constructor performs the hello exchange.
/// Requests inside a batch are pipelined up to `window` at a time and
/// matched to replies by id; a transport failure marks the session dead.
class ProtocolDriver final : public Driver {
 public:
  explicit ProtocolDriver(std::unique_ptr<Transport> transport, int window = 8);

  const ModelTopology& topology() const override { return *hello_.topology; }
  std::optional<int> context_length() const override { return hello_.context_length; }
  /// The name the driver announced in its hello.
  std::string description() const override { return hello_.driver; }
  RunResult run(const RunRequest& request) override;
  std::vector<RunResult> run_batch(std::span<const RunRequest> requests) override;

  const HelloInfo& hello() const { return hello_; }
  bool dead() const { return dead_; }

 private:
  std::string next_id();
  Message receive_message();
  void check_coordinates(const RunRequest& request) const;
  void check_result(const RunRequest& request, const RunResult& result) const;

  std::unique_ptr<Transport> transport_;
  int window_;
  HelloInfo hello_;
  std::uint64_t counter_ = 0;
  bool dead_ = false;
};

}  // namespace clens
