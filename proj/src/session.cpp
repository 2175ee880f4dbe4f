#include "conceptlens/session.hpp"

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <thread>

#include <nlohmann/json.hpp>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

namespace clens {

// --- child process ---

ChildProcessTransport::ChildProcessTransport(const std::string& command) {
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
    throw Error(ErrorCode::driver, std::string("socketpair failed: ") + std::strerror(errno));
  pid_ = ::fork();
  if (pid_ < 0) {
    const int err = errno;
    ::close(sv[0]);
    ::close(sv[1]);
    throw Error(ErrorCode::driver, std::string("fork failed: ") + std::strerror(err));
  }
  if (pid_ == 0) {
    ::dup2(sv[1], STDIN_FILENO);
    ::dup2(sv[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(sv[1]);
  fd_ = sv[0];
}

ChildProcessTransport::~ChildProcessTransport() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
  }
  if (pid_ <= 0 || exit_status_) return;
  for (int i = 0; i < 200 && !exit_status_; ++i) {
    reap(false);
    if (!exit_status_) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (!exit_status_) {
    ::kill(pid_, SIGKILL);
    reap(true);
  }
}

void ChildProcessTransport::reap(bool block) {
  if (pid_ <= 0 || exit_status_) return;
  int status = 0;
  pid_t r;
  do {
    r = ::waitpid(pid_, &status, block ? 0 : WNOHANG);
  } while (r < 0 && errno == EINTR);
  if (r == pid_) exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
}

void ChildProcessTransport::send(const std::string& line) {
  const std::string framed = line + '\n';
  std::size_t sent = 0;
  while (sent < framed.size()) {
    const ssize_t n = ::send(fd_, framed.data() + sent, framed.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::io, std::string("write to driver failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> ChildProcessTransport::receive() {
  char chunk[65536];
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0) failure_ = std::strerror(errno);
    if (n <= 0) return std::nullopt;
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

std::string ChildProcessTransport::loss_reason() {
  for (int i = 0; i < 100 && !exit_status_; ++i) {
    reap(false);
    if (!exit_status_) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  std::string reason = exit_status_ ? "driver exited with status " + std::to_string(*exit_status_)
                                    : std::string("driver closed its output");
  if (!failure_.empty()) reason += " (" + failure_ + ")";
  return reason;
}

// --- loopback ---

LoopbackTransport::LoopbackTransport(Driver& backend, bool reverse_order)
    : server_(std::make_unique<DriverServer>(backend)), reverse_(reverse_order) {}

LoopbackTransport::~LoopbackTransport() = default;

void LoopbackTransport::send(const std::string& line) {
  transcript_.push_back(line);
  pending_.push_back(server_->handle(line));
  transcript_.push_back(pending_.back());
}

std::optional<std::string> LoopbackTransport::receive() {
  if (pending_.empty()) return std::nullopt;
  std::string line;
  if (reverse_) {
    line = std::move(pending_.back());
    pending_.pop_back();
  } else {
    line = std::move(pending_.front());
    pending_.pop_front();
  }
  return line;
}

// --- server ---

DriverServer::DriverServer(Driver& backend) : backend_(backend) {}

namespace {

// Best-effort id of a line that failed to decode, so the client can still
// correlate the error.
std::string salvage_id(const std::string& line) {
  const auto doc = nlohmann::json::parse(line, nullptr, false);
  if (doc.is_object()) {
    const auto it = doc.find("id");
    if (it != doc.end() && it->is_string()) return it->get<std::string>();
  }
  return {};
}

}  // namespace

std::string DriverServer::handle(const std::string& line) {
  Message in;
  try {
    in = decode_message(line);
  } catch (const ProtocolError& e) {
    return encode_message(Message::make_error(salvage_id(line), e.wire_code(), e.wire_detail()));
  }
  switch (in.kind) {
    case MessageKind::hello: {
      if (in.hello.protocol != kProtocolVersion)
        return encode_message(Message::make_error(in.id, "unsupported_protocol",
                                                  "driver speaks " + std::string(kProtocolVersion)));
      greeted_ = true;
      HelloInfo info;
      info.topology = backend_.topology();
      info.context_length = backend_.context_length();
      info.driver = backend_.description();
      return encode_message(Message::make_hello(in.id, std::move(info)));
    }
    case MessageKind::run: {
      if (!greeted_) return encode_message(Message::make_error(in.id, "no_hello", "run received before hello"));
      if (!seen_ids_.insert(in.id).second)
        return encode_message(Message::make_error(in.id, "duplicate_id", "id '" + in.id + "' already used"));
      try {
        return encode_message(Message::make_result(in.id, backend_.run(in.run)));
      } catch (const DriverError& e) {
        return encode_message(Message::make_error(in.id, e.driver_code(), e.detail()));
      } catch (const Error& e) {
        return encode_message(Message::make_error(in.id, "internal", e.what()));
      }
    }
    case MessageKind::result:
    case MessageKind::error:
      break;
  }
  return encode_message(
      Message::make_error(in.id, "schema", "kind: '" + std::string(kind_name(in.kind)) + "' is not a request"));
}

void serve_stream(Driver& backend, std::istream& in, std::ostream& out) {
  DriverServer server(backend);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out << server.handle(line) << '\n';
    out.flush();
  }
}

// --- client ---

ProtocolDriver::ProtocolDriver(std::unique_ptr<Transport> transport, int window)
    : transport_(std::move(transport)), window_(window) {
  if (!transport_) throw Error(ErrorCode::invalid_argument, "protocol driver needs a transport");
  if (window_ < 1) throw Error(ErrorCode::invalid_argument, "pipeline window must be at least 1");
  try {
    transport_->send(encode_message(Message::make_hello("hello", HelloInfo{})));
  } catch (const Error& e) {
    dead_ = true;
    throw DriverError("transport_lost", std::string(e.what()) + "; " + transport_->loss_reason());
  }
  const Message reply = receive_message();
  if (reply.kind == MessageKind::error) throw DriverError(reply.error.code, reply.error.detail);
  if (reply.kind != MessageKind::hello || reply.id != "hello") {
    dead_ = true;
    throw DriverError("protocol", "expected a hello reply");
  }
  if (!reply.hello.topology) {
    dead_ = true;
    throw DriverError("schema", "topology: hello reply carries no topology");
  }
  hello_ = reply.hello;
}

std::string ProtocolDriver::next_id() { return "r" + std::to_string(counter_++); }

Message ProtocolDriver::receive_message() {
  auto line = transport_->receive();
  if (!line) {
    dead_ = true;
    throw DriverError("transport_lost", transport_->loss_reason());
  }
  try {
    return decode_message(*line);
  } catch (const ProtocolError& e) {
    dead_ = true;
    throw DriverError(e.wire_code(), "driver reply: " + e.wire_detail());
  }
}

void ProtocolDriver::check_coordinates(const RunRequest& request) const {
  const auto& topo = topology();
  for (const auto& o : request.interventions) {
    if (o.layer < 0 || o.layer >= topo.n_layers)
      throw DriverError("bad_layer", "intervention layer " + std::to_string(o.layer) + " outside topology");
    if (o.unit < 0 || o.unit >= topo.mlp_width)
      throw DriverError("bad_unit", "intervention unit " + std::to_string(o.unit) + " outside topology");
  }
}

void ProtocolDriver::check_result(const RunRequest& request, const RunResult& result) const {
  const auto& topo = topology();
  const auto matches = [](const std::vector<LayerVector>& got, const std::vector<int>& want, Eigen::Index width) {
    if (got.size() != want.size()) return false;
    for (std::size_t i = 0; i < want.size(); ++i)
      if (got[i].layer != want[i] || got[i].values.size() != width) return false;
    return true;
  };
  if (!matches(result.residual, request.capture.residual_layers, topo.d_model) ||
      !matches(result.mlp, request.capture.mlp_layers, topo.mlp_width))
    throw DriverError("bad_result", "captures do not match the requested layers");
  if (request.generate &&
      (!result.label_logits ||
       result.label_logits->size() != static_cast<Eigen::Index>(topo.label_token_ids.size())))
    throw DriverError("bad_result", "label logits do not cover the negotiated label tokens");
}

RunResult ProtocolDriver::run(const RunRequest& request) {
  return std::move(run_batch(std::span<const RunRequest>(&request, 1)).front());
}

std::vector<RunResult> ProtocolDriver::run_batch(std::span<const RunRequest> requests) {
  if (dead_) throw DriverError("dead_session", "the driver session was lost earlier");
  for (const auto& r : requests) check_coordinates(r);

  std::vector<std::optional<RunResult>> results(requests.size());
  std::map<std::string, std::size_t> in_flight;
  std::optional<std::pair<std::size_t, ErrorInfo>> failure;
  std::size_t next = 0;

  while (true) {
    // Stop issuing after the first failure but drain what is in flight, so
    // the session stays usable.
    while (!failure && next < requests.size() && in_flight.size() < static_cast<std::size_t>(window_)) {
      const std::string id = next_id();
      try {
        transport_->send(encode_message(Message::make_run(id, requests[next])));
      } catch (const DriverError&) {
        throw;
      } catch (const Error& e) {
        dead_ = true;
        throw DriverError("transport_lost", std::string(e.what()) + "; " + transport_->loss_reason());
      }
      in_flight.emplace(id, next++);
    }
    if (in_flight.empty()) break;

    Message reply = receive_message();
    const auto it = in_flight.find(reply.id);
    if (it == in_flight.end()) {
      dead_ = true;
      throw DriverError("protocol", "reply with unexpected id '" + reply.id + "'");
    }
    const std::size_t index = it->second;
    in_flight.erase(it);

    const auto record_failure = [&](ErrorInfo info) {
      if (!failure || index < failure->first) failure.emplace(index, std::move(info));
    };
    if (reply.kind == MessageKind::error) {
      record_failure(std::move(reply.error));
    } else if (reply.kind == MessageKind::result) {
      try {
        check_result(requests[index], reply.result);
        results[index] = std::move(reply.result);
      } catch (const DriverError& e) {
        record_failure({e.driver_code(), e.detail()});
      }
    } else {
      dead_ = true;
      throw DriverError("protocol", "unexpected '" + std::string(kind_name(reply.kind)) + "' reply");
    }
  }

  if (failure)
    throw DriverError(failure->second.code,
                      "request " + std::to_string(failure->first) + ": " + failure->second.detail);
  std::vector<RunResult> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

}  // namespace clens
