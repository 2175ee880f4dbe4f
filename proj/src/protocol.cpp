#include "conceptlens/protocol.hpp"

#include "conceptlens/json_io.hpp"

#include <nlohmann/json.hpp>

namespace clens {

using nlohmann::json;

std::string_view kind_name(MessageKind kind) {
  switch (kind) {
    case MessageKind::hello: return "hello";
    case MessageKind::run: return "run";
    case MessageKind::result: return "result";
    case MessageKind::error: return "error";
  }
  return "error";
}

Message Message::make_hello(std::string id, HelloInfo info) {
  Message m;
  m.kind = MessageKind::hello;
  m.id = std::move(id);
  m.hello = std::move(info);
  return m;
}

Message Message::make_run(std::string id, RunRequest request) {
  Message m;
  m.kind = MessageKind::run;
  m.id = std::move(id);
  m.run = std::move(request);
  return m;
}

Message Message::make_result(std::string id, RunResult result) {
  Message m;
  m.kind = MessageKind::result;
  m.id = std::move(id);
  m.result = std::move(result);
  return m;
}

Message Message::make_error(std::string id, std::string code, std::string detail) {
  Message m;
  m.kind = MessageKind::error;
  m.id = std::move(id);
  m.error = {std::move(code), std::move(detail)};
  return m;
}

bool operator==(const Message& a, const Message& b) {
  if (a.kind != b.kind || a.id != b.id) return false;
  switch (a.kind) {
    case MessageKind::hello: return a.hello == b.hello;
    case MessageKind::run: return a.run == b.run;
    case MessageKind::result: return a.result == b.result;
    case MessageKind::error: return a.error == b.error;
  }
  return false;
}

ProtocolError::ProtocolError(std::string code, std::string field, const std::string& detail)
    : Error(ErrorCode::protocol, code + (field.empty() ? "" : " at '" + field + "'") + ": " + detail),
      code_(std::move(code)),
      field_(std::move(field)),
      detail_(detail) {}

namespace {

json float_array(const Eigen::VectorXf& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw Error(ErrorCode::non_finite, "capture value is not finite");
    out.push_back(shortest_widen(v[i]));
  }
  return out;
}

json double_array(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw Error(ErrorCode::non_finite, "logit value is not finite");
    out.push_back(v[i]);
  }
  return out;
}

json layer_vectors(const std::vector<LayerVector>& v) {
  json out = json::array();
  for (const auto& entry : v) out.push_back({{"layer", entry.layer}, {"values", float_array(entry.values)}});
  return out;
}

}  // namespace

std::string encode_message(const Message& m) {
  json doc = {{"kind", kind_name(m.kind)}, {"id", m.id}};
  switch (m.kind) {
    case MessageKind::hello:
      doc["protocol"] = m.hello.protocol;
      if (m.hello.topology) doc["topology"] = topology_to_json(*m.hello.topology);
      if (m.hello.context_length) doc["context_length"] = *m.hello.context_length;
      if (!m.hello.driver.empty()) doc["driver"] = m.hello.driver;
      break;
    case MessageKind::run: {
      if (m.run.tokens) doc["tokens"] = *m.run.tokens;
      if (m.run.text) doc["text"] = *m.run.text;
      json capture = {{"residual", m.run.capture.residual_layers}, {"mlp", m.run.capture.mlp_layers}};
      if (m.run.capture.position) capture["position"] = *m.run.capture.position;
      else capture["position"] = "final";
      doc["capture"] = capture;
      json interventions = json::array();
      for (const auto& o : m.run.interventions) {
        if (!std::isfinite(o.value)) throw Error(ErrorCode::non_finite, "intervention value is not finite");
        interventions.push_back({{"layer", o.layer}, {"unit", o.unit}, {"value", o.value}});
      }
      doc["interventions"] = interventions;
      doc["generate"] = m.run.generate;
      break;
    }
    case MessageKind::result:
      doc["captures"] = {{"residual", layer_vectors(m.result.residual)}, {"mlp", layer_vectors(m.result.mlp)}};
      if (m.result.label_logits) doc["label_logits"] = double_array(*m.result.label_logits);
      break;
    case MessageKind::error:
      doc["code"] = m.error.code;
      doc["detail"] = m.error.detail;
      break;
  }
  return doc.dump(-1, ' ', false, json::error_handler_t::strict);
}

namespace {

[[noreturn]] void schema(const std::string& field, const std::string& detail) {
  throw ProtocolError("schema", field, detail);
}

const json& require(const json& obj, const char* key, const std::string& path) {
  const auto it = obj.find(key);
  if (it == obj.end()) schema(path + key, "missing required field");
  return *it;
}

std::string as_string(const json& v, const std::string& field) {
  if (!v.is_string()) schema(field, "expected a string");
  return v.get<std::string>();
}

int as_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) schema(field, "expected an integer");
  const auto value = v.get<std::int64_t>();
  if (value < std::numeric_limits<int>::min() || value > std::numeric_limits<int>::max())
    schema(field, "integer out of range");
  return static_cast<int>(value);
}

double as_number(const json& v, const std::string& field) {
  if (!v.is_number()) schema(field, "expected a number");
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) schema(field, "expected a boolean");
  return v.get<bool>();
}

const json& as_array(const json& v, const std::string& field) {
  if (!v.is_array()) schema(field, "expected an array");
  return v;
}

const json& as_object(const json& v, const std::string& field) {
  if (!v.is_object()) schema(field, "expected an object");
  return v;
}

std::vector<int> int_list(const json& v, const std::string& field) {
  std::vector<int> out;
  std::size_t i = 0;
  for (const auto& e : as_array(v, field)) out.push_back(as_int(e, field + "[" + std::to_string(i++) + "]"));
  return out;
}

std::vector<LayerVector> decode_layer_vectors(const json& v, const std::string& field) {
  std::vector<LayerVector> out;
  std::size_t i = 0;
  for (const auto& entry : as_array(v, field)) {
    const std::string path = field + "[" + std::to_string(i++) + "]";
    as_object(entry, path);
    LayerVector lv;
    lv.layer = as_int(require(entry, "layer", path + "."), path + ".layer");
    const auto& values = as_array(require(entry, "values", path + "."), path + ".values");
    lv.values.resize(static_cast<Eigen::Index>(values.size()));
    for (std::size_t j = 0; j < values.size(); ++j)
      lv.values[static_cast<Eigen::Index>(j)] =
          static_cast<float>(as_number(values[j], path + ".values[" + std::to_string(j) + "]"));
    out.push_back(std::move(lv));
  }
  return out;
}

}  // namespace

Message decode_message(std::string_view line) {
  json doc;
  try {
    doc = json::parse(line.begin(), line.end());
  } catch (const json::parse_error&) {
    throw ProtocolError("malformed", "", "line is not valid JSON");
  }
  if (!doc.is_object()) throw ProtocolError("malformed", "", "message is not a JSON object");

  Message m;
  const std::string kind = as_string(require(doc, "kind", ""), "kind");
  if (kind == "hello") m.kind = MessageKind::hello;
  else if (kind == "run") m.kind = MessageKind::run;
  else if (kind == "result") m.kind = MessageKind::result;
  else if (kind == "error") m.kind = MessageKind::error;
  else schema("kind", "unknown kind '" + kind + "'");
  m.id = as_string(require(doc, "id", ""), "id");

  switch (m.kind) {
    case MessageKind::hello: {
      m.hello.protocol = as_string(require(doc, "protocol", ""), "protocol");
      if (doc.contains("topology")) {
        try {
          m.hello.topology = topology_from_json(as_object(doc["topology"], "topology"));
        } catch (const ProtocolError&) {
          throw;
        } catch (const Error& e) {
          schema("topology", e.what());
        }
      }
      if (doc.contains("context_length")) m.hello.context_length = as_int(doc["context_length"], "context_length");
      if (doc.contains("driver")) m.hello.driver = as_string(doc["driver"], "driver");
      break;
    }
    case MessageKind::run: {
      if (doc.contains("tokens")) {
        std::vector<Token> tokens;
        std::size_t i = 0;
        for (const auto& t : as_array(doc["tokens"], "tokens"))
          tokens.push_back(as_int(t, "tokens[" + std::to_string(i++) + "]"));
        m.run.tokens = std::move(tokens);
      }
      if (doc.contains("text")) m.run.text = as_string(doc["text"], "text");
      if (doc.contains("capture")) {
        const auto& capture = as_object(doc["capture"], "capture");
        if (capture.contains("residual")) m.run.capture.residual_layers = int_list(capture["residual"], "capture.residual");
        if (capture.contains("mlp")) m.run.capture.mlp_layers = int_list(capture["mlp"], "capture.mlp");
        if (capture.contains("position")) {
          const auto& p = capture["position"];
          if (p.is_string()) {
            if (p.get<std::string>() != "final") schema("capture.position", "expected \"final\" or an integer");
          } else {
            m.run.capture.position = as_int(p, "capture.position");
          }
        }
      }
      if (doc.contains("interventions")) {
        std::size_t i = 0;
        for (const auto& o : as_array(doc["interventions"], "interventions")) {
          const std::string path = "interventions[" + std::to_string(i++) + "]";
          as_object(o, path);
          UnitOverride u;
          u.layer = as_int(require(o, "layer", path + "."), path + ".layer");
          u.unit = as_int(require(o, "unit", path + "."), path + ".unit");
          u.value = as_number(require(o, "value", path + "."), path + ".value");
          m.run.interventions.push_back(u);
        }
      }
      if (doc.contains("generate")) m.run.generate = as_bool(doc["generate"], "generate");
      break;
    }
    case MessageKind::result: {
      if (doc.contains("captures")) {
        const auto& captures = as_object(doc["captures"], "captures");
        if (captures.contains("residual")) m.result.residual = decode_layer_vectors(captures["residual"], "captures.residual");
        if (captures.contains("mlp")) m.result.mlp = decode_layer_vectors(captures["mlp"], "captures.mlp");
      }
      if (doc.contains("label_logits")) {
        const auto& logits = as_array(doc["label_logits"], "label_logits");
        Eigen::VectorXd v(static_cast<Eigen::Index>(logits.size()));
        for (std::size_t i = 0; i < logits.size(); ++i)
          v[static_cast<Eigen::Index>(i)] = as_number(logits[i], "label_logits[" + std::to_string(i) + "]");
        m.result.label_logits = std::move(v);
      }
      break;
    }
    case MessageKind::error:
      m.error.code = as_string(require(doc, "code", ""), "code");
      if (doc.contains("detail")) m.error.detail = as_string(doc["detail"], "detail");
      break;
  }
  return m;
}

}  // namespace clens
