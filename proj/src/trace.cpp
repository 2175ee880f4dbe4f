#include "conceptlens/trace.hpp"

#include "conceptlens/dataset.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/json_io.hpp"

#include <bit>
#include <cstring>

namespace clens {

static_assert(std::endian::native == std::endian::little, "trace I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr std::size_t kMagicSize = sizeof(kTraceMagic) - 1;

void put_u32(std::string& out, std::uint32_t value) {
  char bytes[4];
  std::memcpy(bytes, &value, 4);
  out.append(bytes, 4);
}

void put_floats(std::string& out, const Eigen::VectorXf& values) {
  out.append(reinterpret_cast<const char*>(values.data()),
             static_cast<std::size_t>(values.size()) * sizeof(float));
}

}  // namespace

std::string encode_trace(const LabeledDataset& dataset, const ModelTopology& topology,
                         const std::vector<ActivationRecord>& records, const std::string& source) {
  topology.validate();
  if (records.size() != dataset.size())
    throw Error(ErrorCode::length_mismatch, "trace has " + std::to_string(records.size()) +
                                                " records for " + std::to_string(dataset.size()) +
                                                " dataset items");
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].item_id != dataset.items[i].id)
      throw Error(ErrorCode::length_mismatch, "record " + std::to_string(i) + " is for item '" +
                                                  records[i].item_id + "', expected '" +
                                                  dataset.items[i].id + "'");
    validate_record(records[i], topology);
  }

  json header{{"format", "clns-trace"},
              {"version", 1},
              {"topology", topology_to_json(topology)},
              {"dataset_digest", dataset_digest(dataset)},
              {"n_records", records.size()},
              {"source", source}};
  const std::string header_text = header.dump();

  std::string out(kTraceMagic, kMagicSize);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  for (const auto& record : records) {
    for (const auto& v : record.residual) put_floats(out, v);
    for (const auto& v : record.mlp_pre) put_floats(out, v);
  }
  return out;
}

TraceSummary write_trace(const LabeledDataset& dataset, const ModelTopology& topology,
                         const std::vector<ActivationRecord>& records,
                         const std::filesystem::path& path, const std::string& source) {
  const std::string bytes = encode_trace(dataset, topology, records, source);
  write_file_atomic(path, bytes);
  return TraceSummary{topology, dataset_digest(dataset), records.size(), bytes.size()};
}

TraceContents decode_trace(const std::string& bytes, const LabeledDataset& dataset,
                           const std::optional<ModelTopology>& expected) {
  if (bytes.size() < kMagicSize + 4 || bytes.compare(0, kMagicSize, kTraceMagic) != 0)
    throw Error(ErrorCode::parse, "not a trace file (bad magic)");
  std::uint32_t header_size = 0;
  std::memcpy(&header_size, bytes.data() + kMagicSize, 4);
  const std::size_t body_offset = kMagicSize + 4 + header_size;
  if (body_offset > bytes.size()) throw Error(ErrorCode::truncated, "trace header is truncated");

  json header;
  try {
    header = json::parse(bytes.substr(kMagicSize + 4, header_size));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("trace header: ") + e.what());
  }

  TraceSummary summary;
  summary.topology = topology_from_json(header.at("topology"));
  summary.dataset_digest = header.at("dataset_digest").get<std::string>();
  summary.n_records = header.at("n_records").get<std::size_t>();
  summary.bytes = bytes.size();

  if (summary.dataset_digest != dataset_digest(dataset))
    throw Error(ErrorCode::digest_mismatch, "trace was written for a different dataset");
  if (expected && !(*expected == summary.topology))
    throw Error(ErrorCode::topology_mismatch, "trace topology differs from the expected topology");
  if (summary.n_records != dataset.size())
    throw Error(ErrorCode::length_mismatch, "trace record count differs from dataset size");

  const ModelTopology& topo = summary.topology;
  const std::size_t per_record =
      static_cast<std::size_t>(topo.n_layers) * static_cast<std::size_t>(topo.d_model + topo.mlp_width);
  const std::size_t body_bytes = bytes.size() - body_offset;
  const std::size_t expected_bytes = per_record * summary.n_records * sizeof(float);
  if (body_bytes < expected_bytes)
    throw Error(ErrorCode::truncated, "trace body is truncated: " + std::to_string(body_bytes) +
                                          " bytes, expected " + std::to_string(expected_bytes));
  if (body_bytes > expected_bytes)
    throw Error(ErrorCode::parse, "trace body has trailing bytes");

  const char* cursor = bytes.data() + body_offset;
  auto take = [&](int length) {
    Eigen::VectorXf v(length);
    std::memcpy(v.data(), cursor, static_cast<std::size_t>(length) * sizeof(float));
    cursor += static_cast<std::size_t>(length) * sizeof(float);
    return v;
  };
  std::vector<ActivationRecord> records;
  records.reserve(summary.n_records);
  for (std::size_t i = 0; i < summary.n_records; ++i) {
    ActivationRecord record;
    record.item_id = dataset.items[i].id;
    for (int l = 0; l < topo.n_layers; ++l) record.residual.push_back(take(topo.d_model));
    for (int l = 0; l < topo.n_layers; ++l) record.mlp_pre.push_back(take(topo.mlp_width));
    validate_record(record, topo);
    records.push_back(std::move(record));
  }
  return TraceContents{std::move(summary), std::move(records)};
}

TraceContents read_trace_with_header(const std::filesystem::path& path, const LabeledDataset& dataset,
                                     const std::optional<ModelTopology>& expected) {
  return decode_trace(read_file(path), dataset, expected);
}

std::vector<ActivationRecord> read_trace(const std::filesystem::path& path, const LabeledDataset& dataset,
                                         const std::optional<ModelTopology>& expected) {
  return read_trace_with_header(path, dataset, expected).records;
}

}  // namespace clens
