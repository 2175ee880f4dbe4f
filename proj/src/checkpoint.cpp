#include "conceptlens/checkpoint.hpp"

#include "conceptlens/error.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/json_io.hpp"

#include <bit>
#include <cstring>

namespace clens {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[] = "CLNM1";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;
}  // namespace

std::string encode_checkpoint(const ToyTransformer& model) {
  model.validate();
  nlohmann::json blocks = nlohmann::json::array();
  model.weights.visit([&](const std::string& name, const auto& block) {
    blocks.push_back({{"name", name}, {"rows", block.rows()}, {"cols", block.cols()}});
  });
  const nlohmann::json header{{"format", "clns-checkpoint"},
                              {"version", 1},
                              {"topology", topology_to_json(model.topology)},
                              {"context_length", model.context_length},
                              {"provenance", std::string(to_string(model.provenance))},
                              {"seed", model.seed},
                              {"blocks", blocks}};
  const std::string text = header.dump();
  std::string out(kMagic, kMagicSize);
  const auto size = static_cast<std::uint32_t>(text.size());
  out.append(reinterpret_cast<const char*>(&size), 4);
  out += text;
  model.weights.visit([&](const std::string&, const auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) {
      const auto value = static_cast<float>(block.data()[i]);
      out.append(reinterpret_cast<const char*>(&value), sizeof(float));
    }
  });
  return out;
}

ToyTransformer decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicSize + 4 || bytes.compare(0, kMagicSize, kMagic) != 0)
    throw Error(ErrorCode::parse, "not a checkpoint file (bad magic)");
  std::uint32_t size = 0;
  std::memcpy(&size, bytes.data() + kMagicSize, 4);
  if (kMagicSize + 4 + size > bytes.size()) throw Error(ErrorCode::truncated, "checkpoint header is truncated");

  nlohmann::json header;
  ToyTransformer model;
  try {
    header = nlohmann::json::parse(bytes.substr(kMagicSize + 4, size));
    model.topology = topology_from_json(header.at("topology"));
    model.context_length = header.at("context_length").get<int>();
    model.provenance = header.at("provenance").get<std::string>() == "planted" ? Provenance::planted
                                                                               : Provenance::trained;
    model.seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("checkpoint header: ") + e.what());
  }
  model.weights = TransformerWeights::zeros(model.topology, model.context_length);

  const std::size_t expected = model.weights.parameter_count() * sizeof(float);
  const std::size_t available = bytes.size() - (kMagicSize + 4 + size);
  if (available != expected)
    throw Error(ErrorCode::truncated, "checkpoint body holds " + std::to_string(available) + " bytes, expected " +
                                          std::to_string(expected));
  const char* cursor = bytes.data() + kMagicSize + 4 + size;
  std::size_t block_index = 0;
  const auto& blocks = header.at("blocks");
  model.weights.visit([&](const std::string& name, auto& block) {
    if (block_index >= blocks.size() || blocks[block_index].at("name").get<std::string>() != name ||
        blocks[block_index].at("rows").get<Eigen::Index>() != block.rows() ||
        blocks[block_index].at("cols").get<Eigen::Index>() != block.cols())
      throw Error(ErrorCode::topology_mismatch, "checkpoint block '" + name + "' does not match topology");
    ++block_index;
    for (Eigen::Index i = 0; i < block.size(); ++i) {
      float value = 0.0f;
      std::memcpy(&value, cursor, sizeof(float));
      cursor += sizeof(float);
      block.data()[i] = static_cast<double>(value);
    }
  });
  return model;
}

void save_checkpoint(const ToyTransformer& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

ToyTransformer load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace clens
