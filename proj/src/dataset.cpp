#include "conceptlens/dataset.hpp"

#include "conceptlens/error.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/text_format.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <map>

namespace clens {

using nlohmann::json;

namespace {

std::map<std::string, ConceptId> label_index(const std::vector<ConceptLabel>& labels) {
  std::map<std::string, ConceptId> index;
  for (const auto& label : labels) index.emplace(label.name, label.id);
  return index;
}

std::vector<ConceptLabel> make_labels(const std::vector<std::string>& names) {
  std::vector<ConceptLabel> labels;
  for (std::size_t i = 0; i < names.size(); ++i)
    labels.push_back({static_cast<ConceptId>(i), names[i]});
  return labels;
}


void append_field(std::string& out, const std::string& value) {
  out += std::to_string(value.size());
  out += ':';
  out += value;
  out += ';';
}

}  // namespace

LabeledDataset parse_dataset_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, std::string("dataset JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("labels") || !doc.contains("items"))
    throw Error(ErrorCode::parse, "dataset JSON needs 'labels' and 'items'");

  std::vector<std::string> names;
  try {
    names = doc.at("labels").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::parse, "dataset 'labels' must be a list of strings");
  }
  auto labels = make_labels(names);
  const auto index = label_index(labels);

  std::vector<Item> items;
  std::vector<ConceptId> item_labels;
  const json& raw_items = doc.at("items");
  if (!raw_items.is_array()) throw Error(ErrorCode::parse, "dataset 'items' must be a list");
  for (std::size_t i = 0; i < raw_items.size(); ++i) {
    const json& entry = raw_items[i];
    const std::string where = "items[" + std::to_string(i) + "]";
    if (!entry.is_object() || !entry.contains("id") || !entry.contains("label"))
      throw Error(ErrorCode::parse, where + " needs 'id' and 'label'");
    Item item;
    std::string label;
    try {
      item.id = entry.at("id").get<std::string>();
      label = entry.at("label").get<std::string>();
      if (entry.contains("tokens")) item.tokens = entry.at("tokens").get<std::vector<Token>>();
      if (entry.contains("text")) item.text = entry.at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, where + ": " + e.what());
    }
    auto found = index.find(label);
    if (found == index.end())
      throw Error(ErrorCode::unknown_label, where + " references unknown label '" + label + "'");
    items.push_back(std::move(item));
    item_labels.push_back(found->second);
  }
  return make_dataset(std::move(labels), std::move(items), std::move(item_labels));
}

LabeledDataset parse_dataset_csv(const std::string& text,
                                 const std::optional<std::vector<std::string>>& declared_labels) {
  auto rows = parse_csv_rows(text);
  if (rows.empty()) throw Error(ErrorCode::empty_dataset, "CSV dataset has no header");
  const auto& header = rows.front();
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::parse, "CSV header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = column("id");
  const std::size_t label_col = column("label");
  const std::size_t text_col = column("text");

  std::vector<std::string> names = declared_labels.value_or(std::vector<std::string>{});
  if (!declared_labels) {
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() <= label_col) continue;
      const auto& name = rows[r][label_col];
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    }
  }
  auto labels = make_labels(names);
  const auto index = label_index(labels);

  std::vector<Item> items;
  std::vector<ConceptId> item_labels;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw Error(ErrorCode::parse, "CSV row " + std::to_string(r + 1) + " has " +
                                        std::to_string(row.size()) + " fields, expected " +
                                        std::to_string(header.size()));
    auto found = index.find(row[label_col]);
    if (found == index.end())
      throw Error(ErrorCode::unknown_label,
                  "CSV row " + std::to_string(r + 1) + " references unknown label '" + row[label_col] + "'");
    items.push_back(Item{row[id_col], std::nullopt, row[text_col]});
    item_labels.push_back(found->second);
  }
  return make_dataset(std::move(labels), std::move(items), std::move(item_labels));
}

LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                            const std::optional<std::vector<std::string>>& declared_labels) {
  const std::string text = read_file(path);
  return format == DatasetFormat::json ? parse_dataset_json(text)
                                       : parse_dataset_csv(text, declared_labels);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, path.extension() == ".csv" ? DatasetFormat::csv : DatasetFormat::json);
}

std::string dataset_to_json(const LabeledDataset& dataset) {
  json doc;
  doc["labels"] = json::array();
  for (const auto& label : dataset.labels) doc["labels"].push_back(label.name);
  doc["items"] = json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Item& item = dataset.items[i];
    json entry;
    entry["id"] = item.id;
    entry["label"] = dataset.labels[static_cast<std::size_t>(dataset.item_labels[i])].name;
    if (item.tokens) entry["tokens"] = *item.tokens;
    if (item.text) entry["text"] = *item.text;
    doc["items"].push_back(std::move(entry));
  }
  return doc.dump(1) + "\n";
}

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::io, "SHA-256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string dataset_digest(const LabeledDataset& dataset) {
  std::string canonical = "clens-dataset-v1;";
  for (const auto& label : dataset.labels) append_field(canonical, label.name);
  canonical += '|';
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Item& item = dataset.items[i];
    append_field(canonical, item.id);
    append_field(canonical, std::to_string(dataset.item_labels[i]));
    if (item.tokens) {
      std::string joined = "T";
      for (Token t : *item.tokens) joined += std::to_string(t) + ",";
      append_field(canonical, joined);
    } else {
      append_field(canonical, "-");
    }
    append_field(canonical, item.text ? "X" + *item.text : std::string("-"));
  }
  return sha256_hex(canonical);
}

}  // namespace clens
