#pragma once

#include "conceptlens/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace clens {

enum class DatasetFormat { json, csv };

/// Loads a labeled dataset. JSON files declare their label set; CSV files
/// (columns id,label,text) take `declared_labels` when given and otherwise
/// the labels in order of first appearance.
LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                            const std::optional<std::vector<std::string>>& declared_labels = {});

/// Picks the format from the file extension.
LabeledDataset load_dataset(const std::filesystem::path& path);

LabeledDataset parse_dataset_json(const std::string& text);
LabeledDataset parse_dataset_csv(const std::string& text,
                                 const std::optional<std::vector<std::string>>& declared_labels = {});

std::string dataset_to_json(const LabeledDataset& dataset);

/// Hex SHA-256 over the canonicalized label set and (id, label, tokens, text)
/// tuples in item order.
std::string dataset_digest(const LabeledDataset& dataset);

std::string sha256_hex(const std::string& bytes);

}  // namespace clens
