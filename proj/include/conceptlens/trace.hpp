#pragma once

#include "conceptlens/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace clens {

// Trace layout: "CLNS1", u32 little-endian header length, JSON header, then
// per record L residual vectors followed by L MLP vectors as little-endian
// float32.
inline constexpr char kTraceMagic[] = "CLNS1";

struct TraceSummary {
  ModelTopology topology;
  std::string dataset_digest;
  std::size_t n_records = 0;
  std::size_t bytes = 0;
};

std::string encode_trace(const LabeledDataset& dataset, const ModelTopology& topology,
                         const std::vector<ActivationRecord>& records,
                         const std::string& source = {});

TraceSummary write_trace(const LabeledDataset& dataset, const ModelTopology& topology,
                         const std::vector<ActivationRecord>& records,
                         const std::filesystem::path& path, const std::string& source = {});

struct TraceContents {
  TraceSummary summary;
  std::vector<ActivationRecord> records;
};

TraceContents decode_trace(const std::string& bytes, const LabeledDataset& dataset,
                           const std::optional<ModelTopology>& expected = {});

std::vector<ActivationRecord> read_trace(const std::filesystem::path& path,
                                         const LabeledDataset& dataset,
                                         const std::optional<ModelTopology>& expected = {});

TraceContents read_trace_with_header(const std::filesystem::path& path,
                                     const LabeledDataset& dataset,
                                     const std::optional<ModelTopology>& expected = {});

}  // namespace clens
