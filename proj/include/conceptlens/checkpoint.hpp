#pragma once

#include "conceptlens/transformer.hpp"

#include <filesystem>
#include <string>

namespace clens {

// "CLNM1", u32 little-endian header length, JSON header (topology,
// provenance, seed, block shapes), packed little-endian float32 weights in
// visit order.
std::string encode_checkpoint(const ToyTransformer& model);
ToyTransformer decode_checkpoint(const std::string& bytes);

void save_checkpoint(const ToyTransformer& model, const std::filesystem::path& path);
ToyTransformer load_checkpoint(const std::filesystem::path& path);

}  // namespace clens
