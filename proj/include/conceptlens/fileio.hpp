#pragma once

#include <filesystem>
#include <string>

namespace clens {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary and renames over `path`, so a failed write
/// never leaves a partial file behind. Creates missing parent directories.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace clens
