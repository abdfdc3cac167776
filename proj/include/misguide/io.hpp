#pragma once

#include <filesystem>
#include <string>

namespace misguide {

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

}  // namespace misguide
