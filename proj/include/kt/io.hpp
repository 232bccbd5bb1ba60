#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace kt::io {

// Writes `content` to a sibling temporary file and renames it over `path`,
// so readers never observe a partial file. Creates missing parent
// directories. Throws kt::Error on failure.
void write_atomic(const std::filesystem::path& path, std::string_view content);

// Whole file as bytes. Throws kt::Error naming the path.
std::string read_file(const std::filesystem::path& path);

// Relative paths are anchored at $KT_OUTPUT_ROOT when it is set and non-empty.
std::filesystem::path resolve_output(const std::filesystem::path& path);

}  // namespace kt::io
