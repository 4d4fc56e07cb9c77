#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mvdiff {

/// Hex SHA-1 of "blob <size>\0" + content, as git hashes a file.
std::string git_blob_sha1(std::string_view content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

}  // namespace mvdiff
