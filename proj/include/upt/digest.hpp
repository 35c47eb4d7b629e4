#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace upt {

// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

// Lower-case hex SHA-256 of a file's contents. Throws ValidationError when
// the file cannot be read.
std::string file_sha256_hex(const std::filesystem::path& path);

}  // namespace upt
