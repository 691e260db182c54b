#pragma once

#include <string>
#include <string_view>

namespace fido {

/// SHA-1 of "blob <size>\0<bytes>", as printed by `git hash-object`.
std::string git_blob_sha1(std::string_view bytes);

/// git_blob_sha1 of a file's contents.
std::string file_blob_sha1(const std::string& path);

}  // namespace fido
