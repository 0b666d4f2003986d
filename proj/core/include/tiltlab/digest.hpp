#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tiltlab {

// SHA-256 as lowercase hex. Content digests identify corpora and tensor
// payloads in manifests and back the freeze-invariance checks.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(std::string_view s);
std::string sha256_hex_file(const std::filesystem::path& p);

}  // namespace tiltlab
