#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "dmac/nn.hpp"

namespace dmac {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);
// Digest of the network's checkpoint text.
std::string network_digest(const nn::DenseNetwork& net);

}  // namespace dmac
