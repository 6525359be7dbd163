#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "usn/network.hpp"

namespace usn {

inline constexpr int kCheckpointVersion = 1;

/// JSON container: layer specs, row-major weights, channel masks and the seed lineage.
nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace usn
