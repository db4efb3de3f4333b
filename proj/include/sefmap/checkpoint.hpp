// SPDX-License-Identifier: Apache-2.0
//
// Versioned little-endian checkpoint ("SEFC"): embedded JSON config, step
// counter, parameters, optimizer moments, feature statistics and RNG state.
#pragma once

#include <filesystem>
#include <memory>

#include "sefmap/train.hpp"

namespace sefmap {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, Trainer& trainer);

/// Rebuilds a trainer from a checkpoint. Refuses other versions and any
/// parameter whose name or shape disagrees with the embedded config.
std::unique_ptr<Trainer> load_checkpoint(const std::filesystem::path& path);

}  // namespace sefmap
