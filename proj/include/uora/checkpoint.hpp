#pragma once

// Adapter-only checkpoints. See docs/checkpoint_format.md for the byte
// layout.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "uora/adapters.hpp"
#include "uora/reinit.hpp"

namespace uora {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointMode : std::uint8_t { Full = 0, Compact = 1 };

struct LayerCheckpoint {
  std::uint32_t layer_id = 0;
  std::string name;
  AdapterState state;
  // Present for VeRA/UORA layers.
  std::optional<ReinitMonitor> monitor;
};

struct Checkpoint {
  CheckpointMode mode = CheckpointMode::Full;
  std::vector<LayerCheckpoint> layers;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<LayerCheckpoint>& layers,
                                            CheckpointMode mode);

// Reconstructs COMPACT layers by replay and checks every stored matrix
// checksum. Throws DecodeError naming the section on malformed input,
// VersionError on a version mismatch and Error(Checksum) when the
// reconstruction disagrees with the stored checksums.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::vector<LayerCheckpoint>& layers,
                     const std::filesystem::path& path, CheckpointMode mode);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct LayerVerdict {
  std::uint32_t layer_id = 0;
  std::string name;
  bool pass = true;
  bool replayed = false;
  std::string detail;
};

struct VerifyReport {
  CheckpointMode mode = CheckpointMode::Full;
  std::vector<LayerVerdict> layers;
  bool all_pass() const;
};

// Like load_checkpoint, but reports per-layer verdicts instead of throwing
// on the first checksum mismatch. FULL files are checksum-verified only.
VerifyReport verify_checkpoint(const std::filesystem::path& path);
VerifyReport verify_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace uora
