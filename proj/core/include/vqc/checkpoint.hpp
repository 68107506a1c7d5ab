#pragma once

// Checkpoint directories: manifest.json (format version, config snapshot,
// tensor table, seed, step) next to params.bin, the raw little-endian
// float64 data of every network tensor followed by both codebooks.

#include <cstdint>
#include <filesystem>
#include <string>

#include "vqc/config.hpp"

namespace vqc {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  /// "vqc" or "codebook-free".
  std::string kind = "vqc";
  RunConfig config;
  ModelParameters params;
  Codebooks codebooks;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t episodes_seen = 0;
};

Checkpoint make_checkpoint(const RunConfig& config, const TrainState& state);

/// Creates `dir` if needed and replaces any checkpoint already in it.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);

/// Throws InvalidArgument when the directory or its files are missing,
/// malformed, written by a newer format version, or inconsistent with the
/// embedded config.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace vqc
