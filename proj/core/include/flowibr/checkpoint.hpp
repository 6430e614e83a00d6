#pragma once

// Binary checkpoints: a fixed header followed by the flow-field and backbone
// parameter stores and their Adam state, every real stored as little-endian
// IEEE-754 binary64. Loading reproduces the stores bit for bit.

#include <cstdint>
#include <filesystem>

#include "flowibr/diffcore.hpp"

namespace flowibr {

struct CheckpointHeader {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::int32_t depth = 0;
  std::int32_t width = 0;
  std::int32_t input_size = 0;
  std::int32_t ibr_hidden = 0;
  std::int32_t frequencies = 0;
  std::int32_t num_frames = 0;
  std::uint64_t seed = 0;
  std::int64_t step = 0;

  friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const diff::ParamStore& flow, const diff::ParamStore& backbone);

[[nodiscard]] CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Fills stores that already have the right layout (names and shapes are
/// checked). Throws std::runtime_error on a malformed or mismatched file.
CheckpointHeader load_checkpoint(const std::filesystem::path& path, diff::ParamStore& flow,
                                 diff::ParamStore& backbone);

}  // namespace flowibr
