#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "trisk/trainer.hpp"

namespace trisk {

struct CheckpointLoadOptions {
  /// Vocabulary the caller intends to use; compared by hash.
  std::optional<std::uint64_t> expected_vocab_hash;
  bool allow_vocab_mismatch = false;
};

/// Binary layout: "TRISKCKP", u32 version, u64 header length, JSON header,
/// then every parameter (and optimizer moment, when present) as raw
/// little-endian doubles in column-major order.
void save_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(std::istream& in, const CheckpointLoadOptions& options = {});
Checkpoint load_checkpoint(const std::filesystem::path& path, const CheckpointLoadOptions& options = {});

}  // namespace trisk
