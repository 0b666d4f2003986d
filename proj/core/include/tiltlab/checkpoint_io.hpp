#pragma once

#include <filesystem>

#include "tiltlab/transfer.hpp"

// On-disk checkpoint layout: a directory holding
//   manifest.json        model config, provenance, per-file digests
//   tokenizer.json       serialized BPE model
//   tensors/<name>.bin   one JSON header line, then the row-major
//                        little-endian 32-bit payload
// Every payload's sha256 is recorded in the manifest and verified on read;
// any mismatch, truncation, or stray trailing byte raises CorruptionError.

namespace tiltlab {

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

}  // namespace tiltlab
