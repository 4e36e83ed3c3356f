#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "panp/train.hpp"

namespace panp {

enum class CheckpointErrorKind { Io, Format, Version, Truncated, Checksum };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

/// Reflected CRC-32 (polynomial 0xEDB88320), the PNG/zlib variant.
uint32_t crc32(const unsigned char* data, size_t n);

/// Binary layout: "PANP" magic, u32 version, little-endian length-prefixed
/// config/parameter/optimizer/rng blocks, trailing CRC-32 of everything
/// before it. Doubles are stored bit-exact.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Throws CheckpointError with a distinct kind for unreadable files, bad
/// magic or malformed blocks, unsupported versions, short files, and
/// checksum mismatches.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace panp
