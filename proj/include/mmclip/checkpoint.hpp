#pragma once

// Versioned binary checkpoint of a network and, optionally, its bounds.
//
//   "MMCLIP" | u8 version=1
//   u32 input rank | u32 dims...
//   u32 layer count | per layer: u8 kind, u8 activation, u8 clippable,
//                                u32 units, u32 kernel, u32 padding
//   parameters of every layer, in declaration order, as f64
//   u8 has_bounds | per clippable layer: u32 length, f64 values
//
// Integers and doubles are little-endian.

#include <optional>
#include <string>
#include <utility>

#include "mmclip/error.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

inline constexpr char kCheckpointMagic[] = "MMCLIP";
inline constexpr std::uint8_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { not_a_checkpoint, version_mismatch, truncated, malformed, io };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  Network net;
  std::optional<BoundVectors> bounds;
};

std::string encode_checkpoint(const Network& net, const BoundVectors* bounds);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Network& net, const BoundVectors* bounds, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mmclip
