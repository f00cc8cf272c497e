#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "tdg/adam.hpp"
#include "tdg/model.hpp"
#include "tdg/train_config.hpp"

namespace tdg::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kTruncated, kBadMagic, kUnsupportedVersion, kCorrupt };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

const char* checkpoint_error_name(CheckpointError::Kind kind);

struct Checkpoint {
  TrainConfig config;
  std::int64_t step = 0;
  ParamMap<float> params;
  ParamMap<float> frozen;  // perceptual-feature weights, never trained
  AdamState<float> adam;
  std::optional<double> threshold;

  model::SlotModel slot_model() const { return {config.model, params, frozen}; }
};

// Layout: "TDGC", u32 version, u32-length-prefixed JSON header (config, step,
// optimizer scalars, threshold), parameter tensor table, optimizer tensor table.
// A tensor table is u32 count, then per tensor: u32 name length, name, u32 rank,
// u32 extents, f32 values. All integers and floats are little-endian.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

// Writes through a temporary file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tdg::train
