#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hcsc/encoder.hpp"

namespace hcsc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume training.
///
/// On-disk layout ("HCSC"): magic, u32 version, a length-prefixed UTF-8
/// echo block, then f32 little-endian tensors in this order: online params,
/// momentum params, queue keys (oldest first), optimizer velocity. Each
/// parameter set is written layer by layer as weight (row-major) then bias.
///
/// The echo block starts with `ckpt.*` lines describing shapes and counters
/// followed by the training config's key=value lines verbatim.
struct Checkpoint {
  std::uint64_t epoch = 0;  // next epoch to run
  std::uint64_t step = 0;   // optimizer steps taken so far
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::kTanh;
  double ema_m = 0.999;

  EncoderParams online;
  EncoderParams momentum;
  EncoderParams velocity;

  std::size_t queue_capacity = 0;
  Matrix queue_keys;  // dim x size, oldest first
  std::vector<std::int64_t> queue_ids;

  std::string config_text;  // training config echo

  NegativeQueue make_queue() const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hcsc
