#pragma once

// SSLC checkpoint, little-endian:
//   "SSLC" | u16 version | u32 comment length | comment bytes
//   | u64 payload length | payload | u32 crc32(payload)
// The comment (creation time, host) sits outside the checksummed payload so
// two runs of the same configuration produce identical payloads.
//
// payload:
//   u8 phase | u64 seed | u32 epochs
//   | u16 input_channels | u16 input_size | u16 stages | u16 channels[stages]
//   | u16 blocks_per_stage | u16 embedding_dim
//   | u8 head kind | u32 head dim
//   | u32 entries, each: str16 name | u8 role | u8 trainable | u8 rank
//                         | u32 dims[rank] | f32 values[product(dims)]
//   | u8 has_adam [ f64 lr | f64 beta1 | f64 beta2 | f64 eps | u64 step
//                   | u32 count, each: str16 name | u32 n | f32 m[n] | f32 v[n] ]
//   | str32 config text

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/learning.hpp"
#include "fewshot/model.hpp"

namespace fewshot {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class Phase : std::uint8_t { pretrained = 0, finetuned = 1 };

const char* phase_name(Phase p);

struct CheckpointEntry {
  std::string name;
  ParamRole role = ParamRole::weight;
  bool trainable = true;
  Shape shape;
  std::vector<float> values;
  bool operator==(const CheckpointEntry&) const = default;
};

struct Checkpoint {
  std::string comment;
  Phase phase = Phase::pretrained;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  BackboneConfig backbone;
  HeadKind head_kind = HeadKind::none;
  std::uint32_t head_dim = 0;
  std::vector<CheckpointEntry> entries;
  std::optional<AdamState<float>> adam;
  std::string config_text;
};

/// Copies every parameter, buffer and trainable flag of the model.
Checkpoint capture_checkpoint(const Model<float>& model, Phase phase, std::uint32_t epochs,
                              const AdamState<float>* adam, std::string config_text);

/// Rebuilds the architecture recorded in the checkpoint and loads it.
Model<float> model_from_checkpoint(const Checkpoint& ckpt);

/// Loads into an existing model. Every name, order and shape must match;
/// otherwise Errc::incompatible and the model is left untouched.
void load_into(Model<float>& model, const Checkpoint& ckpt);

std::vector<std::uint8_t> encode_payload(const Checkpoint& ckpt);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Byte range of the payload inside an encoded checkpoint.
std::pair<std::size_t, std::size_t> payload_range(std::span<const std::uint8_t> bytes);

/// "created <UTC time> on <host>".
std::string default_checkpoint_comment();

}  // namespace fewshot
