#pragma once

// Binary checkpoint container:
//
//   "MNTS" | u16 version | u32 header bytes | header JSON | f32 blobs
//
// All integers and floats little-endian. The header carries the model
// config, the named shape table (blob order), the vocabulary and its hash,
// the run configuration that produced the weights, and an FNV-1a 64
// checksum of the blob bytes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "mantis/model.hpp"
#include "mantis/tokenizer.hpp"

namespace mantis {

inline constexpr char kCheckpointMagic[4] = {'M', 'N', 'T', 'S'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  DecoderLM<float> model;
  Vocab vocab;
  std::uint64_t vocab_hash = 0;
  /// JSON text as passed to save_checkpoint ("{}" when none).
  std::string run_config_json;
};

std::string encode_checkpoint(const DecoderLM<float>& model, const Vocab& vocab,
                              const std::string& run_config_json = "{}");
Checkpoint decode_checkpoint(const std::string& bytes);

/// Writes to a temporary sibling and renames, so readers never see a
/// partial file.
void save_checkpoint(const std::filesystem::path& path, const DecoderLM<float>& model,
                     const Vocab& vocab, const std::string& run_config_json = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Message describing a mismatch between the checkpoint's vocabulary and
/// `current`, or nothing when they agree.
std::optional<std::string> vocab_mismatch(const Checkpoint& ckpt, const Vocab& current);

}  // namespace mantis
