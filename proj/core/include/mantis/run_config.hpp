#pragma once

// Flat "section.key = value" configuration shared by every command.
// Lines starting with '#' and blank lines are ignored. Sections: model.*,
// train.*, gen.*, data.*.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mantis/datakit.hpp"
#include "mantis/model.hpp"
#include "mantis/model_config.hpp"
#include "mantis/trainer.hpp"

namespace mantis {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  MechanismInit mechanism_init = MechanismInit::kRandom;
  TrainConfig train;
  GenerationConfig gen;
  SynthSpec data;
  /// BPE target size (bytes + merges + specials).
  std::size_t bpe_vocab = 600;
  std::string data_dir = "data";
  std::string out_dir = "out";

  /// Sets every seed (data, init/training, generation).
  void set_seed(std::uint64_t seed);

  /// Throws ConfigError for unknown keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();

  /// key=value lines for every key, in keys() order; parses back to an
  /// equal config.
  std::string to_text() const;
  /// Flat JSON object keyed like the text form.
  std::string to_json() const;
  static RunConfig from_json(std::string_view json);
};

/// Applies the lines of `text` on top of `base`. Errors name the line.
RunConfig parse_config_text(std::string_view text, RunConfig base = {});
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

}  // namespace mantis
