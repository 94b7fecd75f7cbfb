#include "mantis/model_config.hpp"

#include <stdexcept>
#include <string>

#include "json.hpp"

namespace mantis {

using json = nlohmann::json;

std::string_view to_string(CondMode mode) {
  switch (mode) {
    case CondMode::kMantisPrefix: return "mantis";
    case CondMode::kPseudoSelf: return "pseudo_self";
    case CondMode::kContextAttn: return "context_attn";
    case CondMode::kUnconditional: return "unconditional";
  }
  return "unknown";
}

CondMode parse_cond_mode(std::string_view name) {
  if (name == "mantis" || name == "mantis_prefix") return CondMode::kMantisPrefix;
  if (name == "pseudo_self") return CondMode::kPseudoSelf;
  if (name == "context_attn") return CondMode::kContextAttn;
  if (name == "unconditional") return CondMode::kUnconditional;
  throw std::invalid_argument("unknown conditioning mode '" + std::string(name) +
                              "' (expected mantis|pseudo_self|context_attn|unconditional)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (layers == 0) fail("layers must be >= 1");
  if (heads == 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
  }
  if (vocab_size == 0) fail("vocab_size must be set");
  if (max_pos == 0) fail("max_pos must be >= 1");
  if (max_images == 0) fail("max_images must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (vision.embed_dim != embed_dim) {
    fail("vision embed_dim " + std::to_string(vision.embed_dim) + " differs from embed_dim " +
         std::to_string(embed_dim));
  }
}

namespace {

json vision_to_json(const VisionConfig& v) {
  return json{{"image_size", v.image_size},
              {"conv_channels", v.conv_channels},
              {"feature_dim", v.feature_dim},
              {"embed_dim", v.embed_dim},
              {"projection_bias", v.projection_bias}};
}

template <typename V>
void read_field(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument(std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  json j{{"layers", cfg.layers},
         {"heads", cfg.heads},
         {"embed_dim", cfg.embed_dim},
         {"vocab_size", cfg.vocab_size},
         {"max_pos", cfg.max_pos},
         {"max_seq_len", cfg.max_seq_len},
         {"max_images", cfg.max_images},
         {"dropout", cfg.dropout},
         {"tied_head", cfg.tied_head},
         {"cond_mode", std::string(to_string(cfg.cond_mode))},
         {"vision", vision_to_json(cfg.vision)}};
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  const json j = json::parse(text);
  reject_unknown(j,
                 {"layers", "heads", "embed_dim", "vocab_size", "max_pos", "max_seq_len", "max_images",
                  "dropout", "tied_head", "cond_mode", "vision"},
                 "model config");
  ModelConfig cfg;
  read_field(j, "layers", cfg.layers);
  read_field(j, "heads", cfg.heads);
  read_field(j, "embed_dim", cfg.embed_dim);
  read_field(j, "vocab_size", cfg.vocab_size);
  read_field(j, "max_pos", cfg.max_pos);
  read_field(j, "max_seq_len", cfg.max_seq_len);
  read_field(j, "max_images", cfg.max_images);
  read_field(j, "dropout", cfg.dropout);
  read_field(j, "tied_head", cfg.tied_head);
  if (j.contains("cond_mode")) cfg.cond_mode = parse_cond_mode(j.at("cond_mode").get<std::string>());
  if (j.contains("vision")) {
    const json& v = j.at("vision");
    reject_unknown(v, {"image_size", "conv_channels", "feature_dim", "embed_dim", "projection_bias"},
                   "vision config");
    read_field(v, "image_size", cfg.vision.image_size);
    read_field(v, "conv_channels", cfg.vision.conv_channels);
    read_field(v, "feature_dim", cfg.vision.feature_dim);
    read_field(v, "embed_dim", cfg.vision.embed_dim);
    read_field(v, "projection_bias", cfg.vision.projection_bias);
  }
  return cfg;
}

}  // namespace mantis
