#include "mantis/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

namespace mantis {

using json = nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename U>
U parse_number(std::string_view key, std::string_view v) {
  U out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true or false, got '" + std::string(v) + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define MANTIS_SIZE_FIELD(KEY, EXPR)                                                         \
  Field {                                                                                    \
    KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },                          \
        [](RunConfig& c, std::string_view v) { c.EXPR = parse_number<std::size_t>(KEY, v); } \
  }
#define MANTIS_U64_FIELD(KEY, EXPR)                                                            \
  Field {                                                                                      \
    KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },                            \
        [](RunConfig& c, std::string_view v) { c.EXPR = parse_number<std::uint64_t>(KEY, v); } \
  }
#define MANTIS_DOUBLE_FIELD(KEY, EXPR)                                                  \
  Field {                                                                               \
    KEY, [](const RunConfig& c) { return fmt_double(c.EXPR); },                         \
        [](RunConfig& c, std::string_view v) { c.EXPR = parse_number<double>(KEY, v); } \
  }
#define MANTIS_BOOL_FIELD(KEY, EXPR)                                               \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, \
        [](RunConfig& c, std::string_view v) { c.EXPR = parse_bool(KEY, v); }       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      MANTIS_SIZE_FIELD("model.layers", model.layers),
      MANTIS_SIZE_FIELD("model.heads", model.heads),
      Field{"model.embed_dim", [](const RunConfig& c) { return std::to_string(c.model.embed_dim); },
            [](RunConfig& c, std::string_view v) {
              c.model.embed_dim = parse_number<std::size_t>("model.embed_dim", v);
              c.model.vision.embed_dim = c.model.embed_dim;
            }},
      MANTIS_SIZE_FIELD("model.max_pos", model.max_pos),
      MANTIS_SIZE_FIELD("model.max_seq_len", model.max_seq_len),
      MANTIS_SIZE_FIELD("model.max_images", model.max_images),
      MANTIS_DOUBLE_FIELD("model.dropout", model.dropout),
      Field{"model.cond_mode", [](const RunConfig& c) { return std::string(to_string(c.model.cond_mode)); },
            [](RunConfig& c, std::string_view v) {
              try {
                c.model.cond_mode = parse_cond_mode(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
              }
            }},
      Field{"model.mechanism_init",
            [](const RunConfig& c) {
              return std::string(c.mechanism_init == MechanismInit::kZero ? "zero" : "random");
            },
            [](RunConfig& c, std::string_view v) {
              if (v == "zero") {
                c.mechanism_init = MechanismInit::kZero;
              } else if (v == "random") {
                c.mechanism_init = MechanismInit::kRandom;
              } else {
                throw ConfigError("model.mechanism_init must be 'random' or 'zero'");
              }
            }},
      MANTIS_SIZE_FIELD("model.conv_channels", model.vision.conv_channels),
      MANTIS_SIZE_FIELD("model.feature_dim", model.vision.feature_dim),
      MANTIS_DOUBLE_FIELD("train.lr_peak", train.lr_peak),
      MANTIS_SIZE_FIELD("train.warmup_steps", train.warmup_steps),
      MANTIS_SIZE_FIELD("train.total_steps", train.total_steps),
      MANTIS_SIZE_FIELD("train.batch_size", train.batch_size),
      MANTIS_DOUBLE_FIELD("train.p_text_dropout", train.p_text_dropout),
      MANTIS_DOUBLE_FIELD("train.weight_decay", train.weight_decay),
      MANTIS_DOUBLE_FIELD("train.beta1", train.beta1),
      MANTIS_DOUBLE_FIELD("train.beta2", train.beta2),
      MANTIS_DOUBLE_FIELD("train.eps", train.eps),
      MANTIS_DOUBLE_FIELD("train.grad_clip", train.grad_clip),
      MANTIS_U64_FIELD("train.seed", train.seed),
      MANTIS_BOOL_FIELD("train.loss_on_name", train.loss_on_name),
      MANTIS_SIZE_FIELD("train.checkpoint_every", train.checkpoint_every),
      Field{"gen.strategy",
            [](const RunConfig& c) {
              return std::string(c.gen.strategy == GenerationConfig::Strategy::kTopK ? "top_k" : "greedy");
            },
            [](RunConfig& c, std::string_view v) {
              if (v == "greedy") {
                c.gen.strategy = GenerationConfig::Strategy::kGreedy;
              } else if (v == "top_k") {
                c.gen.strategy = GenerationConfig::Strategy::kTopK;
              } else {
                throw ConfigError("gen.strategy must be 'greedy' or 'top_k'");
              }
            }},
      MANTIS_SIZE_FIELD("gen.k", gen.k),
      MANTIS_DOUBLE_FIELD("gen.temperature", gen.temperature),
      MANTIS_SIZE_FIELD("gen.max_new_tokens", gen.max_new_tokens),
      MANTIS_U64_FIELD("gen.seed", gen.seed),
      MANTIS_SIZE_FIELD("data.n_samples", data.n_samples),
      MANTIS_U64_FIELD("data.seed", data.seed),
      Field{"data.image_size", [](const RunConfig& c) { return std::to_string(c.data.image_size); },
            [](RunConfig& c, std::string_view v) {
              c.data.image_size = parse_number<std::size_t>("data.image_size", v);
              c.model.vision.image_size = c.data.image_size;
            }},
      MANTIS_SIZE_FIELD("data.min_images", data.min_images),
      MANTIS_SIZE_FIELD("data.max_images", data.max_images),
      Field{"data.jitter", [](const RunConfig& c) { return std::to_string(c.data.jitter); },
            [](RunConfig& c, std::string_view v) { c.data.jitter = parse_number<int>("data.jitter", v); }},
      MANTIS_SIZE_FIELD("data.bpe_vocab", bpe_vocab),
      Field{"data.dir", [](const RunConfig& c) { return c.data_dir; },
            [](RunConfig& c, std::string_view v) { c.data_dir = std::string(v); }},
      Field{"data.out", [](const RunConfig& c) { return c.out_dir; },
            [](RunConfig& c, std::string_view v) { c.out_dir = std::string(v); }},
  };
  return kFields;
}

const Field& field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::set_seed(std::uint64_t seed) {
  data.seed = seed;
  train.seed = seed;
  gen.seed = seed;
}

void RunConfig::set(std::string_view key, std::string_view value) { field(key).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> kKeys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return kKeys;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j.dump();
}

RunConfig RunConfig::from_json(std::string_view text) {
  RunConfig c;
  const json j = json::parse(text);
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

RunConfig parse_config_text(std::string_view text, RunConfig base) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      base.set(trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

}  // namespace mantis
