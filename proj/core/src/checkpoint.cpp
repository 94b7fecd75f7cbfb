#include "mantis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mantis {

using json = nlohmann::json;

namespace {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

constexpr std::size_t kPreamble = 4 + 2 + 4;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string encode_checkpoint(const DecoderLM<float>& model, const Vocab& vocab,
                              const std::string& run_config_json) {
  const ParameterList<float> params = model.parameters();
  std::string blobs;
  blobs.reserve(4 * params.total_numel());
  for (const auto& p : params.items())
    for (float v : p.tensor.data()) put_le<std::uint32_t>(blobs, std::bit_cast<std::uint32_t>(v));
  json table = json::array();
  for (const auto& p : params.items()) table.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  json header{{"model_config", json::parse(model_config_to_json(model.config()))},
              {"tensors", table},
              {"vocab_hash", vocab.hash()},
              {"vocab", vocab.serialize()},
              {"run_config", json::parse(run_config_json)},
              {"blob_fnv1a64", fnv1a(blobs.data(), blobs.size())}};
  const std::string head = header.dump();

  std::string out(kCheckpointMagic, 4);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  out += blobs;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kPreamble) {
    throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) +
                          " bytes is shorter than the preamble");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("bad magic: not an MNTS checkpoint");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto head_len = get_le<std::uint32_t>(bytes, 6);
  if (bytes.size() < kPreamble + head_len) throw CheckpointError("checkpoint truncated inside the header");

  json header;
  try {
    header = json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + head_len);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    const ModelConfig cfg = model_config_from_json(header.at("model_config").dump());
    cfg.validate();
    ck.vocab = Vocab::deserialize(header.at("vocab").get<std::string>());
    ck.vocab_hash = header.at("vocab_hash").get<std::uint64_t>();
    ck.run_config_json = header.at("run_config").dump();
    ck.model = DecoderLM<float>(cfg, 0);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (ck.vocab.hash() != ck.vocab_hash) throw CheckpointError("embedded vocabulary does not match its recorded hash");

  ParameterList<float> params = ck.model.parameters();
  const json& table = header.at("tensors");
  if (!table.is_array() || table.size() != params.size()) {
    throw CheckpointError("shape table lists " + std::to_string(table.size()) + " tensors; the model config implies " +
                          std::to_string(params.size()));
  }
  std::size_t expected = kPreamble + head_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.items()[i];
    const std::string name = table[i].at("name").get<std::string>();
    const Shape shape = table[i].at("shape").get<Shape>();
    if (name != p.name || shape != p.tensor.shape()) {
      throw CheckpointError("shape table entry " + std::to_string(i) + " is " + name + shape_str(shape) +
                            "; expected " + p.name + shape_str(p.tensor.shape()));
    }
    expected += 4 * p.tensor.numel();
  }
  if (bytes.size() < expected) {
    throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected));
  }
  if (bytes.size() > expected) {
    throw CheckpointError("checkpoint has " + std::to_string(bytes.size() - expected) + " trailing bytes");
  }

  std::uint64_t checksum = 0;
  try {
    checksum = header.at("blob_fnv1a64").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (fnv1a(bytes.data() + kPreamble + head_len, expected - kPreamble - head_len) != checksum)
    throw CheckpointError("checkpoint weights do not match their checksum");

  std::size_t at = kPreamble + head_len;
  for (auto& p : params.items()) {
    for (float& v : p.tensor.mutable_data()) {
      v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at));
      at += 4;
    }
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const DecoderLM<float>& model, const Vocab& vocab,
                     const std::string& run_config_json) {
  const std::string bytes = encode_checkpoint(model, vocab, run_config_json);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

std::optional<std::string> vocab_mismatch(const Checkpoint& ckpt, const Vocab& current) {
  if (ckpt.vocab_hash == current.hash()) return std::nullopt;
  std::ostringstream msg;
  msg << "vocabulary hash mismatch: checkpoint " << std::hex << ckpt.vocab_hash << ", current " << current.hash();
  return msg.str();
}

}  // namespace mantis
