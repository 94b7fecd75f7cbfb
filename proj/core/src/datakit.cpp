#include "mantis/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "mantis/metrics.hpp"
#include "mantis/rng.hpp"

namespace mantis {

using json = nlohmann::json;

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

void SynthSpec::validate() const {
  if (n_samples == 0) throw std::invalid_argument("synth spec: n_samples must be at least 1");
  if (image_size < 16) throw std::invalid_argument("synth spec: image_size must be at least 16");
  if (min_images == 0 || min_images > max_images)
    throw std::invalid_argument("synth spec: need 1 <= min_images <= max_images");
  if (jitter < 0) throw std::invalid_argument("synth spec: jitter must be non-negative");
}

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_of(std::string_view id) {
  const auto bucket = fnv1a64(id) % 10;
  if (bucket < 8) return Split::kTrain;
  return bucket == 8 ? Split::kVal : Split::kTest;
}

Image render_glyph(std::string_view shape, std::string_view pattern, std::string_view size, int dx, int dy,
                   std::size_t image_size) {
  Image img;
  img.width = img.height = image_size;
  img.pixels.assign(image_size * image_size, 0.0f);
  const double s = size == "large" ? 9.0 : 5.0;
  const double cx = static_cast<double>(image_size) / 2.0 + dx;
  const double cy = static_cast<double>(image_size) / 2.0 + dy;
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const double px = static_cast<double>(x) + 0.5 - cx;
      const double py = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      if (shape == "square") {
        inside = std::abs(px) <= s && std::abs(py) <= s;
      } else if (shape == "circle") {
        inside = px * px + py * py <= s * s;
      } else if (shape == "triangle") {
        inside = py >= -s && py <= s && std::abs(px) <= (py + s) / 2.0;
      } else if (shape == "cross") {
        const double arm = s / 3.0;
        inside = (std::abs(px) <= arm && std::abs(py) <= s) || (std::abs(py) <= arm && std::abs(px) <= s);
      } else {
        throw std::invalid_argument("render_glyph: unknown shape '" + std::string(shape) + "'");
      }
      if (!inside) continue;
      // Pattern phase follows the glyph, not the canvas.
      const long gx = static_cast<long>(x) - dx + 64;
      const long gy = static_cast<long>(y) - dy + 64;
      float v = 1.0f;
      if (pattern == "striped") {
        v = (gy / 2) % 2 == 0 ? 1.0f : 0.375f;
      } else if (pattern == "dotted") {
        v = (gx % 3 == 1 && gy % 3 == 1) ? 1.0f : 0.375f;
      } else if (pattern != "solid") {
        throw std::invalid_argument("render_glyph: unknown pattern '" + std::string(pattern) + "'");
      }
      img.pixels[y * image_size + x] = v;
    }
  }
  return img;
}

namespace {

const std::vector<std::string> kGarments = {"tee", "shirt", "tunic", "pullover", "jacket"};
const std::vector<std::string> kFits = {"relaxed", "slim", "classic", "boxy", "cropped", "easy"};
const std::vector<std::string> kFinishes = {"for everyday wear", "with a soft hand", "that layers easily",
                                            "cut for comfort",   "with clean seams", "made to last"};

const std::string& pick(const std::vector<std::string>& pool, Rng& rng) { return pool[rng.below(pool.size())]; }

std::string make_name(const AttributeMap& a, const std::string& garment, Rng& rng) {
  switch (rng.below(3)) {
    case 0: return a.at("gender") + " " + a.at("material") + " " + garment;
    case 1: return a.at("material") + " " + garment + " for " + a.at("gender");
    default: return "the " + a.at("gender") + " " + garment + " in " + a.at("material");
  }
}

std::string make_description(const AttributeMap& a, const std::string& garment, Rng& rng) {
  const std::string& fit = pick(kFits, rng);
  const std::string& finish = pick(kFinishes, rng);
  const std::string glyph = a.at("size") + " " + a.at("pattern") + " " + a.at("shape");
  switch (rng.below(3)) {
    case 0:
      return "a " + fit + " " + a.at("material") + " " + garment + " for " + a.at("gender") + " with a " + glyph +
             " print " + finish + ".";
    case 1:
      return a.at("gender") + " " + garment + " in " + a.at("material") + ", " + fit + " fit, featuring a " + glyph +
             " motif " + finish + ".";
    default:
      return "this " + fit + " " + garment + " in " + a.at("material") + " shows a " + glyph + " graphic, made for " +
             a.at("gender") + " " + finish + ".";
  }
}

}  // namespace

Sample generate_sample(const SynthSpec& spec, std::size_t index) {
  Sample s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%07zu", index);
  s.id = buf;
  Rng rng(mix_seed(spec.seed, fnv1a64(s.id)));
  s.attributes["shape"] = pick(attrs::kShapes, rng);
  s.attributes["pattern"] = pick(attrs::kPatterns, rng);
  s.attributes["size"] = pick(attrs::kSizes, rng);
  s.attributes["material"] = pick(attrs::kMaterials, rng);
  s.attributes["gender"] = pick(attrs::kGenders, rng);
  const std::string& garment = pick(kGarments, rng);
  s.name = make_name(s.attributes, garment, rng);
  s.description = make_description(s.attributes, garment, rng);
  const std::size_t count = spec.min_images + rng.below(spec.max_images - spec.min_images + 1);
  const auto span = static_cast<std::size_t>(2 * spec.jitter + 1);
  for (std::size_t k = 0; k < count; ++k) {
    const int dx = static_cast<int>(rng.below(span)) - spec.jitter;
    const int dy = static_cast<int>(rng.below(span)) - spec.jitter;
    s.images.push_back(render_glyph(s.attributes["shape"], s.attributes["pattern"], s.attributes["size"], dx, dy,
                                    spec.image_size));
  }
  return s;
}

std::vector<Sample> generate(const SynthSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

std::string to_jsonl_line(const Sample& s) {
  json j{{"id", s.id}, {"name", s.name}, {"description", s.description}, {"attributes", s.attributes}};
  if (!s.image_features.empty()) {
    j["image_features"] = s.image_features;
  } else {
    json imgs = json::array();
    for (const auto& img : s.images) imgs.push_back(img.pixels);
    j["images"] = std::move(imgs);
  }
  return j.dump();
}

void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) out << to_jsonl_line(s) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

Sample parse_record(const json& j, std::size_t line) {
  if (!j.is_object()) throw DataFormatError(line, "record is not a JSON object");
  Sample s;
  try {
    s.id = j.value("id", std::string());
    s.name = j.value("name", std::string());
    s.description = j.value("description", std::string());
    if (j.contains("attributes")) s.attributes = j.at("attributes").get<AttributeMap>();
    if (j.contains("image_features")) {
      s.image_features = j.at("image_features").get<std::vector<std::vector<float>>>();
      for (const auto& f : s.image_features)
        if (f.size() != s.image_features.front().size())
          throw DataFormatError(line, "image_features rows differ in length");
    }
    if (j.contains("images")) {
      for (const auto& px : j.at("images")) {
        Image img;
        img.pixels = px.get<std::vector<float>>();
        const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(img.pixels.size()))));
        if (side * side != img.pixels.size() || side == 0)
          throw DataFormatError(line, "image of " + std::to_string(img.pixels.size()) + " pixels is not square");
        img.width = img.height = side;
        s.images.push_back(std::move(img));
      }
    }
  } catch (const json::exception& e) {
    throw DataFormatError(line, std::string("bad field: ") + e.what());
  }
  if (s.id.empty()) throw DataFormatError(line, "missing id");
  return s;
}

}  // namespace

LoadResult parse_jsonl(std::istream& in) {
  LoadResult res;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataFormatError(line, std::string("malformed JSON: ") + e.what());
    }
    Sample s = parse_record(j, line);
    ++res.report.read;
    if (s.name.empty()) {
      ++res.report.empty_name;
    } else if (s.description.empty()) {
      ++res.report.empty_description;
    } else if (s.num_images() == 0) {
      ++res.report.empty_images;
    } else if (!seen.insert(s.description).second) {
      ++res.report.duplicate_description;
    } else {
      res.samples.push_back(std::move(s));
    }
  }
  res.report.kept = res.samples.size();
  return res;
}

LoadResult load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_jsonl(in);
}

AttributeScope parse_attribute_scope(std::string_view s) {
  if (s == "image_only") return AttributeScope::kImageOnly;
  if (s == "name_only") return AttributeScope::kNameOnly;
  if (s == "all") return AttributeScope::kAll;
  throw std::invalid_argument("unknown attribute scope '" + std::string(s) + "'");
}

double attribute_recall(std::string_view generated, const AttributeMap& attributes, AttributeScope scope) {
  std::vector<std::string> keys;
  if (scope != AttributeScope::kNameOnly) keys.insert(keys.end(), attrs::kImageOnly.begin(), attrs::kImageOnly.end());
  if (scope != AttributeScope::kImageOnly) keys.insert(keys.end(), attrs::kNameOnly.begin(), attrs::kNameOnly.end());
  std::vector<std::string> words;
  for (const auto& k : keys) {
    const auto it = attributes.find(k);
    if (it != attributes.end()) words.push_back(it->second);
  }
  if (words.empty()) throw std::invalid_argument("attribute_recall: no attributes in scope");
  const Tokens toks = metric_tokenize(generated);
  const std::set<std::string> present(toks.begin(), toks.end());
  std::size_t hit = 0;
  for (const auto& w : words) hit += present.count(w);
  return static_cast<double>(hit) / static_cast<double>(words.size());
}

std::string write_dataset(const std::filesystem::path& dir, const SynthSpec& spec, const std::string& run_config_json) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw std::invalid_argument("cannot create output directory " + dir.string());
  std::vector<Sample> parts[3];
  for (auto& s : generate(spec)) parts[static_cast<int>(split_of(s.id))].push_back(std::move(s));
  json counts;
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest}) {
    const auto& part = parts[static_cast<int>(sp)];
    write_jsonl(dir / (std::string(to_string(sp)) + ".jsonl"), part);
    counts[to_string(sp)] = part.size();
  }
  json manifest{{"spec",
                 {{"n_samples", spec.n_samples},
                  {"seed", spec.seed},
                  {"image_size", spec.image_size},
                  {"min_images", spec.min_images},
                  {"max_images", spec.max_images},
                  {"jitter", spec.jitter}}},
                {"counts", counts},
                {"attributes",
                 {{"shape", attrs::kShapes},
                  {"pattern", attrs::kPatterns},
                  {"size", attrs::kSizes},
                  {"material", attrs::kMaterials},
                  {"gender", attrs::kGenders}}},
                {"run_config", json::parse(run_config_json)}};
  const std::string text = manifest.dump(2) + "\n";
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("write failed for manifest.json");
  return text;
}

ConditioningBundle to_bundle(const Sample& s, const Vocab& vocab) {
  ConditioningBundle b;
  b.images = s.images;
  b.image_features = s.image_features;
  b.name_ids = vocab.encode(s.name);
  b.target_ids = vocab.encode(s.description);
  return b;
}

}  // namespace mantis
