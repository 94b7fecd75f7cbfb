#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mantis/conditioner.hpp"
#include "mantis/tokenizer.hpp"
#include "mantis/vision.hpp"

namespace mantis {

/// Attribute pools of the synthetic catalogue. Image-only attributes are
/// drawn into the pictures and never named in the title; name-only
/// attributes appear in the title and are never drawn.
namespace attrs {
inline const std::vector<std::string> kShapes = {"square", "triangle", "circle", "cross"};
inline const std::vector<std::string> kPatterns = {"solid", "striped", "dotted"};
inline const std::vector<std::string> kSizes = {"small", "large"};
inline const std::vector<std::string> kMaterials = {"cotton", "denim", "velour", "silk"};
inline const std::vector<std::string> kGenders = {"mens", "womens"};
inline const std::vector<std::string> kImageOnly = {"shape", "pattern", "size"};
inline const std::vector<std::string> kNameOnly = {"material", "gender"};
}  // namespace attrs

using AttributeMap = std::map<std::string, std::string>;

struct SynthSpec {
  std::size_t n_samples = 2500;
  std::uint64_t seed = 0;
  std::size_t image_size = 24;
  std::size_t min_images = 1;
  std::size_t max_images = 5;
  /// Per-image translation jitter in pixels (uniform in [-jitter, jitter]).
  int jitter = 2;

  void validate() const;
};

struct Sample {
  std::string id;
  std::string name;
  std::string description;
  std::vector<Image> images;
  std::vector<std::vector<float>> image_features;
  /// Ground truth for evaluation only.
  AttributeMap attributes;

  std::size_t num_images() const { return image_features.empty() ? images.size() : image_features.size(); }
};

enum class Split { kTrain, kVal, kTest };
const char* to_string(Split s);
/// 80/10/10 by a stable hash of the id; independent of corpus size.
Split split_of(std::string_view id);

/// Rasterizes one glyph (no anti-aliasing). dx, dy shift the centre.
Image render_glyph(std::string_view shape, std::string_view pattern, std::string_view size, int dx, int dy,
                   std::size_t image_size = 24);

std::vector<Sample> generate(const SynthSpec& spec);
Sample generate_sample(const SynthSpec& spec, std::size_t index);

std::string to_jsonl_line(const Sample& s);
void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples);

class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct CleaningReport {
  std::size_t read = 0;
  std::size_t kept = 0;
  std::size_t empty_name = 0;
  std::size_t empty_description = 0;
  std::size_t empty_images = 0;
  std::size_t duplicate_description = 0;

  std::size_t dropped() const { return empty_name + empty_description + empty_images + duplicate_description; }
};

struct LoadResult {
  std::vector<Sample> samples;
  CleaningReport report;
};

/// Parses one JSON record per line (blank lines ignored) and applies the
/// cleaning rules in order: empty name, empty description, no images,
/// repeated description (first occurrence kept). Survivors keep file
/// order. Throws DataFormatError naming the line of a malformed record.
LoadResult parse_jsonl(std::istream& in);
LoadResult load_jsonl(const std::filesystem::path& path);

enum class AttributeScope { kImageOnly, kNameOnly, kAll };
AttributeScope parse_attribute_scope(std::string_view s);

/// Fraction of the scoped attribute words present among the generated
/// text's tokens (metric tokenization).
double attribute_recall(std::string_view generated, const AttributeMap& attributes, AttributeScope scope);

/// Writes train.jsonl, val.jsonl, test.jsonl and manifest.json under dir.
/// Returns the manifest text. `run_config_json` is embedded verbatim.
std::string write_dataset(const std::filesystem::path& dir, const SynthSpec& spec,
                          const std::string& run_config_json = "{}");

/// Model-ready view of a sample.
ConditioningBundle to_bundle(const Sample& s, const Vocab& vocab);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace mantis
