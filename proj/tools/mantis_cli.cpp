// mantis: datagen, train, generate and eval in one binary.
//
// Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mantis/checkpoint.hpp"
#include "mantis/datakit.hpp"
#include "mantis/metrics.hpp"
#include "mantis/run_config.hpp"
#include "mantis/tokenizer.hpp"
#include "mantis/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mantis;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> sets;
  bool quiet = false;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

// Finds the flat run-config object inside any artifact JSON.
std::optional<json> find_run_config(const json& j) {
  if (!j.is_object()) return std::nullopt;
  if (j.contains("model.layers")) return j;
  for (const char* key : {"run_config", "config", "run"}) {
    if (j.contains(key))
      if (auto r = find_run_config(j.at(key))) return r;
  }
  return std::nullopt;
}

// A config is a key=value file, or any artifact (checkpoint, report,
// manifest) that embeds one.
RunConfig load_any_config(const fs::path& path) {
  const std::string text = read_file(path);
  if (text.rfind("MNTS", 0) == 0) return RunConfig::from_json(decode_checkpoint(text).run_config_json);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    const auto found = find_run_config(json::parse(text));
    if (!found) throw ConfigError(path.string() + " does not embed a run configuration");
    return RunConfig::from_json(found->dump());
  }
  return parse_config_text(text);
}

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_any_config(g.config_path);
  if (g.seed) cfg.set_seed(*g.seed);
  if (g.out) cfg.out_dir = *g.out;
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

fs::path ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot use output directory '" + dir + "'");
  return dir;
}

LoadResult load_split(const fs::path& dir, const std::string& split) {
  const fs::path p = dir / (split + ".jsonl");
  if (!fs::exists(p)) throw UsageError("dataset split not found: " + p.string());
  return load_jsonl(p);
}

json cleaning_json(const CleaningReport& r) {
  return json{{"read", r.read},
              {"kept", r.kept},
              {"empty_name", r.empty_name},
              {"empty_description", r.empty_description},
              {"empty_images", r.empty_images},
              {"duplicate_description", r.duplicate_description}};
}

// ---------------------------------------------------------------- datagen

struct DatagenArgs {
  std::optional<std::size_t> n;
};

int run_datagen(const Globals& g, const DatagenArgs& a) {
  RunConfig cfg = resolve_config(g);
  if (a.n) cfg.data.n_samples = *a.n;
  if (!g.out) cfg.out_dir = cfg.data_dir;
  cfg.data.validate();
  ensure_out_dir(cfg.out_dir);
  const std::string manifest = write_dataset(cfg.out_dir, cfg.data, cfg.to_json());
  if (!g.quiet) std::cerr << "wrote dataset to " << cfg.out_dir << "\n" << manifest;
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::optional<std::string> data;
  std::optional<std::string> mode;
  std::optional<std::size_t> max_images;
  std::optional<double> p_text_dropout;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<std::size_t> warmup;
};

std::string artifact_name(const RunConfig& cfg) {
  return std::string(to_string(cfg.model.cond_mode)) + "-" + std::to_string(cfg.train.seed);
}

int run_train(const Globals& g, const TrainArgs& a) {
  RunConfig cfg = resolve_config(g);
  if (a.data) cfg.data_dir = *a.data;
  if (a.mode) cfg.set("model.cond_mode", *a.mode);
  if (a.max_images) {
    if (*a.max_images < 1 || *a.max_images > 5) throw UsageError("--max-images must be in 1..5");
    cfg.model.max_images = *a.max_images;
  }
  if (a.p_text_dropout) cfg.train.p_text_dropout = *a.p_text_dropout;
  if (a.steps) cfg.train.total_steps = *a.steps;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.lr) cfg.train.lr_peak = *a.lr;
  if (a.warmup) cfg.train.warmup_steps = *a.warmup;
  cfg.train.validate();

  const LoadResult train_set = load_split(cfg.data_dir, "train");
  const LoadResult val_set = load_split(cfg.data_dir, "val");
  if (train_set.samples.empty()) throw UsageError("training split is empty after cleaning");
  const fs::path out = ensure_out_dir(cfg.out_dir);

  std::vector<std::string> corpus;
  for (const auto& s : train_set.samples) {
    corpus.push_back(s.name);
    corpus.push_back(s.description);
  }
  const Vocab vocab = Vocab::train(corpus, cfg.bpe_vocab, cfg.train.seed);
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();

  std::vector<ConditioningBundle> train_b, val_b;
  for (const auto& s : train_set.samples) train_b.push_back(to_bundle(s, vocab));
  for (const auto& s : val_set.samples) val_b.push_back(to_bundle(s, vocab));

  DecoderLM<float> model(cfg.model, cfg.train.seed, cfg.mechanism_init);
  const std::string name = artifact_name(cfg);
  const std::string run_json = cfg.to_json();

  TrainHooks hooks;
  hooks.checkpoint = [&](std::size_t step, const DecoderLM<float>& m) {
    const std::string file =
        step == cfg.train.total_steps ? name + ".ckpt" : name + ".step" + std::to_string(step) + ".ckpt";
    save_checkpoint(out / file, m, vocab, run_json);
  };
  const std::size_t log_every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
  hooks.on_step = [&](std::size_t step, double loss, double lr) {
    if (!g.quiet && (step % log_every == 0 || step == 1))
      std::fprintf(stderr, "step %zu/%zu loss %.4f lr %.2e\n", step, cfg.train.total_steps, loss, lr);
  };

  TrainReport rep = train(model, train_b, cfg.train, SpecialTokens::of(vocab), val_b, hooks);
  rep.config_json = json{{"name", name},
                         {"run_config", json::parse(run_json)},
                         {"model_config", json::parse(model_config_to_json(cfg.model))},
                         {"vocab_hash", vocab.hash()},
                         {"parameters", model.parameters().total_numel()},
                         {"data", {{"train", cleaning_json(train_set.report)}, {"val", cleaning_json(val_set.report)}}}}
                        .dump();
  write_file(out / (name + ".report.json"), rep.to_json());
  write_file(out / (name + ".timing.json"), rep.timing_json());
  vocab.save(out / (name + ".vocab"));
  if (!g.quiet) {
    std::fprintf(stderr, "trained %s: %zu steps, final eval loss %.4f, %.1fs\n", name.c_str(), rep.steps,
                 rep.final_eval_loss, rep.wall_seconds);
  }
  return 0;
}

// --------------------------------------------------------------- generate

struct GenerateArgs {
  std::string checkpoint;
  std::optional<std::string> data;
  std::string split = "test";
  std::optional<std::string> input;
  std::optional<std::string> output;
  std::optional<std::string> vocab;
  std::optional<std::string> strategy;
  std::optional<std::size_t> k;
  std::optional<double> temperature;
  std::optional<std::size_t> max_new_tokens;
  std::size_t limit = 0;
};

int run_generate(const Globals& g, const GenerateArgs& a) {
  RunConfig cfg = resolve_config(g);
  if (a.data) cfg.data_dir = *a.data;
  if (a.strategy) cfg.set("gen.strategy", *a.strategy);
  if (a.k) cfg.gen.k = *a.k;
  if (a.temperature) cfg.gen.temperature = *a.temperature;
  if (a.max_new_tokens) cfg.gen.max_new_tokens = *a.max_new_tokens;
  cfg.gen.validate();

  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  if (a.vocab) {
    if (auto msg = vocab_mismatch(ck, Vocab::load(*a.vocab))) {
      std::cerr << "warning: " << *msg << "; using the checkpoint's vocabulary\n";
    }
  }

  const LoadResult in = a.input ? load_jsonl(*a.input) : load_split(cfg.data_dir, a.split);
  const fs::path out = ensure_out_dir(cfg.out_dir);
  const fs::path target = a.output ? fs::path(*a.output)
                                   : out / (fs::path(a.checkpoint).stem().string() + "." + a.split + ".jsonl");
  const SpecialTokens sp = SpecialTokens::of(ck.vocab);
  std::string text;
  std::size_t done = 0;
  for (const auto& s : in.samples) {
    if (a.limit && done == a.limit) break;
    GenerationConfig gc = cfg.gen;
    gc.seed = mix_seed(cfg.gen.seed, fnv1a64(s.id));
    const std::vector<int> ids = ck.model.generate(to_bundle(s, ck.vocab), gc, sp);
    text += json{{"id", s.id}, {"generated", ck.vocab.decode(ids)}}.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
    ++done;
  }
  write_file(target, text);
  if (!g.quiet) std::cerr << "wrote " << done << " generations to " << target.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<std::string> generations;
  std::optional<std::string> references;
  std::optional<std::string> output;
};

struct Reference {
  std::vector<std::string> texts;
  AttributeMap attributes;
};

std::vector<json> read_records(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw DataFormatError(n, std::string("malformed JSON in ") + p.string() + ": " + e.what());
    }
    if (!out.back().contains("id")) throw DataFormatError(n, "record without id in " + p.string());
  }
  return out;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < 20; ++i) s += (i ? ", " : "") + ids[i];
  if (ids.size() > 20) s += ", ... (" + std::to_string(ids.size()) + " total)";
  return s;
}

int run_eval(const Globals& g, const EvalArgs& a) {
  RunConfig cfg = resolve_config(g);
  std::map<std::string, Reference> refs;
  if (a.references) {
    for (const auto& r : read_records(*a.references)) {
      Reference ref;
      if (r.contains("references")) {
        ref.texts = r.at("references").get<std::vector<std::string>>();
      } else {
        ref.texts.push_back(r.value("description", std::string()));
      }
      if (r.contains("attributes")) ref.attributes = r.at("attributes").get<AttributeMap>();
      refs[r.at("id").get<std::string>()] = std::move(ref);
    }
  }

  json models = json::array();
  std::string table = "model                     BLEU4   CIDEr-D METEOR-lite ROUGE-L img-recall name-recall\n";
  for (const auto& gen_path : a.generations) {
    const auto records = read_records(gen_path);
    EvalCorpus corpus;
    std::vector<double> img_recall, name_recall;
    std::set<std::string> seen;
    std::vector<std::string> missing;
    for (const auto& r : records) {
      const std::string id = r.at("id").get<std::string>();
      seen.insert(id);
      const std::string cand = r.contains("candidate") ? r.at("candidate").get<std::string>()
                                                       : r.value("generated", std::string());
      Reference ref;
      if (r.contains("references")) ref.texts = r.at("references").get<std::vector<std::string>>();
      if (r.contains("attributes")) ref.attributes = r.at("attributes").get<AttributeMap>();
      if (const auto it = refs.find(id); it != refs.end()) {
        if (ref.texts.empty()) ref.texts = it->second.texts;
        if (ref.attributes.empty()) ref.attributes = it->second.attributes;
      } else if (a.references) {
        missing.push_back(id);
        continue;
      }
      if (ref.texts.empty()) {
        missing.push_back(id);
        continue;
      }
      corpus.add(cand, ref.texts);
      if (!ref.attributes.empty()) {
        img_recall.push_back(attribute_recall(cand, ref.attributes, AttributeScope::kImageOnly));
        name_recall.push_back(attribute_recall(cand, ref.attributes, AttributeScope::kNameOnly));
      }
    }
    if (!missing.empty()) throw UsageError(gen_path + ": no reference for ids: " + join_ids(missing));
    std::vector<std::string> absent;
    for (const auto& [id, r] : refs)
      if (!seen.count(id)) absent.push_back(id);
    if (!absent.empty()) throw UsageError(gen_path + ": missing generations for ids: " + join_ids(absent));
    if (corpus.items.empty()) throw UsageError(gen_path + ": no records to score");

    const ScoreReport sc = score_all(corpus);
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    const std::string model = fs::path(gen_path).stem().string();
    json entry{{"model", model},
               {"generations", gen_path},
               {"items", sc.items},
               {"bleu4", sc.bleu4},
               {"cider_d", sc.cider_d},
               {"meteor_lite", sc.meteor_lite},
               {"rouge_l", sc.rouge_l},
               {"warnings", sc.warnings}};
    if (!img_recall.empty()) {
      entry["attribute_recall"] = {{"image_only", mean(img_recall)}, {"name_only", mean(name_recall)}};
    }
    models.push_back(entry);
    char row[256];
    std::snprintf(row, sizeof row, "%-25s %7.4f %7.4f %11.4f %7.4f %10.4f %11.4f\n", model.substr(0, 25).c_str(),
                  sc.bleu4, sc.cider_d, sc.meteor_lite, sc.rouge_l, mean(img_recall), mean(name_recall));
    table += row;
  }

  const json report{{"metrics",
                     {{"bleu4", "corpus BLEU-4, no smoothing"},
                      {"cider_d", "CIDEr-D, sigma 6, x10"},
                      {"meteor_lite", "METEOR-lite: exact + Porter stem stages only, no synonyms"},
                      {"rouge_l", "ROUGE-L, beta 1.2"}}},
                    {"tokenization", std::string(kMetricTokenization)},
                    {"models", models},
                    {"table", table},
                    {"significance", nullptr},
                    {"run_config", json::parse(cfg.to_json())}};
  const fs::path target = a.output ? fs::path(*a.output) : ensure_out_dir(cfg.out_dir) / "eval.json";
  write_file(target, report.dump(2) + "\n");
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mantis: multimodal conditional description generation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key=value config file, or an artifact embedding a run config");
  app.add_option("--seed", g.seed, "seed for data, initialization, training and sampling");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--set", g.sets, "override any config key (key=value), repeatable");
  app.add_flag("-q,--quiet", g.quiet, "suppress progress output");

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "write the synthetic catalogue (train/val/test JSONL + manifest)");
  datagen->add_option("--n", dg.n, "number of samples")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* trainc = app.add_subcommand("train", "fine-tune a decoder on a dataset directory");
  trainc->add_option("--data", tr.data, "dataset directory");
  trainc->add_option("--mode", tr.mode, "mantis | pseudo_self | context_attn | unconditional")
      ->check(CLI::IsMember({"mantis", "pseudo_self", "context_attn", "unconditional"}));
  trainc->add_option("--max-images", tr.max_images, "images per sample (1..5)")->check(CLI::Range(1, 5));
  trainc->add_option("--p-text-dropout", tr.p_text_dropout, "name dropout probability")->check(CLI::Range(0.0, 1.0));
  trainc->add_option("--steps", tr.steps, "optimizer steps")->check(CLI::PositiveNumber);
  trainc->add_option("--batch-size", tr.batch_size, "samples per step")->check(CLI::PositiveNumber);
  trainc->add_option("--lr", tr.lr, "peak learning rate");
  trainc->add_option("--warmup", tr.warmup, "warmup steps");

  GenerateArgs ge;
  auto* generate = app.add_subcommand("generate", "write one generation per input record");
  generate->add_option("--checkpoint", ge.checkpoint, "checkpoint file")->required();
  generate->add_option("--data", ge.data, "dataset directory");
  generate->add_option("--split", ge.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  generate->add_option("--input", ge.input, "JSONL input instead of a dataset split");
  generate->add_option("--output", ge.output, "output JSONL path");
  generate->add_option("--vocab", ge.vocab, "vocabulary to compare against the checkpoint's");
  generate->add_option("--strategy", ge.strategy, "greedy | top_k")->check(CLI::IsMember({"greedy", "top_k"}));
  generate->add_option("--k", ge.k, "top-k size")->check(CLI::PositiveNumber);
  generate->add_option("--temperature", ge.temperature, "sampling temperature");
  generate->add_option("--max-new-tokens", ge.max_new_tokens, "generation length bound");
  generate->add_option("--limit", ge.limit, "only the first N records (0 = all)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "score generation files against references");
  eval->add_option("--generations", ev.generations, "generation JSONL files (one per model)")->required();
  eval->add_option("--references", ev.references, "JSONL with id + description/references + attributes");
  eval->add_option("--output", ev.output, "report path (default <out>/eval.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*datagen) return run_datagen(g, dg);
    if (*trainc) return run_train(g, tr);
    if (*generate) return run_generate(g, ge);
    if (*eval) return run_eval(g, ev);
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const SequenceOverflowError& e) {
    std::cerr << "error: " << e.what() << " (raise model.max_pos / model.max_seq_len)\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
