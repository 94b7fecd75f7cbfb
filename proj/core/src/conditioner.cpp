#include "mantis/conditioner.hpp"

#include <algorithm>
#include <string>

namespace mantis {

const char* to_string(Segment s) {
  switch (s) {
    case Segment::kBos: return "BOS";
    case Segment::kImg: return "IMG";
    case Segment::kSep: return "SEP";
    case Segment::kName: return "NAME";
    case Segment::kTgt: return "TGT";
    case Segment::kEos: return "EOS";
    case Segment::kPad: return "PAD";
  }
  return "?";
}

std::vector<int> SequenceBatch::next_token_targets() const {
  if (length() < 2) return {};
  return std::vector<int>(labels.begin() + 1, labels.end());
}

std::vector<std::uint8_t> SequenceBatch::next_token_mask() const {
  if (length() < 2) return {};
  return std::vector<std::uint8_t>(loss_mask.begin() + 1, loss_mask.end());
}

namespace {

void check_plain_ids(std::span<const int> ids, const SpecialTokens& sp, const char* what) {
  for (int id : ids) {
    if (id < 0 || id == sp.bos || id == sp.sep || id == sp.eos || id == sp.pad) {
      throw std::invalid_argument(std::string(what) + " contains special or negative id " +
                                  std::to_string(id));
    }
  }
}

class SequenceWriter {
 public:
  SequenceWriter(const ModelConfig& cfg, const BuildOptions& opts) : cfg_(cfg), opts_(opts) {}

  void token(int id, int pos, Segment seg) { push(id, -1, pos, seg); }
  void image(int row, int pos) { push(-1, row, pos, Segment::kImg); }

  SequenceBatch finish() {
    const std::size_t t = sb_.length();
    if (t > cfg_.max_seq_len) {
      throw SequenceOverflowError("sequence of length " + std::to_string(t) +
                                  " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len) +
                                  "; refusing to truncate");
    }
    sb_.attention_mask.assign(t * t, 0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j <= i; ++j) sb_.attention_mask[i * t + j] = 1;
    return std::move(sb_);
  }

 private:
  void push(int id, int row, int pos, Segment seg) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= cfg_.max_pos) {
      throw SequenceOverflowError("position id " + std::to_string(pos) + " of a " + to_string(seg) +
                                  " slot exceeds max_pos " + std::to_string(cfg_.max_pos) +
                                  "; refusing to truncate");
    }
    sb_.token_ids.push_back(id);
    sb_.image_rows.push_back(row);
    sb_.position_ids.push_back(pos);
    sb_.labels.push_back(id);
    sb_.segments.push_back(seg);
    const bool counted = seg == Segment::kTgt || seg == Segment::kEos ||
                         (opts_.loss_on_name && seg == Segment::kName);
    sb_.loss_mask.push_back(counted ? 1 : 0);
  }

  const ModelConfig& cfg_;
  const BuildOptions& opts_;
  SequenceBatch sb_;
};

void write_targets(SequenceWriter& w, std::span<const int> target_ids, int start,
                   const SpecialTokens& sp, const BuildOptions& opts) {
  int pos = start;
  for (int id : target_ids) w.token(id, pos++, Segment::kTgt);
  if (opts.append_eos) w.token(sp.eos, pos, Segment::kEos);
}

std::size_t images_to_use(const ConditioningBundle& b, const ModelConfig& cfg) {
  return std::min(b.num_images(), cfg.max_images);
}

}  // namespace

SequenceBatch build_prefix(const ConditioningBundle& b, const SpecialTokens& sp, const ModelConfig& cfg,
                           const BuildOptions& opts) {
  check_plain_ids(b.name_ids, sp, "name_ids");
  check_plain_ids(b.target_ids, sp, "target_ids");
  const std::size_t m = images_to_use(b, cfg);
  const std::size_t n = b.name_ids.size();

  SequenceWriter w(cfg, opts);
  w.token(sp.bos, 0, Segment::kBos);
  bool first = true;
  if (m > 0) {
    const int start = first ? 1 : 0;
    for (std::size_t k = 0; k < m; ++k) w.image(static_cast<int>(k), start + static_cast<int>(k));
    w.token(sp.sep, start + static_cast<int>(m), Segment::kSep);
    first = false;
  }
  if (n > 0) {
    const int start = first ? 1 : 0;
    for (std::size_t k = 0; k < n; ++k)
      w.token(b.name_ids[k], start + static_cast<int>(k), Segment::kName);
    w.token(sp.sep, start + static_cast<int>(n), Segment::kSep);
    first = false;
  }
  // Without conditioning segments BOS opens the target segment.
  write_targets(w, b.target_ids, first ? 1 : 0, sp, opts);
  return w.finish();
}

SequenceBatch build_text_only(std::span<const int> target_ids, const SpecialTokens& sp,
                              const ModelConfig& cfg, const BuildOptions& opts) {
  check_plain_ids(target_ids, sp, "target_ids");
  SequenceWriter w(cfg, opts);
  w.token(sp.bos, 0, Segment::kBos);
  write_targets(w, target_ids, 1, sp, opts);
  return w.finish();
}

ConditioningLayout build_conditioning_layout(const ConditioningBundle& b, const SpecialTokens& sp,
                                             const ModelConfig& cfg) {
  check_plain_ids(b.name_ids, sp, "name_ids");
  const std::size_t m = images_to_use(b, cfg);
  const std::size_t n = b.name_ids.size();
  ConditioningLayout cl;
  auto push = [&](int id, int row, int pos, Segment seg) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= cfg.max_pos) {
      throw SequenceOverflowError("conditioning position " + std::to_string(pos) +
                                  " exceeds max_pos " + std::to_string(cfg.max_pos));
    }
    cl.token_ids.push_back(id);
    cl.image_rows.push_back(row);
    cl.position_ids.push_back(pos);
    cl.segments.push_back(seg);
    cl.key_mask.push_back(1);
  };
  for (std::size_t k = 0; k < m; ++k)
    push(-1, static_cast<int>(k), static_cast<int>(k), Segment::kImg);
  if (m > 0 && n > 0) push(sp.sep, -1, static_cast<int>(m), Segment::kSep);
  for (std::size_t k = 0; k < n; ++k)
    push(b.name_ids[k], -1, static_cast<int>(k), Segment::kName);
  return cl;
}

PreparedInput make_pseudo_self_inputs(const ConditioningBundle& b, const SpecialTokens& sp,
                                      const ModelConfig& cfg, const BuildOptions& opts) {
  PreparedInput in;
  in.cond = build_conditioning_layout(b, sp, cfg);
  in.text = build_text_only(b.target_ids, sp, cfg, opts);
  in.images_used = images_to_use(b, cfg);
  return in;
}

PreparedInput prepare_input(const ConditioningBundle& b, const SpecialTokens& sp, const ModelConfig& cfg,
                            const BuildOptions& opts) {
  switch (cfg.cond_mode) {
    case CondMode::kMantisPrefix: {
      PreparedInput in;
      in.text = build_prefix(b, sp, cfg, opts);
      in.images_used = images_to_use(b, cfg);
      return in;
    }
    case CondMode::kPseudoSelf:
    case CondMode::kContextAttn:
      return make_pseudo_self_inputs(b, sp, cfg, opts);
    case CondMode::kUnconditional: {
      PreparedInput in;
      in.text = build_text_only(b.target_ids, sp, cfg, opts);
      return in;
    }
  }
  throw std::logic_error("prepare_input: unhandled mode");
}

SequenceBatch apply_modality_dropout(const SequenceBatch& sb, double p_text, Rng& rng) {
  const bool drop = rng.uniform() < p_text;
  SequenceBatch out = sb;
  const bool has_image = std::find(sb.segments.begin(), sb.segments.end(), Segment::kImg) != sb.segments.end();
  if (!drop || !has_image) return out;
  const std::size_t t = sb.length();
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < t; ++j) {
    if (sb.segments[j] != Segment::kName) continue;
    cols.push_back(j);
    // The separator closing the name segment goes with it.
    if (j + 1 < t && sb.segments[j + 1] == Segment::kSep) cols.push_back(j + 1);
  }
  if (cols.empty()) return out;
  for (std::size_t j : cols)
    for (std::size_t i = 0; i < t; ++i) out.attention_mask[i * t + j] = 0;
  out.text_dropped = true;
  return out;
}

ConditioningLayout apply_modality_dropout(const ConditioningLayout& cl, double p_text, Rng& rng) {
  const bool drop = rng.uniform() < p_text;
  ConditioningLayout out = cl;
  const bool has_image = std::find(cl.segments.begin(), cl.segments.end(), Segment::kImg) != cl.segments.end();
  const bool has_name = std::find(cl.segments.begin(), cl.segments.end(), Segment::kName) != cl.segments.end();
  if (!drop || !has_image || !has_name) return out;
  for (std::size_t j = 0; j < cl.length(); ++j) {
    if (cl.segments[j] == Segment::kName || cl.segments[j] == Segment::kSep) out.key_mask[j] = 0;
  }
  out.text_dropped = true;
  return out;
}

PreparedInput apply_modality_dropout(const PreparedInput& in, double p_text, Rng& rng) {
  PreparedInput out = in;
  if (in.cond) {
    out.cond = apply_modality_dropout(*in.cond, p_text, rng);
  } else {
    out.text = apply_modality_dropout(in.text, p_text, rng);
  }
  return out;
}

template <typename T>
ParameterList<T> PseudoSelfLayer<T>::parameters() const {
  ParameterList<T> p;
  p.add("key.w", key_w);
  p.add("key.b", key_b);
  p.add("value.w", value_w);
  p.add("value.b", value_b);
  p.add("gate", gate);
  return p;
}

template <typename T>
ParameterList<T> ContextAttnLayer<T>::parameters() const {
  ParameterList<T> p;
  p.add("norm.g", norm_g);
  p.add("norm.b", norm_b);
  p.add("query.w", query_w);
  p.add("query.b", query_b);
  p.add("key.w", key_w);
  p.add("key.b", key_b);
  p.add("value.w", value_w);
  p.add("value.b", value_b);
  p.add("out.w", out_w);
  p.add("out.b", out_b);
  return p;
}

namespace {
constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> projection(std::size_t d, MechanismInit init, Rng& rng) {
  return init == MechanismInit::kZero ? zero_parameter<T>({d, d}) : normal_parameter<T>({d, d}, kInitStd, rng);
}
}  // namespace

template <typename T>
std::vector<PseudoSelfLayer<T>> make_pseudo_self_layers(const ModelConfig& cfg, Rng& rng, MechanismInit init) {
  const std::size_t d = cfg.embed_dim;
  std::vector<PseudoSelfLayer<T>> layers(cfg.layers);
  for (auto& l : layers) {
    l.key_w = projection<T>(d, init, rng);
    l.key_b = zero_parameter<T>({d});
    l.value_w = projection<T>(d, init, rng);
    l.value_b = zero_parameter<T>({d});
    l.gate = constant_parameter<T>({1}, init == MechanismInit::kZero ? T(0) : T(1));
  }
  return layers;
}

template <typename T>
std::vector<ContextAttnLayer<T>> make_context_attn_layers(const ModelConfig& cfg, Rng& rng, MechanismInit init) {
  const std::size_t d = cfg.embed_dim;
  std::vector<ContextAttnLayer<T>> layers(cfg.layers);
  for (auto& l : layers) {
    l.norm_g = constant_parameter<T>({d}, T(1));
    l.norm_b = zero_parameter<T>({d});
    l.query_w = projection<T>(d, init, rng);
    l.query_b = zero_parameter<T>({d});
    l.key_w = projection<T>(d, init, rng);
    l.key_b = zero_parameter<T>({d});
    l.value_w = projection<T>(d, init, rng);
    l.value_b = zero_parameter<T>({d});
    l.out_w = zero_parameter<T>({d, d});
    l.out_b = zero_parameter<T>({d});
  }
  return layers;
}

template struct PseudoSelfLayer<float>;
template struct PseudoSelfLayer<double>;
template struct ContextAttnLayer<float>;
template struct ContextAttnLayer<double>;
template std::vector<PseudoSelfLayer<float>> make_pseudo_self_layers(const ModelConfig&, Rng&, MechanismInit);
template std::vector<PseudoSelfLayer<double>> make_pseudo_self_layers(const ModelConfig&, Rng&, MechanismInit);
template std::vector<ContextAttnLayer<float>> make_context_attn_layers(const ModelConfig&, Rng&, MechanismInit);
template std::vector<ContextAttnLayer<double>> make_context_attn_layers(const ModelConfig&, Rng&, MechanismInit);

}  // namespace mantis
