#include "mantis/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mantis {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kPosInitStd = 0.01;

// Rows of `x` listed in `rows` (ascending), gathered via contiguous slices.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  std::vector<Tensor<T>> parts;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i + 1;
    while (j < rows.size() && rows[j] == rows[j - 1] + 1) ++j;
    parts.push_back(slice_rows(x, rows[i], rows[j - 1] + 1));
    i = j;
  }
  if (parts.size() == 1) return parts.front();
  return concat_rows<T>(parts);
}

}  // namespace

template <typename T>
ParameterList<T> DecoderBlock<T>::parameters() const {
  ParameterList<T> p;
  p.add("ln1.g", ln1_g);
  p.add("ln1.b", ln1_b);
  p.add("attn.q.w", q_w);
  p.add("attn.q.b", q_b);
  p.add("attn.k.w", k_w);
  p.add("attn.k.b", k_b);
  p.add("attn.v.w", v_w);
  p.add("attn.v.b", v_b);
  p.add("attn.o.w", o_w);
  p.add("attn.o.b", o_b);
  p.add("ln2.g", ln2_g);
  p.add("ln2.b", ln2_b);
  p.add("mlp.fc.w", fc_w);
  p.add("mlp.fc.b", fc_b);
  p.add("mlp.proj.w", proj_w);
  p.add("mlp.proj.b", proj_b);
  return p;
}

void GenerationConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("generation: temperature must be > 0");
  if (k < 1) throw std::invalid_argument("generation: k must be >= 1");
}

template <typename T>
DecoderLM<T>::DecoderLM(const ModelConfig& cfg, std::uint64_t seed, MechanismInit init) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.embed_dim, v = cfg_.vocab_size;
  const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg_.layers));

  tok_emb = normal_parameter<T>({v, d}, kInitStd, rng);
  pos_emb = normal_parameter<T>({cfg_.max_pos, d}, kPosInitStd, rng);
  blocks.resize(cfg_.layers);
  for (auto& b : blocks) {
    b.ln1_g = constant_parameter<T>({d}, T(1));
    b.ln1_b = zero_parameter<T>({d});
    b.q_w = normal_parameter<T>({d, d}, kInitStd, rng);
    b.q_b = zero_parameter<T>({d});
    b.k_w = normal_parameter<T>({d, d}, kInitStd, rng);
    b.k_b = zero_parameter<T>({d});
    b.v_w = normal_parameter<T>({d, d}, kInitStd, rng);
    b.v_b = zero_parameter<T>({d});
    b.o_w = normal_parameter<T>({d, d}, resid_std, rng);
    b.o_b = zero_parameter<T>({d});
    b.ln2_g = constant_parameter<T>({d}, T(1));
    b.ln2_b = zero_parameter<T>({d});
    b.fc_w = normal_parameter<T>({d, 4 * d}, kInitStd, rng);
    b.fc_b = zero_parameter<T>({4 * d});
    b.proj_w = normal_parameter<T>({4 * d, d}, resid_std, rng);
    b.proj_b = zero_parameter<T>({d});
  }
  lnf_g = constant_parameter<T>({d}, T(1));
  lnf_b = zero_parameter<T>({d});
  if (!cfg_.tied_head) head_w = normal_parameter<T>({d, v}, kInitStd, rng);

  if (cfg_.uses_images()) projector.emplace(cfg_.vision, rng);
  if (cfg_.cond_mode == CondMode::kPseudoSelf) pseudo_self = make_pseudo_self_layers<T>(cfg_, rng, init);
  if (cfg_.cond_mode == CondMode::kContextAttn) context_attn = make_context_attn_layers<T>(cfg_, rng, init);
}

template <typename T>
ParameterList<T> DecoderLM<T>::parameters() const {
  ParameterList<T> p;
  p.add("tok_emb", tok_emb);
  p.add("pos_emb", pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l)
    p.append(blocks[l].parameters(), "blocks." + std::to_string(l) + ".");
  p.add("lnf.g", lnf_g);
  p.add("lnf.b", lnf_b);
  if (head_w.defined()) p.add("head.w", head_w);
  if (projector) p.append(projector->parameters(), "image.");
  for (std::size_t l = 0; l < pseudo_self.size(); ++l)
    p.append(pseudo_self[l].parameters(), "pseudo_self." + std::to_string(l) + ".");
  for (std::size_t l = 0; l < context_attn.size(); ++l)
    p.append(context_attn[l].parameters(), "context_attn." + std::to_string(l) + ".");
  return p;
}

template <typename T>
Tensor<T> DecoderLM<T>::encode_images(const ConditioningBundle& b, std::size_t count) const {
  if (count == 0) return {};
  if (!projector) throw std::logic_error("model has no image projector (mode " +
                                         std::string(to_string(cfg_.cond_mode)) + ")");
  if (count > b.num_images()) throw std::invalid_argument("encode_images: bundle has too few images");
  if (!b.image_features.empty()) {
    const std::size_t n = cfg_.vision.feature_dim;
    std::vector<T> flat;
    flat.reserve(count * n);
    for (std::size_t i = 0; i < count; ++i) {
      const auto& f = b.image_features[i];
      if (f.size() != n) {
        throw ShapeError("image feature " + std::to_string(i) + " has " + std::to_string(f.size()) +
                         " values, expected " + std::to_string(n));
      }
      for (float x : f) flat.push_back(static_cast<T>(x));
    }
    return projector->encode_features(Tensor<T>::from({count, n}, std::move(flat)));
  }
  return projector->encode_images(std::span<const Image>(b.images.data(), count));
}

namespace {

template <typename T>
Tensor<T> embed_slots(const Tensor<T>& tok_emb, const Tensor<T>& pos_emb, std::span<const int> token_ids,
                      std::span<const int> image_rows, std::span<const int> position_ids,
                      const Tensor<T>& injected) {
  const std::size_t t = token_ids.size();
  const bool any_injected = std::any_of(image_rows.begin(), image_rows.end(), [](int r) { return r >= 0; });
  Tensor<T> tokens;
  if (!any_injected) {
    tokens = embedding_lookup(tok_emb, token_ids);
  } else {
    if (!injected.defined()) throw std::invalid_argument("sequence references image rows but no image tokens given");
    if (injected.cols() != tok_emb.dim(1)) {
      throw ShapeError("injected embeddings " + shape_str(injected.shape()) + " do not match embed dim " +
                       std::to_string(tok_emb.dim(1)));
    }
    std::vector<Tensor<T>> parts;
    std::size_t i = 0;
    while (i < t) {
      std::size_t j = i + 1;
      if (image_rows[i] < 0) {
        while (j < t && image_rows[j] < 0) ++j;
        parts.push_back(embedding_lookup(tok_emb, token_ids.subspan(i, j - i)));
      } else {
        while (j < t && image_rows[j] == image_rows[j - 1] + 1) ++j;
        const auto first = static_cast<std::size_t>(image_rows[i]);
        parts.push_back(slice_rows(injected, first, first + (j - i)));
      }
      i = j;
    }
    tokens = parts.size() == 1 ? parts.front() : concat_rows<T>(parts);
  }
  return add(tokens, embedding_lookup(pos_emb, position_ids));
}

}  // namespace

template <typename T>
Tensor<T> DecoderLM<T>::embed(const SequenceBatch& sb, const Tensor<T>& injected) const {
  return embed_slots(tok_emb, pos_emb, sb.token_ids, sb.image_rows, sb.position_ids, injected);
}

template <typename T>
Tensor<T> DecoderLM<T>::embed(const ConditioningLayout& cl, const Tensor<T>& injected) const {
  return embed_slots(tok_emb, pos_emb, cl.token_ids, cl.image_rows, cl.position_ids, injected);
}

template <typename T>
Tensor<T> DecoderLM<T>::cond_vectors(const PreparedInput& in, const Tensor<T>& image_tokens) const {
  if (!in.cond || in.cond->length() == 0) return {};
  return embed(*in.cond, image_tokens);
}

template <typename T>
Tensor<T> DecoderLM<T>::maybe_dropout(const Tensor<T>& x, const ForwardOptions& opts) const {
  if (!opts.training || cfg_.dropout <= 0.0) return x;
  if (!opts.rng) throw std::invalid_argument("forward: training mode requires an rng");
  return dropout(x, cfg_.dropout, *opts.rng);
}

template <typename T>
Tensor<T> DecoderLM<T>::forward(const PreparedInput& in, const Tensor<T>& image_tokens,
                                const ForwardOptions& opts) const {
  const SequenceBatch& sb = in.text;
  const std::size_t t = sb.length();
  if (t == 0) throw std::invalid_argument("forward: empty sequence");
  if (sb.attention_mask.size() != t * t) throw ShapeError("forward: attention mask does not match sequence");
  const std::size_t heads = cfg_.heads;

  Tensor<T> x = maybe_dropout(embed(sb, in.cond ? Tensor<T>{} : image_tokens), opts);

  const Tensor<T> cond = cond_vectors(in, image_tokens);
  const std::size_t c = cond.defined() ? cond.dim(0) : 0;
  const bool pseudo = cfg_.cond_mode == CondMode::kPseudoSelf && c > 0;
  const bool context = cfg_.cond_mode == CondMode::kContextAttn && c > 0;
  if (pseudo && pseudo_self.size() != blocks.size()) throw std::logic_error("pseudo-self layers missing");
  if (context && context_attn.size() != blocks.size()) throw std::logic_error("context-attn layers missing");

  std::vector<std::uint8_t> pseudo_mask;
  std::vector<std::uint8_t> context_mask;
  if (pseudo) {
    pseudo_mask.resize(t * (c + t));
    for (std::size_t i = 0; i < t; ++i) {
      std::copy(in.cond->key_mask.begin(), in.cond->key_mask.end(), pseudo_mask.begin() + i * (c + t));
      std::copy_n(sb.attention_mask.begin() + i * t, t, pseudo_mask.begin() + i * (c + t) + c);
    }
  }
  if (context) {
    context_mask.resize(t * c);
    for (std::size_t i = 0; i < t; ++i)
      std::copy(in.cond->key_mask.begin(), in.cond->key_mask.end(), context_mask.begin() + i * c);
  }

  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const Tensor<T> h = layernorm(x, b.ln1_g, b.ln1_b);
    const Tensor<T> q = linear(h, b.q_w, b.q_b);
    const Tensor<T> k = linear(h, b.k_w, b.k_b);
    const Tensor<T> v = linear(h, b.v_w, b.v_b);
    Tensor<T> a;
    if (pseudo) {
      const auto& ps = pseudo_self[l];
      const Tensor<T> keys[] = {linear(cond, ps.key_w, ps.key_b), k};
      const Tensor<T> values[] = {linear(cond, ps.value_w, ps.value_b), v};
      a = attention(q, concat_rows<T>(keys), concat_rows<T>(values), pseudo_mask, heads,
                    std::optional<GatedPrefix<T>>(GatedPrefix<T>{mul(ps.gate, ps.gate), c}));
    } else {
      a = attention(q, k, v, sb.attention_mask, heads);
    }
    x = add(x, maybe_dropout(linear(a, b.o_w, b.o_b), opts));

    const Tensor<T> h2 = layernorm(x, b.ln2_g, b.ln2_b);
    const Tensor<T> mlp = linear(gelu(linear(h2, b.fc_w, b.fc_b)), b.proj_w, b.proj_b);
    x = add(x, maybe_dropout(mlp, opts));

    if (context) {
      const auto& ca = context_attn[l];
      const Tensor<T> hc = layernorm(x, ca.norm_g, ca.norm_b);
      const Tensor<T> cq = linear(hc, ca.query_w, ca.query_b);
      const Tensor<T> ck = linear(cond, ca.key_w, ca.key_b);
      const Tensor<T> cv = linear(cond, ca.value_w, ca.value_b);
      const Tensor<T> ctx = attention(cq, ck, cv, context_mask, heads);
      x = add(x, maybe_dropout(linear(ctx, ca.out_w, ca.out_b), opts));
    }
  }

  if (opts.last_only) x = slice_rows(x, t - 1, t);
  x = layernorm(x, lnf_g, lnf_b);
  return cfg_.tied_head ? matmul_nt(x, tok_emb) : matmul(x, head_w);
}

template <typename T>
Tensor<T> DecoderLM<T>::forward(const PreparedInput& in, const ConditioningBundle& b,
                                const ForwardOptions& opts) const {
  return forward(in, encode_images(b, in.images_used), opts);
}

template <typename T>
Tensor<T> DecoderLM<T>::forward(const SequenceBatch& sb, const Tensor<T>& image_tokens,
                                const ForwardOptions& opts) const {
  PreparedInput in;
  in.text = sb;
  return forward(in, image_tokens, opts);
}

template <typename T>
Tensor<T> DecoderLM<T>::loss(const PreparedInput& in, const ConditioningBundle& b,
                             const ForwardOptions& opts) const {
  const auto targets = in.text.next_token_targets();
  const auto mask = in.text.next_token_mask();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  if (rows.empty()) throw EmptyLossError("loss: no position contributes to the loss");
  const Tensor<T> logits = forward(in, b, opts);
  const Tensor<T> picked = gather_rows(logits, rows);
  std::vector<int> picked_targets;
  std::vector<std::uint8_t> ones(rows.size(), 1);
  for (std::size_t r : rows) picked_targets.push_back(targets[r]);
  return masked_cross_entropy(picked, picked_targets, ones);
}

template <typename T>
std::vector<int> DecoderLM<T>::generate(const ConditioningBundle& b, const GenerationConfig& g,
                                        const SpecialTokens& sp) const {
  g.validate();
  NoGradGuard no_grad;
  Rng rng(g.seed);
  ConditioningBundle work;
  work.images = b.images;
  work.image_features = b.image_features;
  work.name_ids = b.name_ids;
  const std::size_t count = cfg_.uses_images() ? std::min(b.num_images(), cfg_.max_images) : 0;
  const Tensor<T> image_tokens = encode_images(b, count);
  BuildOptions opts;
  opts.append_eos = false;

  std::vector<int> out;
  std::vector<T> row;
  while (out.size() < g.max_new_tokens) {
    PreparedInput in;
    try {
      in = prepare_input(work, sp, cfg_, opts);
    } catch (const SequenceOverflowError&) {
      // The last token has no position to sit in.
      if (!out.empty()) out.pop_back();
      break;
    }
    const Tensor<T> logits = forward(in, image_tokens, ForwardOptions{false, nullptr, true});
    row.assign(logits.data().begin(), logits.data().end());
    for (int id : {sp.bos, sp.sep, sp.pad}) {
      if (id >= 0 && static_cast<std::size_t>(id) < row.size())
        row[static_cast<std::size_t>(id)] = -std::numeric_limits<T>::infinity();
    }
    const int next = select_token(std::span<const T>(row), g, rng);
    if (next == sp.eos) break;
    out.push_back(next);
    work.target_ids.push_back(next);
  }
  return out;
}

namespace {

template <typename T>
int select_token_impl(std::span<const T> logits, const GenerationConfig& g, Rng& rng) {
  g.validate();
  if (logits.empty()) throw std::invalid_argument("select_token: empty logits");
  if (g.strategy == GenerationConfig::Strategy::kGreedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<int>(best);
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(g.k, logits.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (logits[a] != logits[b]) return logits[a] > logits[b];
                      return a < b;
                    });
  std::vector<double> w(k);
  const double top = static_cast<double>(logits[order[0]]);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp((static_cast<double>(logits[order[i]]) - top) / g.temperature);
    z += w[i];
  }
  const double u = rng.uniform() * z;
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += w[i];
    if (u < acc) return static_cast<int>(order[i]);
  }
  return static_cast<int>(order[k - 1]);
}

}  // namespace

int select_token(std::span<const float> logits, const GenerationConfig& g, Rng& rng) {
  return select_token_impl(logits, g, rng);
}
int select_token(std::span<const double> logits, const GenerationConfig& g, Rng& rng) {
  return select_token_impl(logits, g, rng);
}

template struct DecoderBlock<float>;
template struct DecoderBlock<double>;
template class DecoderLM<float>;
template class DecoderLM<double>;

}  // namespace mantis
