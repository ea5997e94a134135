#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "memloc/error.hpp"
#include "memloc/rng.hpp"
#include "memloc/tensor.hpp"

namespace memloc {

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kClsToken = 1;

struct ModelConfig {
  int n_layers = 6;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 64;
  int max_seq_len = 16;
  int n_classes = 2;
  /// Class counts of additional task heads (control setup); head 0 uses n_classes.
  std::vector<int> aux_head_classes;
  Pooling pooling = Pooling::FirstToken;
  std::uint64_t seed = 0;

  std::size_t head_count() const { return 1 + aux_head_classes.size(); }
  int classes_of_head(std::size_t head) const {
    return head == 0 ? n_classes : aux_head_classes.at(head - 1);
  }

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1) throw ConfigError("d_model and n_heads must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    for (int c : aux_head_classes)
      if (c < 2) throw ConfigError("auxiliary heads need >= 2 classes");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::FirstToken, "first-token"},
                                       {Pooling::LastToken, "last-token"},
                                       {Pooling::Mean, "mean"}})

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
                     {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                     {"n_classes", c.n_classes},     {"aux_head_classes", c.aux_head_classes},
                     {"pooling", c.pooling},         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.aux_head_classes = j.value("aux_head_classes", d.aux_head_classes);
  c.pooling = j.value("pooling", d.pooling);
  c.seed = j.value("seed", d.seed);
}

/// One pre-norm transformer block: attention and MLP sublayers with residuals.
template <class T>
struct basic_block {
  T ln1_gain, ln1_bias;
  T wq, bq, wk, bk, wv, bv, wo, bo;
  T ln2_gain, ln2_bias;
  T w1, b1, w2, b2;
};

/// Classification head: final norm followed by a linear map to class logits.
template <class T>
struct basic_head {
  T ln_gain, ln_bias, weight, bias;
};

template <class B, class F>
void visit_block(B& b, F&& f) {
  f("ln1.gain", b.ln1_gain);
  f("ln1.bias", b.ln1_bias);
  f("attn.wq", b.wq);
  f("attn.bq", b.bq);
  f("attn.wk", b.wk);
  f("attn.bk", b.bk);
  f("attn.wv", b.wv);
  f("attn.bv", b.bv);
  f("attn.wo", b.wo);
  f("attn.bo", b.bo);
  f("ln2.gain", b.ln2_gain);
  f("ln2.bias", b.ln2_bias);
  f("mlp.w1", b.w1);
  f("mlp.b1", b.b1);
  f("mlp.w2", b.w2);
  f("mlp.b2", b.b2);
}

template <class H, class F>
void visit_head(H& h, F&& f) {
  f("ln.gain", h.ln_gain);
  f("ln.bias", h.ln_bias);
  f("weight", h.weight);
  f("bias", h.bias);
}

/// Which parameter groups receive optimiser updates.
struct Trainability {
  bool embeddings = false;
  std::vector<bool> blocks;
  std::vector<bool> heads;

  static Trainability all(std::size_t layers, std::size_t heads, bool embeddings) {
    return {embeddings, std::vector<bool>(layers, true), std::vector<bool>(heads, true)};
  }
  static Trainability none(std::size_t layers, std::size_t heads) {
    return {false, std::vector<bool>(layers, false), std::vector<bool>(heads, false)};
  }
  friend bool operator==(const Trainability&, const Trainability&) = default;
};

struct ParamGroup {
  enum class Kind { Embedding, Block, Head } kind;
  std::size_t index = 0;
};

template <class S>
struct basic_model {
  ModelConfig config;
  basic_tensor<S> token_embedding;     // [vocab x d]
  basic_tensor<S> position_embedding;  // [max_seq_len x d]
  std::vector<basic_block<basic_tensor<S>>> blocks;
  std::vector<basic_head<basic_tensor<S>>> heads;
  Trainability trainable;

  template <class T>
  basic_model<T> cast() const {
    basic_model<T> out;
    out.config = config;
    out.token_embedding = token_embedding.template cast<T>();
    out.position_embedding = position_embedding.template cast<T>();
    out.trainable = trainable;
    out.blocks.resize(blocks.size());
    out.heads.resize(heads.size());
    std::vector<const basic_tensor<S>*> src;
    for_each_parameter(*this, [&](const std::string&, const basic_tensor<S>& t, ParamGroup) {
      src.push_back(&t);
    });
    std::size_t i = 0;
    for_each_parameter(out, [&](const std::string&, basic_tensor<T>& t, ParamGroup) {
      t = src[i++]->template cast<T>();
    });
    return out;
  }
};

using ModelState = basic_model<float>;

/// Visits every parameter tensor in the canonical order used by checkpoints,
/// optimiser state and gradient vectors.
template <class M, class F>
void for_each_parameter(M& model, F&& fn) {
  fn(std::string("embed.token"), model.token_embedding, ParamGroup{ParamGroup::Kind::Embedding, 0});
  fn(std::string("embed.position"), model.position_embedding,
     ParamGroup{ParamGroup::Kind::Embedding, 0});
  for (std::size_t l = 0; l < model.blocks.size(); ++l)
    visit_block(model.blocks[l], [&](const char* name, auto& t) {
      fn("block." + std::to_string(l) + "." + name, t, ParamGroup{ParamGroup::Kind::Block, l});
    });
  for (std::size_t h = 0; h < model.heads.size(); ++h)
    visit_head(model.heads[h], [&](const char* name, auto& t) {
      fn("head." + std::to_string(h) + "." + name, t, ParamGroup{ParamGroup::Kind::Head, h});
    });
}

inline bool is_trainable(const Trainability& t, ParamGroup g) {
  switch (g.kind) {
    case ParamGroup::Kind::Embedding: return t.embeddings;
    case ParamGroup::Kind::Block: return g.index < t.blocks.size() && t.blocks[g.index];
    case ParamGroup::Kind::Head: return g.index < t.heads.size() && t.heads[g.index];
  }
  return false;
}

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamGroup group;
};

template <class S>
std::vector<ParamInfo> parameter_layout(const basic_model<S>& model) {
  std::vector<ParamInfo> out;
  for_each_parameter(model, [&](const std::string& name, const basic_tensor<S>& t, ParamGroup g) {
    out.push_back({name, t.shape(), g});
  });
  return out;
}

/// Zero-filled model with the right shapes for `config`.
inline ModelState allocate_model(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  ModelState m;
  m.config = config;
  m.token_embedding = Tensor({static_cast<std::size_t>(config.vocab_size), d});
  m.position_embedding = Tensor({static_cast<std::size_t>(config.max_seq_len), d});
  m.blocks.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& b : m.blocks) {
    b.ln1_gain = Tensor({d}, 1.0f);
    b.ln1_bias = Tensor({d});
    b.wq = Tensor({d, d});
    b.bq = Tensor({d});
    b.wk = Tensor({d, d});
    b.bk = Tensor({d});
    b.wv = Tensor({d, d});
    b.bv = Tensor({d});
    b.wo = Tensor({d, d});
    b.bo = Tensor({d});
    b.ln2_gain = Tensor({d}, 1.0f);
    b.ln2_bias = Tensor({d});
    b.w1 = Tensor({d, ff});
    b.b1 = Tensor({ff});
    b.w2 = Tensor({ff, d});
    b.b2 = Tensor({d});
  }
  m.heads.resize(config.head_count());
  for (std::size_t h = 0; h < m.heads.size(); ++h) {
    auto& hd = m.heads[h];
    const auto c = static_cast<std::size_t>(config.classes_of_head(h));
    hd.ln_gain = Tensor({d}, 1.0f);
    hd.ln_bias = Tensor({d});
    hd.weight = Tensor({d, c});
    hd.bias = Tensor({c});
  }
  m.trainable = Trainability::all(m.blocks.size(), m.heads.size(), false);
  return m;
}

/// Deterministic initialisation from config.seed: normal weights scaled by
/// 1/sqrt(fan_in) (residual output projections further by 1/sqrt(2L)),
/// unit-variance embeddings, zero biases, unit norm gains.
inline ModelState build_model(const ModelConfig& config) {
  ModelState m = allocate_model(config);
  Rng rng(derive_seed(config.seed, 0x1417));
  const double residual = 1.0 / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](Tensor& t, double stddev) {
    for (auto& v : t.values()) v = static_cast<float>(standard_normal(rng) * stddev);
  };
  const double d = config.d_model;
  fill(m.token_embedding, 1.0);
  fill(m.position_embedding, 1.0);
  for (auto& b : m.blocks) {
    fill(b.wq, 1.0 / std::sqrt(d));
    fill(b.wk, 1.0 / std::sqrt(d));
    fill(b.wv, 1.0 / std::sqrt(d));
    fill(b.wo, residual / std::sqrt(d));
    fill(b.w1, 1.0 / std::sqrt(d));
    fill(b.w2, residual / std::sqrt(static_cast<double>(config.d_ff)));
  }
  for (auto& h : m.heads) fill(h.weight, 1.0 / std::sqrt(d));
  return m;
}

template <class S>
bool bitwise_equal(const basic_model<S>& a, const basic_model<S>& b) {
  if (!(a.config == b.config)) return false;
  std::vector<const basic_tensor<S>*> pa, pb;
  for_each_parameter(a, [&](const std::string&, const basic_tensor<S>& t, ParamGroup) { pa.push_back(&t); });
  for_each_parameter(b, [&](const std::string&, const basic_tensor<S>& t, ParamGroup) { pb.push_back(&t); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!bitwise_equal(*pa[i], *pb[i])) return false;
  return true;
}

template <class S>
bool embeddings_bitwise_equal(const basic_model<S>& a, const basic_model<S>& b) {
  return bitwise_equal(a.token_embedding, b.token_embedding) &&
         bitwise_equal(a.position_embedding, b.position_embedding);
}

/// Padded token-id matrix. Row e holds lengths[e] valid ids, the rest kPadToken.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch from_sequences(std::span<const std::vector<std::int32_t>* const> rows) {
    TokenBatch b;
    b.batch = rows.size();
    for (auto* r : rows) b.seq = std::max(b.seq, r->size());
    b.ids.assign(b.batch * b.seq, kPadToken);
    for (std::size_t e = 0; e < rows.size(); ++e) {
      if (rows[e]->empty()) throw DimensionError("empty token sequence");
      std::copy(rows[e]->begin(), rows[e]->end(), b.ids.begin() + static_cast<std::ptrdiff_t>(e * b.seq));
      b.lengths.push_back(rows[e]->size());
    }
    return b;
  }
};

/// A 1-based layer window [start, start + size).
struct LayerWindow {
  int start = 1;
  int size = 1;

  void validate(int n_layers) const {
    if (start < 1 || size < 1 || start + size - 1 > n_layers)
      throw ParameterError("window {start " + std::to_string(start) + ", size " +
                           std::to_string(size) + "} outside 1.." + std::to_string(n_layers));
  }
  bool contains(int layer) const { return layer >= start && layer < start + size; }
  friend bool operator==(const LayerWindow&, const LayerWindow&) = default;
};

/// All windows in sweep order: size 1..L, then start 1..L-size+1.
inline std::vector<LayerWindow> all_windows(int n_layers) {
  std::vector<LayerWindow> out;
  for (int w = 1; w <= n_layers; ++w)
    for (int s = 1; s + w - 1 <= n_layers; ++s) out.push_back({s, w});
  return out;
}

inline void require_same_config(const ModelConfig& a, const ModelConfig& b, const char* op) {
  // Seeds identify provenance, not shapes.
  ModelConfig x = a, y = b;
  x.seed = y.seed = 0;
  if (!(x == y)) throw IncompatibleModelError(std::string(op) + ": model configurations differ");
}

/// Copy of `base` whose blocks inside `window` come from `donor`.
/// Embeddings and heads always stay with `base`.
inline ModelState splice_layers(const ModelState& base, const ModelState& donor, LayerWindow window) {
  require_same_config(base.config, donor.config, "splice_layers");
  window.validate(base.config.n_layers);
  ModelState out = base;
  for (int l = window.start; l < window.start + window.size; ++l)
    out.blocks[static_cast<std::size_t>(l - 1)] = donor.blocks[static_cast<std::size_t>(l - 1)];
  return out;
}

/// Copy of `target` whose window blocks are replaced by `source`'s and marked
/// trainable. With freeze_rest every other block, the embeddings and the
/// heads are frozen; otherwise the target's trainability is kept elsewhere.
inline ModelState reset_layers(const ModelState& target, const ModelState& source,
                               LayerWindow window, bool freeze_rest) {
  require_same_config(target.config, source.config, "reset_layers");
  window.validate(target.config.n_layers);
  ModelState out = target;
  if (freeze_rest)
    out.trainable = Trainability::none(out.blocks.size(), out.heads.size());
  for (int l = window.start; l < window.start + window.size; ++l) {
    const auto i = static_cast<std::size_t>(l - 1);
    out.blocks[i] = source.blocks[i];
    out.trainable.blocks[i] = true;
  }
  return out;
}

/// Parameters bound as leaves on a tape.
template <class S>
struct model_vars {
  basic_var<S> token_embedding, position_embedding;
  std::vector<basic_block<basic_var<S>>> blocks;
  std::vector<basic_head<basic_var<S>>> heads;
};

/// Binds every parameter of `model` onto `tape`; only groups marked in
/// `mask` are tracked for gradients.
template <class S>
model_vars<S> bind_parameters(basic_tape<S>& tape, const basic_model<S>& model,
                              const Trainability& mask) {
  model_vars<S> v;
  v.blocks.resize(model.blocks.size());
  v.heads.resize(model.heads.size());
  std::vector<basic_var<S>> flat;
  for_each_parameter(model, [&](const std::string&, const basic_tensor<S>& t, ParamGroup g) {
    flat.push_back(tape.leaf(t, is_trainable(mask, g)));
  });
  std::size_t i = 0;
  for_each_parameter(v, [&](const std::string&, basic_var<S>& slot, ParamGroup) { slot = flat[i++]; });
  return v;
}

template <class S>
struct basic_forward_result {
  basic_var<S> logits;
  /// Pooled hidden state after each block (index 0 = block 1), [batch x d].
  std::vector<basic_tensor<S>> hidden;
  /// Pooled embedding output, filled when requested.
  std::optional<basic_tensor<S>> embedding_hidden;
};

struct ForwardOptions {
  std::size_t head = 0;
  bool capture = false;
  bool capture_embedding = false;
};

/// Builds the classifier graph on `tape`.
template <class S>
basic_forward_result<S> forward(basic_tape<S>& tape, const ModelConfig& config,
                                const model_vars<S>& p, const TokenBatch& batch,
                                const ForwardOptions& opt = {}) {
  if (opt.head >= p.heads.size()) throw IndexError("forward: no head " + std::to_string(opt.head));
  const std::size_t b = batch.batch, t = batch.seq;
  basic_forward_result<S> out;
  const auto d = static_cast<std::size_t>(config.d_model);
  if (b == 0) {
    const auto c = static_cast<std::size_t>(config.classes_of_head(opt.head));
    out.logits = tape.leaf(basic_tensor<S>({0, c}));
    if (opt.capture) out.hidden.assign(static_cast<std::size_t>(config.n_layers), basic_tensor<S>({0, d}));
    if (opt.capture_embedding) out.embedding_hidden = basic_tensor<S>({0, d});
    return out;
  }
  if (t > static_cast<std::size_t>(config.max_seq_len))
    throw IndexError("forward: sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  std::vector<std::int32_t> positions(b * t);
  for (std::size_t e = 0; e < b; ++e)
    for (std::size_t i = 0; i < t; ++i) positions[e * t + i] = static_cast<std::int32_t>(i);

  auto x = add(embedding(p.token_embedding, std::span<const std::int32_t>(batch.ids)),
               embedding(p.position_embedding, std::span<const std::int32_t>(positions)));
  const std::span<const std::size_t> lens(batch.lengths);
  if (opt.capture_embedding) out.embedding_hidden = pool(x, b, t, lens, config.pooling).value();
  for (const auto& blk : p.blocks) {
    auto h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    auto q = add_bias(matmul(h, blk.wq), blk.bq);
    auto k = add_bias(matmul(h, blk.wk), blk.bk);
    auto v = add_bias(matmul(h, blk.wv), blk.bv);
    auto a = attention(q, k, v, b, t, static_cast<std::size_t>(config.n_heads), lens);
    x = add(x, add_bias(matmul(a, blk.wo), blk.bo));
    auto h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
    auto f = gelu(add_bias(matmul(h2, blk.w1), blk.b1));
    x = add(x, add_bias(matmul(f, blk.w2), blk.b2));
    if (opt.capture) out.hidden.push_back(pool(x, b, t, lens, config.pooling).value());
  }
  const auto& head = p.heads[opt.head];
  auto pooled = pool(x, b, t, lens, config.pooling);
  auto z = layer_norm(pooled, head.ln_gain, head.ln_bias);
  out.logits = add_bias(matmul(z, head.weight), head.bias);
  return out;
}

/// Gradient-free forward pass returning logits and optionally hidden states.
struct Inference {
  Tensor logits;
  std::vector<Tensor> hidden;
  std::optional<Tensor> embedding_hidden;
};

inline Inference infer(const ModelState& model, const TokenBatch& batch, const ForwardOptions& opt = {}) {
  for (auto id : batch.ids)
    if (id < 0 || id >= model.config.vocab_size)
      throw IndexError("token id " + std::to_string(id) + " >= vocab_size " +
                       std::to_string(model.config.vocab_size));
  Tape tape(false);
  auto vars = bind_parameters(tape, model, Trainability::none(model.blocks.size(), model.heads.size()));
  auto r = forward(tape, model.config, vars, batch, opt);
  return {r.logits.value(), std::move(r.hidden), std::move(r.embedding_hidden)};
}

/// Argmax per row; ties go to the lowest class id.
template <class S>
std::vector<int> argmax_rows(const basic_tensor<S>& logits) {
  std::vector<int> out(logits.rows());
  const std::size_t c = logits.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace memloc
