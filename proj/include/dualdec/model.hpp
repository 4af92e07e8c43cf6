#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualdec/common.hpp"
#include "dualdec/tensor.hpp"

namespace dualdec {

// Transformer encoder with one or two decoders. Dual coupling adds a
// decoder cross-attention sublayer per block: each decoder attends the other
// decoder's previous-layer states under a strict causal mask, so the logits
// at prefix position t depend on the partner prefix only at positions < t.
// Blocks are pre-norm residual, which makes a zeroed cross-value projection
// contribute exactly nothing.

enum class Coupling { Single, Independent, Dual };
enum class CrossAttnPosition { AfterEncDec, BeforeEncDec };
enum class TieMode { PerDecoder, AllFour };

inline const char* to_string(Coupling c) {
  switch (c) {
    case Coupling::Single: return "single";
    case Coupling::Independent: return "independent";
    case Coupling::Dual: return "dual";
  }
  return "?";
}

inline Coupling coupling_from_string(const std::string& s) {
  if (s == "single") return Coupling::Single;
  if (s == "independent") return Coupling::Independent;
  if (s == "dual") return Coupling::Dual;
  throw ConfigError("unknown coupling: " + s);
}

struct ModelConfig {
  int d_model = 512;
  int d_ff = 2048;
  int heads = 8;
  int enc_layers = 6;
  int dec_layers = 6;
  int src_vocab = 0;
  int tgt_vocab = 0;
  Coupling coupling = Coupling::Dual;
  CrossAttnPosition cross_attn_position = CrossAttnPosition::AfterEncDec;
  TieMode tie_mode = TieMode::AllFour;
  real dropout = 0.1;
  real ln_eps = 1e-5;

  int num_decoders() const { return coupling == Coupling::Single ? 1 : 2; }
  bool has_cross() const { return coupling == Coupling::Dual; }
  int head_dim() const { return d_model / heads; }

  void validate() const {
    if (d_model <= 0 || d_ff <= 0 || heads <= 0 || enc_layers <= 0 || dec_layers <= 0)
      throw ConfigError("model config: non-positive dimension");
    if (d_model % heads != 0) throw ConfigError("model config: d_model not divisible by heads");
    if (src_vocab <= specials::kCount || tgt_vocab <= specials::kCount)
      throw ConfigError("model config: vocab must exceed the special symbols");
    if (dropout < 0 || dropout >= 1) throw ConfigError("model config: dropout out of range");
  }

  bool dims_match(const ModelConfig& o) const {
    return d_model == o.d_model && d_ff == o.d_ff && heads == o.heads &&
           enc_layers == o.enc_layers && dec_layers == o.dec_layers &&
           src_vocab == o.src_vocab && tgt_vocab == o.tgt_vocab;
  }
};

// ----------------------------- parameters -----------------------------

struct LinearP {
  Tensor w;  // [in × out]
  Tensor b;  // [out]
};

struct AttnP {
  LinearP q, k, v, o;
};

struct NormP {
  Tensor gain, bias;
};

struct EncLayerP {
  NormP self_norm;
  AttnP self;
  NormP ff_norm;
  LinearP ff1, ff2;
};

struct DecLayerP {
  NormP self_norm;
  AttnP self;
  NormP encdec_norm;
  AttnP encdec;
  std::optional<NormP> cross_norm;  // dual coupling only
  std::optional<AttnP> cross;
  NormP ff_norm;
  LinearP ff1, ff2;
};

struct EncoderP {
  Tensor emb;  // [src_vocab × d_model]
  std::vector<EncLayerP> layers;
  NormP final_norm;
};

struct DecoderP {
  Tensor emb;  // [tgt_vocab × d_model]; aliases out under tying
  Tensor out;  // [tgt_vocab × d_model], logits = h · out^T
  std::vector<DecLayerP> layers;
  NormP final_norm;
};

namespace init {

inline Tensor normal(std::vector<int> shape, real stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& x : t.data()) x = rng.normal(0.0, stddev);
  return t;
}

inline Tensor xavier(int rows, int cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols}, true);
  const real limit = std::sqrt(6.0 / (rows + cols));
  for (auto& x : t.data()) x = rng.uniform(-limit, limit);
  return t;
}

inline Tensor zeros_p(std::vector<int> shape) { return Tensor::zeros(std::move(shape), true); }

inline Tensor ones_p(int n) {
  Tensor t = Tensor::zeros({n}, true);
  for (auto& x : t.data()) x = 1.0;
  return t;
}

inline LinearP linear(int in, int out, Rng& rng) {
  return {xavier(in, out, rng), zeros_p({out})};
}

inline AttnP attn(int d, Rng& rng) {
  return {linear(d, d, rng), linear(d, d, rng), linear(d, d, rng), linear(d, d, rng)};
}

inline NormP norm(int d) { return {ones_p(d), zeros_p({d})}; }

inline EncLayerP enc_layer(const ModelConfig& c, Rng& rng) {
  return {norm(c.d_model), attn(c.d_model, rng), norm(c.d_model),
          linear(c.d_model, c.d_ff, rng), linear(c.d_ff, c.d_model, rng)};
}

inline DecLayerP dec_layer(const ModelConfig& c, bool with_cross, Rng& rng) {
  DecLayerP l;
  l.self_norm = norm(c.d_model);
  l.self = attn(c.d_model, rng);
  l.encdec_norm = norm(c.d_model);
  l.encdec = attn(c.d_model, rng);
  if (with_cross) {
    l.cross_norm = norm(c.d_model);
    l.cross = attn(c.d_model, rng);
  }
  l.ff_norm = norm(c.d_model);
  l.ff1 = linear(c.d_model, c.d_ff, rng);
  l.ff2 = linear(c.d_ff, c.d_model, rng);
  return l;
}

}  // namespace init

class DualModel {
 public:
  ModelConfig cfg;
  EncoderP encoder;
  std::vector<DecoderP> decoders;

  DualModel() = default;

  static DualModel random_init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DualModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, "model-init"));
    m.encoder.emb = init::normal({cfg.src_vocab, cfg.d_model},
                                 1.0 / std::sqrt(static_cast<real>(cfg.d_model)), rng);
    for (int l = 0; l < cfg.enc_layers; ++l) m.encoder.layers.push_back(init::enc_layer(cfg, rng));
    m.encoder.final_norm = init::norm(cfg.d_model);

    Tensor shared_emb;  // all-four tying: one matrix for both decoders, in and out
    for (int d = 0; d < cfg.num_decoders(); ++d) {
      DecoderP dec;
      if (cfg.tie_mode == TieMode::AllFour && cfg.num_decoders() == 2) {
        if (!shared_emb.defined())
          shared_emb = init::normal({cfg.tgt_vocab, cfg.d_model},
                                    1.0 / std::sqrt(static_cast<real>(cfg.d_model)), rng);
        dec.emb = shared_emb;
        dec.out = shared_emb;
      } else {
        dec.emb = init::normal({cfg.tgt_vocab, cfg.d_model},
                               1.0 / std::sqrt(static_cast<real>(cfg.d_model)), rng);
        dec.out = dec.emb;  // input/output tying within a decoder
      }
      for (int l = 0; l < cfg.dec_layers; ++l)
        dec.layers.push_back(init::dec_layer(cfg, cfg.has_cross(), rng));
      dec.final_norm = init::norm(cfg.d_model);
      m.decoders.push_back(std::move(dec));
    }
    return m;
  }

  // Unique parameters in construction order: aliased views appear once under
  // their canonical name.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    std::vector<TensorNode*> seen;
    auto push = [&](const std::string& name, const Tensor& t) {
      for (auto* n : seen)
        if (n == t.node().get()) return;
      seen.push_back(t.node().get());
      out.emplace_back(name, t);
    };
    auto push_linear = [&](const std::string& p, const LinearP& l) {
      push(p + ".w", l.w);
      push(p + ".b", l.b);
    };
    auto push_attn = [&](const std::string& p, const AttnP& a) {
      push_linear(p + ".q", a.q);
      push_linear(p + ".k", a.k);
      push_linear(p + ".v", a.v);
      push_linear(p + ".o", a.o);
    };
    auto push_norm = [&](const std::string& p, const NormP& n) {
      push(p + ".gain", n.gain);
      push(p + ".bias", n.bias);
    };
    push("enc.emb", encoder.emb);
    for (size_t l = 0; l < encoder.layers.size(); ++l) {
      const std::string p = "enc.l" + std::to_string(l);
      const auto& layer = encoder.layers[l];
      push_norm(p + ".self_norm", layer.self_norm);
      push_attn(p + ".self", layer.self);
      push_norm(p + ".ff_norm", layer.ff_norm);
      push_linear(p + ".ff1", layer.ff1);
      push_linear(p + ".ff2", layer.ff2);
    }
    push_norm("enc.final_norm", encoder.final_norm);
    for (size_t d = 0; d < decoders.size(); ++d) {
      const std::string dp = "dec" + std::to_string(d + 1);
      const auto& dec = decoders[d];
      push(dp + ".emb", dec.emb);
      push(dp + ".out", dec.out);
      for (size_t l = 0; l < dec.layers.size(); ++l) {
        const std::string p = dp + ".l" + std::to_string(l);
        const auto& layer = dec.layers[l];
        push_norm(p + ".self_norm", layer.self_norm);
        push_attn(p + ".self", layer.self);
        push_norm(p + ".encdec_norm", layer.encdec_norm);
        push_attn(p + ".encdec", layer.encdec);
        if (layer.cross) {
          push_norm(p + ".cross_norm", *layer.cross_norm);
          push_attn(p + ".cross", *layer.cross);
        }
        push_norm(p + ".ff_norm", layer.ff_norm);
        push_linear(p + ".ff1", layer.ff1);
        push_linear(p + ".ff2", layer.ff2);
      }
      push_norm(dp + ".final_norm", dec.final_norm);
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grads() {
    for (auto& t : parameters()) t.zero_grad();
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (auto& t : parameters()) n += t.numel();
    return n;
  }

  // Deep copy with fresh storage; aliasing structure is preserved.
  DualModel clone() const {
    DualModel m = *this;
    std::vector<std::pair<TensorNode*, Tensor>> mapping;
    auto cloned = [&](const Tensor& t) -> Tensor {
      for (auto& [node, copy] : mapping)
        if (node == t.node().get()) return copy;
      Tensor c = Tensor::from_values(t.shape(), t.data(), t.requires_grad());
      mapping.emplace_back(t.node().get(), c);
      return c;
    };
    auto fix_linear = [&](LinearP& l) {
      l.w = cloned(l.w);
      l.b = cloned(l.b);
    };
    auto fix_attn = [&](AttnP& a) {
      fix_linear(a.q);
      fix_linear(a.k);
      fix_linear(a.v);
      fix_linear(a.o);
    };
    auto fix_norm = [&](NormP& n) {
      n.gain = cloned(n.gain);
      n.bias = cloned(n.bias);
    };
    m.encoder.emb = cloned(encoder.emb);
    for (auto& l : m.encoder.layers) {
      fix_norm(l.self_norm);
      fix_attn(l.self);
      fix_norm(l.ff_norm);
      fix_linear(l.ff1);
      fix_linear(l.ff2);
    }
    fix_norm(m.encoder.final_norm);
    for (auto& dec : m.decoders) {
      dec.emb = cloned(dec.emb);
      dec.out = cloned(dec.out);
      for (auto& l : dec.layers) {
        fix_norm(l.self_norm);
        fix_attn(l.self);
        fix_norm(l.encdec_norm);
        fix_attn(l.encdec);
        if (l.cross) {
          fix_norm(*l.cross_norm);
          fix_attn(*l.cross);
        }
        fix_norm(l.ff_norm);
        fix_linear(l.ff1);
        fix_linear(l.ff2);
      }
      fix_norm(dec.final_norm);
    }
    return m;
  }

  // Overwrites this model's parameter values from another model with the
  // same architecture (used to restore the best checkpoint after training).
  void copy_values_from(const DualModel& other) {
    auto mine = named_parameters();
    auto theirs = other.named_parameters();
    if (mine.size() != theirs.size()) throw CheckpointError("copy_values_from: parameter mismatch");
    for (size_t i = 0; i < mine.size(); ++i) {
      if (mine[i].first != theirs[i].first || mine[i].second.numel() != theirs[i].second.numel())
        throw CheckpointError("copy_values_from: parameter mismatch at " + mine[i].first);
      mine[i].second.data() = theirs[i].second.data();
    }
  }
};

// ----------------------------- positional encoding -----------------------------

inline std::vector<real> sinusoidal_encoding(int len, int d_model) {
  std::vector<real> pe(static_cast<size_t>(len) * d_model, 0.0);
  for (int pos = 0; pos < len; ++pos)
    for (int i = 0; i < d_model; i += 2) {
      const real angle = pos / std::pow(10000.0, static_cast<real>(i) / d_model);
      pe[static_cast<size_t>(pos) * d_model + i] = std::sin(angle);
      if (i + 1 < d_model) pe[static_cast<size_t>(pos) * d_model + i + 1] = std::cos(angle);
    }
  return pe;
}

// ----------------------------- masks -----------------------------

// Boolean keep-masks, row-major [q_len × k_len].
namespace masks {

// self-attention: j <= i and key token is not PAD
inline std::vector<uint8_t> causal(const Ids& ids) {
  const int n = static_cast<int>(ids.size());
  std::vector<uint8_t> m(static_cast<size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j)
      m[static_cast<size_t>(i) * n + j] = (ids[j] != specials::kPad) ? 1 : 0;
  return m;
}

// decoder cross-attention: strictly j < i, partner PAD keys dropped.
// Row 0 has no admissible key; that row's attention output is defined as zero.
inline std::vector<uint8_t> cross_strict(int q_len, const Ids& partner_ids) {
  const int n = static_cast<int>(partner_ids.size());
  std::vector<uint8_t> m(static_cast<size_t>(q_len) * n, 0);
  for (int i = 0; i < q_len; ++i)
    for (int j = 0; j < i && j < n; ++j)
      m[static_cast<size_t>(i) * n + j] = (partner_ids[j] != specials::kPad) ? 1 : 0;
  return m;
}

}  // namespace masks

// ----------------------------- tape forward -----------------------------

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training and dropout > 0
};

namespace fwd {

inline Tensor dropout(const Tensor& x, real p, const ForwardOptions& opt) {
  if (!opt.training || p <= 0.0) return x;
  if (!opt.dropout_rng) throw ConfigError("training forward needs a dropout rng");
  std::vector<real> mask(x.numel());
  const real keep = 1.0 - p;
  for (auto& v : mask) v = (opt.dropout_rng->uniform() < keep) ? 1.0 / keep : 0.0;
  return mul_const_mask(x, std::move(mask));
}

inline Tensor linear(const LinearP& p, const Tensor& x) {
  return add_row(matmul(x, p.w), p.b);
}

inline Tensor norm(const NormP& p, const Tensor& x, real eps) {
  return layer_norm(x, p.gain, p.bias, eps);
}

// Multi-head attention. zero_empty_rows permits fully masked query rows
// (the first row under the strict cross mask); they contribute zero.
inline Tensor mha(const AttnP& p, const Tensor& xq, const Tensor& xkv, int heads,
                  const std::vector<uint8_t>* mask, bool zero_empty_rows = false) {
  const int d = xq.cols();
  const int dh = d / heads;
  Tensor q = linear(p.q, xq);
  Tensor k = linear(p.k, xkv);
  Tensor v = linear(p.v, xkv);
  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    Tensor w = zero_empty_rows ? softmax_rows_zero_empty(scores, mask)
                               : softmax_rows(scores, mask);
    head_outs.push_back(matmul(w, vh));
  }
  Tensor cat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return linear(p.o, cat);
}

inline Tensor ffn(const DecLayerP& l, const Tensor& x) {
  return linear(l.ff2, relu(linear(l.ff1, x)));
}

inline Tensor ffn(const EncLayerP& l, const Tensor& x) {
  return linear(l.ff2, relu(linear(l.ff1, x)));
}

}  // namespace fwd

// Embeds, scales by sqrt(d_model) and adds sinusoidal positions.
inline Tensor embed_tokens(const Tensor& table, const Ids& ids, int d_model) {
  Tensor e = scale(embedding(table, ids), std::sqrt(static_cast<real>(d_model)));
  return add_const(e, sinusoidal_encoding(static_cast<int>(ids.size()), d_model));
}

// Encoder stack; returns one final-normed state per source position.
inline Tensor encode(const DualModel& m, const Ids& src,
                     const ForwardOptions& opt = {}) {
  if (src.empty()) throw InputError("encode: empty source");
  const auto& c = m.cfg;
  Tensor x = fwd::dropout(embed_tokens(m.encoder.emb, src, c.d_model), c.dropout, opt);
  for (const auto& l : m.encoder.layers) {
    Tensor normed = fwd::norm(l.self_norm, x, c.ln_eps);
    x = add(x, fwd::dropout(fwd::mha(l.self, normed, normed, c.heads, nullptr), c.dropout, opt));
    x = add(x, fwd::dropout(fwd::ffn(l, fwd::norm(l.ff_norm, x, c.ln_eps)), c.dropout, opt));
  }
  return fwd::norm(m.encoder.final_norm, x, c.ln_eps);
}

namespace detail_model {

inline void check_prefix(const Ids& prefix, int vocab) {
  if (prefix.empty() || prefix[0] != specials::kBos)
    throw InputError("decoder prefix must start with BOS");
  for (TokenId t : prefix)
    if (t < 0 || t >= vocab) throw InputError("decoder prefix id out of vocabulary");
}

// One decoder block. partner: previous-layer states of the other decoder
// (empty tensor when coupling has no cross sublayer).
inline Tensor dec_block(const DualModel& m, const DecLayerP& l, Tensor x, const Tensor& enc,
                        const Tensor& partner, const std::vector<uint8_t>& self_mask,
                        const std::vector<uint8_t>* cross_mask, const ForwardOptions& opt) {
  const auto& c = m.cfg;
  auto self_sub = [&](Tensor h) {
    Tensor normed = fwd::norm(l.self_norm, h, c.ln_eps);
    return add(h, fwd::dropout(fwd::mha(l.self, normed, normed, c.heads, &self_mask), c.dropout, opt));
  };
  auto encdec_sub = [&](Tensor h) {
    Tensor normed = fwd::norm(l.encdec_norm, h, c.ln_eps);
    return add(h, fwd::dropout(fwd::mha(l.encdec, normed, enc, c.heads, nullptr), c.dropout, opt));
  };
  auto cross_sub = [&](Tensor h) {
    if (!l.cross) return h;
    Tensor normed = fwd::norm(*l.cross_norm, h, c.ln_eps);
    return add(h, fwd::dropout(
                      fwd::mha(*l.cross, normed, partner, c.heads, cross_mask, true),
                      c.dropout, opt));
  };
  x = self_sub(x);
  if (c.cross_attn_position == CrossAttnPosition::BeforeEncDec) {
    x = cross_sub(x);
    x = encdec_sub(x);
  } else {
    x = encdec_sub(x);
    x = cross_sub(x);
  }
  return add(x, fwd::dropout(fwd::ffn(l, fwd::norm(l.ff_norm, x, c.ln_eps)), c.dropout, opt));
}

inline Tensor output_logits(const DecoderP& dec, const Tensor& h) {
  return matmul_nt(h, dec.out);
}

}  // namespace detail_model

// Joint teacher-forced forward over both decoders, layer-synchronous: each
// block consumes the partner's previous-layer states. Prefixes must start
// with BOS and be padded (PAD) to a common length by the caller if unequal.
inline std::pair<Tensor, Tensor> dual_forward(const DualModel& m, const Tensor& enc_states,
                                              const Ids& prefix1, const Ids& prefix2,
                                              const ForwardOptions& opt = {}) {
  const auto& c = m.cfg;
  if (c.num_decoders() != 2) throw ConfigError("dual_forward: model has a single decoder");
  detail_model::check_prefix(prefix1, c.tgt_vocab);
  detail_model::check_prefix(prefix2, c.tgt_vocab);
  if (prefix1.size() != prefix2.size())
    throw InputError("dual_forward: prefixes must be padded to a common length");

  Tensor x1 = fwd::dropout(embed_tokens(m.decoders[0].emb, prefix1, c.d_model), c.dropout, opt);
  Tensor x2 = fwd::dropout(embed_tokens(m.decoders[1].emb, prefix2, c.d_model), c.dropout, opt);
  const auto self1 = masks::causal(prefix1);
  const auto self2 = masks::causal(prefix2);
  const auto cross1 = masks::cross_strict(static_cast<int>(prefix1.size()), prefix2);
  const auto cross2 = masks::cross_strict(static_cast<int>(prefix2.size()), prefix1);

  for (int l = 0; l < c.dec_layers; ++l) {
    Tensor n1 = detail_model::dec_block(m, m.decoders[0].layers[l], x1, enc_states, x2, self1,
                                        &cross1, opt);
    Tensor n2 = detail_model::dec_block(m, m.decoders[1].layers[l], x2, enc_states, x1, self2,
                                        &cross2, opt);
    x1 = n1;
    x2 = n2;
  }
  x1 = fwd::norm(m.decoders[0].final_norm, x1, c.ln_eps);
  x2 = fwd::norm(m.decoders[1].final_norm, x2, c.ln_eps);
  return {detail_model::output_logits(m.decoders[0], x1),
          detail_model::output_logits(m.decoders[1], x2)};
}

// Teacher-forced forward through one decoder (single-decoder models, or one
// side of an independent model).
inline Tensor single_forward(const DualModel& m, int decoder_index, const Tensor& enc_states,
                             const Ids& prefix, const ForwardOptions& opt = {}) {
  const auto& c = m.cfg;
  if (decoder_index < 0 || decoder_index >= static_cast<int>(m.decoders.size()))
    throw ConfigError("single_forward: no such decoder");
  if (c.has_cross())
    throw ConfigError("single_forward: dual-coupled model requires dual_forward");
  detail_model::check_prefix(prefix, c.tgt_vocab);
  const auto& dec = m.decoders[decoder_index];
  Tensor x = fwd::dropout(embed_tokens(dec.emb, prefix, c.d_model), c.dropout, opt);
  const auto self_mask = masks::causal(prefix);
  Tensor none;
  for (const auto& l : dec.layers)
    x = detail_model::dec_block(m, l, x, enc_states, none, self_mask, nullptr, opt);
  x = fwd::norm(dec.final_norm, x, c.ln_eps);
  return detail_model::output_logits(dec, x);
}

// ----------------------------- pretrained init -----------------------------

// Builds a dual (or independent) model from a single-decoder multilingual
// checkpoint: encoder copied, both decoders start as bit-identical copies of
// the pretrained decoder, cross-attention projections freshly random.
inline DualModel init_from_pretrained(const DualModel& pretrained, const ModelConfig& cfg,
                                      uint64_t seed) {
  cfg.validate();
  if (pretrained.cfg.coupling != Coupling::Single)
    throw CheckpointError("init_from_pretrained: checkpoint is not a single-decoder model");
  if (!pretrained.cfg.dims_match(cfg))
    throw CheckpointError("init_from_pretrained: dimension mismatch with pretrained checkpoint");
  if (cfg.coupling == Coupling::Single)
    throw ConfigError("init_from_pretrained: target config must have two decoders");

  DualModel m = DualModel::random_init(cfg, seed);  // provides fresh cross projections
  const DualModel src = pretrained.clone();

  auto copy_vals = [](Tensor dst, const Tensor& from) { dst.data() = from.data(); };
  auto copy_linear = [&](LinearP& dst, const LinearP& from) {
    copy_vals(dst.w, from.w);
    copy_vals(dst.b, from.b);
  };
  auto copy_attn = [&](AttnP& dst, const AttnP& from) {
    copy_linear(dst.q, from.q);
    copy_linear(dst.k, from.k);
    copy_linear(dst.v, from.v);
    copy_linear(dst.o, from.o);
  };
  auto copy_norm = [&](NormP& dst, const NormP& from) {
    copy_vals(dst.gain, from.gain);
    copy_vals(dst.bias, from.bias);
  };

  copy_vals(m.encoder.emb, src.encoder.emb);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    copy_norm(m.encoder.layers[l].self_norm, src.encoder.layers[l].self_norm);
    copy_attn(m.encoder.layers[l].self, src.encoder.layers[l].self);
    copy_norm(m.encoder.layers[l].ff_norm, src.encoder.layers[l].ff_norm);
    copy_linear(m.encoder.layers[l].ff1, src.encoder.layers[l].ff1);
    copy_linear(m.encoder.layers[l].ff2, src.encoder.layers[l].ff2);
  }
  copy_norm(m.encoder.final_norm, src.encoder.final_norm);

  for (auto& dec : m.decoders) {
    copy_vals(dec.emb, src.decoders[0].emb);  // out aliases emb per tie mode
    for (int l = 0; l < cfg.dec_layers; ++l) {
      copy_norm(dec.layers[l].self_norm, src.decoders[0].layers[l].self_norm);
      copy_attn(dec.layers[l].self, src.decoders[0].layers[l].self);
      copy_norm(dec.layers[l].encdec_norm, src.decoders[0].layers[l].encdec_norm);
      copy_attn(dec.layers[l].encdec, src.decoders[0].layers[l].encdec);
      copy_norm(dec.layers[l].ff_norm, src.decoders[0].layers[l].ff_norm);
      copy_linear(dec.layers[l].ff1, src.decoders[0].layers[l].ff1);
      copy_linear(dec.layers[l].ff2, src.decoders[0].layers[l].ff2);
    }
    copy_norm(dec.final_norm, src.decoders[0].final_norm);
  }
  return m;
}

// ----------------------------- checkpoints -----------------------------

namespace ckpt {

inline constexpr char kMagic[4] = {'D', 'D', 'C', 'K'};
inline constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline void write_string(std::string& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

inline std::string read_string(const std::string& in, size_t& pos) {
  const uint32_t len = read_pod<uint32_t>(in, pos);
  if (pos + len > in.size()) throw CheckpointError("checkpoint truncated");
  std::string s = in.substr(pos, len);
  pos += len;
  return s;
}

}  // namespace ckpt

std::string checkpoint_bytes(const DualModel& m);
DualModel model_from_bytes(const std::string& bytes);

void save_checkpoint(const DualModel& m, const std::string& path);
DualModel load_checkpoint(const std::string& path,
                          std::optional<Coupling> expected = std::nullopt);

}  // namespace dualdec

#include "dualdec/model_io.hpp"
