#pragma once

#include <cmath>
#include <vector>

#include "dualdec/model.hpp"

namespace dualdec {

// Inference-only forward path on plain buffers, used by the decoders. Beam
// search recomputes every hypothesis prefix each step, so this path has to be
// cheap; it mirrors the tape forward exactly (asserted by tests) but skips
// the autograd machinery. One EvalRunner per thread: it reuses scratch.

enum class CouplingScheme { RankAligned, AttendBest, AttendAverage };

inline const char* to_string(CouplingScheme s) {
  switch (s) {
    case CouplingScheme::RankAligned: return "rank-aligned";
    case CouplingScheme::AttendBest: return "attend-best";
    case CouplingScheme::AttendAverage: return "attend-average";
  }
  return "?";
}

inline CouplingScheme coupling_scheme_from_string(const std::string& s) {
  if (s == "rank-aligned") return CouplingScheme::RankAligned;
  if (s == "attend-best") return CouplingScheme::AttendBest;
  if (s == "attend-average") return CouplingScheme::AttendAverage;
  throw ConfigError("unknown coupling scheme: " + s);
}

struct Mat {
  int rows = 0, cols = 0;
  std::vector<real> a;

  Mat() = default;
  Mat(int r, int c) { resize(r, c); }
  void resize(int r, int c) {
    rows = r;
    cols = c;
    a.assign(static_cast<size_t>(r) * c, 0.0);
  }
  real* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const real* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
  real& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  real at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
};

namespace evalk {

// x[m×k] · w[k×n] + b -> out[m×n]
inline void linear(const Mat& x, const LinearP& p, Mat& out) {
  const int m = x.rows, k = x.cols, n = p.w.cols();
  const auto& w = p.w.data();
  const auto& b = p.b.data();
  out.resize(m, n);
  for (int i = 0; i < m; ++i) {
    const real* xi = x.row(i);
    real* oi = out.row(i);
    for (int j = 0; j < n; ++j) oi[j] = b[j];
    for (int l = 0; l < k; ++l) {
      const real xv = xi[l];
      if (xv == 0.0) continue;
      const real* wl = w.data() + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) oi[j] += xv * wl[j];
    }
  }
}

inline void layer_norm(const Mat& x, const NormP& p, real eps, Mat& out) {
  const int m = x.rows, d = x.cols;
  const auto& gain = p.gain.data();
  const auto& bias = p.bias.data();
  out.resize(m, d);
  for (int i = 0; i < m; ++i) {
    const real* xi = x.row(i);
    real* oi = out.row(i);
    real mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    real var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= d;
    const real inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) oi[j] = (xi[j] - mean) * inv * gain[j] + bias[j];
  }
}

inline void add_inplace(Mat& x, const Mat& y) {
  for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += y.a[i];
}

// Multi-head attention; mask is a [Lq×Lk] keep-mask or null to keep all keys.
// Fully masked rows contribute zero when zero_empty holds, else they throw.
struct AttnScratch {
  Mat q, k, v, ctx, out;
  std::vector<real> scores;
};

inline void mha(const AttnP& p, const Mat& xq, const Mat& xkv, int heads,
                const std::vector<uint8_t>* mask, bool zero_empty, Mat& result,
                AttnScratch& s) {
  const int lq = xq.rows, lk = xkv.rows, d = xq.cols;
  const int dh = d / heads;
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));
  linear(xq, p.q, s.q);
  linear(xkv, p.k, s.k);
  linear(xkv, p.v, s.v);
  s.ctx.resize(lq, d);
  s.scores.assign(lk, 0.0);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < lq; ++i) {
      const real* qi = s.q.row(i) + off;
      real mx = -std::numeric_limits<real>::infinity();
      bool any = false;
      for (int j = 0; j < lk; ++j) {
        if (mask && !(*mask)[static_cast<size_t>(i) * lk + j]) continue;
        const real* kj = s.k.row(j) + off;
        real dot = 0.0;
        for (int c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        s.scores[j] = dot * inv_sqrt;
        any = true;
        if (s.scores[j] > mx) mx = s.scores[j];
      }
      real* ci = s.ctx.row(i) + off;
      if (!any) {
        if (!zero_empty) throw DegenerateMaskError("mha: fully masked query row");
        for (int c = 0; c < dh; ++c) ci[c] = 0.0;
        continue;
      }
      real z = 0.0;
      for (int j = 0; j < lk; ++j) {
        if (mask && !(*mask)[static_cast<size_t>(i) * lk + j]) {
          s.scores[j] = 0.0;
          continue;
        }
        s.scores[j] = std::exp(s.scores[j] - mx);
        z += s.scores[j];
      }
      for (int c = 0; c < dh; ++c) ci[c] = 0.0;
      const real inv_z = 1.0 / z;
      for (int j = 0; j < lk; ++j) {
        const real w = s.scores[j] * inv_z;
        if (w == 0.0) continue;
        const real* vj = s.v.row(j) + off;
        for (int c = 0; c < dh; ++c) ci[c] += w * vj[c];
      }
    }
  }
  linear(s.ctx, p.o, result);
}

inline void ffn(const Mat& x_normed, const LinearP& ff1, const LinearP& ff2, Mat& out,
                Mat& hidden) {
  linear(x_normed, ff1, hidden);
  for (auto& v : hidden.a) v = std::max<real>(0.0, v);
  linear(hidden, ff2, out);
}

}  // namespace evalk

class EvalRunner {
 public:
  explicit EvalRunner(const DualModel& m) : m_(m) {}

  const DualModel& model() const { return m_; }

  Mat embed(const Tensor& table, const Ids& ids) const {
    const int d = m_.cfg.d_model;
    const int n = static_cast<int>(ids.size());
    Mat x(n, d);
    const real sc = std::sqrt(static_cast<real>(d));
    const auto& emb = table.data();
    const auto pe = sinusoidal_encoding(n, d);
    for (int i = 0; i < n; ++i) {
      if (ids[i] < 0 || ids[i] >= table.rows()) throw InputError("embed: id out of vocabulary");
      const real* e = emb.data() + static_cast<size_t>(ids[i]) * d;
      real* xi = x.row(i);
      for (int j = 0; j < d; ++j) xi[j] = e[j] * sc + pe[static_cast<size_t>(i) * d + j];
    }
    return x;
  }

  Mat encode(const Ids& src) {
    if (src.empty()) throw InputError("encode: empty source");
    const auto& c = m_.cfg;
    Mat x = embed(m_.encoder.emb, src);
    for (const auto& l : m_.encoder.layers) {
      evalk::layer_norm(x, l.self_norm, c.ln_eps, normed_);
      evalk::mha(l.self, normed_, normed_, c.heads, nullptr, false, sub_out_, attn_);
      evalk::add_inplace(x, sub_out_);
      evalk::layer_norm(x, l.ff_norm, c.ln_eps, normed_);
      evalk::ffn(normed_, l.ff1, l.ff2, sub_out_, ff_hidden_);
      evalk::add_inplace(x, sub_out_);
    }
    Mat out;
    evalk::layer_norm(x, m_.encoder.final_norm, c.ln_eps, out);
    return out;
  }

  // Teacher-forced joint forward for one prefix pair (common length).
  // Logits rows are produced from from_row on; earlier rows are zero.
  void dual_forward(const Mat& enc, const Ids& in1, const Ids& in2, Mat& logits1, Mat& logits2,
                    int from_row = 0) {
    std::vector<Ids> a{in1}, b{in2};
    std::vector<Mat> l1, l2;
    dual_forward_multi(enc, a, b, CouplingScheme::RankAligned, l1, l2, from_row);
    logits1 = std::move(l1[0]);
    logits2 = std::move(l2[0]);
  }

  // Lockstep forward over R prefix pairs. The coupling scheme picks the
  // partner states each decoder's cross-attention sees: its own pair, the
  // rank-0 pair, or theelement-wise average over all pairs.
  void dual_forward_multi(const Mat& enc, const std::vector<Ids>& in1s,
                          const std::vector<Ids>& in2s, CouplingScheme scheme,
                          std::vector<Mat>& logits1, std::vector<Mat>& logits2, int from_row) {
    const auto& c = m_.cfg;
    if (c.num_decoders() != 2) throw ConfigError("dual_forward: model has a single decoder");
    const size_t r_count = in1s.size();
    if (r_count == 0 || in2s.size() != r_count) throw InputError("dual_forward: bad pair count");
    const size_t len = in1s[0].size();
    for (size_t r = 0; r < r_count; ++r) {
      detail_model::check_prefix(in1s[r], c.tgt_vocab);
      detail_model::check_prefix(in2s[r], c.tgt_vocab);
      if (in1s[r].size() != len || in2s[r].size() != len)
        throw InputError("dual_forward: prefixes must share one common length");
    }

    std::vector<Mat> x1(r_count), x2(r_count), n1(r_count), n2(r_count);
    std::vector<std::vector<uint8_t>> self1(r_count), self2(r_count), cross1(r_count),
        cross2(r_count);
    for (size_t r = 0; r < r_count; ++r) {
      x1[r] = embed(m_.decoders[0].emb, in1s[r]);
      x2[r] = embed(m_.decoders[1].emb, in2s[r]);
      self1[r] = masks::causal(in1s[r]);
      self2[r] = masks::causal(in2s[r]);
      cross1[r] = masks::cross_strict(static_cast<int>(len), in2s[r]);
      cross2[r] = masks::cross_strict(static_cast<int>(len), in1s[r]);
    }
    // attend-average uses a union keep-mask over the live pairs
    std::vector<uint8_t> avg_cross1, avg_cross2;
    Mat avg1, avg2;
    if (scheme == CouplingScheme::AttendAverage) {
      avg_cross1 = union_mask(cross1);
      avg_cross2 = union_mask(cross2);
    }

    for (int l = 0; l < c.dec_layers; ++l) {
      if (scheme == CouplingScheme::AttendAverage) {
        average_states(x2, avg2);
        average_states(x1, avg1);
      }
      for (size_t r = 0; r < r_count; ++r) {
        const Mat& partner_of_1 = scheme == CouplingScheme::RankAligned ? x2[r]
                                  : scheme == CouplingScheme::AttendBest ? x2[0]
                                                                         : avg2;
        const Mat& partner_of_2 = scheme == CouplingScheme::RankAligned ? x1[r]
                                  : scheme == CouplingScheme::AttendBest ? x1[0]
                                                                         : avg1;
        const std::vector<uint8_t>& cm1 =
            scheme == CouplingScheme::RankAligned ? cross1[r]
            : scheme == CouplingScheme::AttendBest ? cross1[0]
                                                   : avg_cross1;
        const std::vector<uint8_t>& cm2 =
            scheme == CouplingScheme::RankAligned ? cross2[r]
            : scheme == CouplingScheme::AttendBest ? cross2[0]
                                                   : avg_cross2;
        dec_block_eval(m_.decoders[0].layers[l], x1[r], enc, partner_of_1, self1[r], &cm1, n1[r]);
        dec_block_eval(m_.decoders[1].layers[l], x2[r], enc, partner_of_2, self2[r], &cm2, n2[r]);
      }
      std::swap(x1, n1);
      std::swap(x2, n2);
    }
    logits1.resize(r_count);
    logits2.resize(r_count);
    for (size_t r = 0; r < r_count; ++r) {
      evalk::layer_norm(x1[r], m_.decoders[0].final_norm, c.ln_eps, normed_);
      output_logits(m_.decoders[0], normed_, from_row, logits1[r]);
      evalk::layer_norm(x2[r], m_.decoders[1].final_norm, c.ln_eps, normed_);
      output_logits(m_.decoders[1], normed_, from_row, logits2[r]);
    }
  }

  // One decoder in isolation (single model, or one side of independent).
  void single_forward(const Mat& enc, int dec_idx, const Ids& in, Mat& logits, int from_row = 0) {
    const auto& c = m_.cfg;
    if (c.has_cross()) throw ConfigError("single_forward: dual-coupled model requires dual_forward");
    if (dec_idx < 0 || dec_idx >= static_cast<int>(m_.decoders.size()))
      throw ConfigError("single_forward: no such decoder");
    detail_model::check_prefix(in, c.tgt_vocab);
    const auto& dec = m_.decoders[dec_idx];
    Mat x = embed(dec.emb, in);
    const auto self_mask = masks::causal(in);
    Mat next;
    const Mat no_partner;
    for (const auto& l : dec.layers) {
      dec_block_eval(l, x, enc, no_partner, self_mask, nullptr, next);
      std::swap(x, next);
    }
    evalk::layer_norm(x, dec.final_norm, c.ln_eps, normed_);
    output_logits(dec, normed_, from_row, logits);
  }

 private:
  const DualModel& m_;
  Mat normed_, sub_out_, ff_hidden_;
  evalk::AttnScratch attn_;

  static std::vector<uint8_t> union_mask(const std::vector<std::vector<uint8_t>>& masks_in) {
    std::vector<uint8_t> out = masks_in[0];
    for (size_t r = 1; r < masks_in.size(); ++r)
      for (size_t i = 0; i < out.size(); ++i) out[i] = out[i] | masks_in[r][i];
    return out;
  }

  static void average_states(const std::vector<Mat>& xs, Mat& out) {
    out.resize(xs[0].rows, xs[0].cols);
    for (const auto& x : xs)
      for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += x.a[i];
    const real inv = 1.0 / static_cast<real>(xs.size());
    for (auto& v : out.a) v *= inv;
  }

  void dec_block_eval(const DecLayerP& l, const Mat& x_in, const Mat& enc, const Mat& partner,
                      const std::vector<uint8_t>& self_mask, const std::vector<uint8_t>* cross_mask,
                      Mat& out) {
    const auto& c = m_.cfg;
    out = x_in;
    auto self_sub = [&] {
      evalk::layer_norm(out, l.self_norm, c.ln_eps, normed_);
      evalk::mha(l.self, normed_, normed_, c.heads, &self_mask, false, sub_out_, attn_);
      evalk::add_inplace(out, sub_out_);
    };
    auto encdec_sub = [&] {
      evalk::layer_norm(out, l.encdec_norm, c.ln_eps, normed_);
      evalk::mha(l.encdec, normed_, enc, c.heads, nullptr, false, sub_out_, attn_);
      evalk::add_inplace(out, sub_out_);
    };
    auto cross_sub = [&] {
      if (!l.cross) return;
      evalk::layer_norm(out, *l.cross_norm, c.ln_eps, normed_);
      evalk::mha(*l.cross, normed_, partner, c.heads, cross_mask, true, sub_out_, attn_);
      evalk::add_inplace(out, sub_out_);
    };
    self_sub();
    if (c.cross_attn_position == CrossAttnPosition::BeforeEncDec) {
      cross_sub();
      encdec_sub();
    } else {
      encdec_sub();
      cross_sub();
    }
    evalk::layer_norm(out, l.ff_norm, c.ln_eps, normed_);
    evalk::ffn(normed_, l.ff1, l.ff2, sub_out_, ff_hidden_);
    evalk::add_inplace(out, sub_out_);
  }

  void output_logits(const DecoderP& dec, const Mat& h, int from_row, Mat& logits) {
    const int v = dec.out.rows(), d = dec.out.cols();
    logits.resize(h.rows, v);
    const auto& w = dec.out.data();
    for (int i = std::max(0, from_row); i < h.rows; ++i) {
      const real* hi = h.row(i);
      real* li = logits.row(i);
      for (int t = 0; t < v; ++t) {
        const real* wt = w.data() + static_cast<size_t>(t) * d;
        real acc = 0.0;
        for (int j = 0; j < d; ++j) acc += hi[j] * wt[j];
        li[t] = acc;
      }
    }
  }
};

// Log-softmax of one logits row into out (size v).
inline void log_softmax_row(const real* logits, int v, std::vector<real>& out) {
  out.resize(v);
  real mx = -std::numeric_limits<real>::infinity();
  for (int i = 0; i < v; ++i) mx = std::max(mx, logits[i]);
  real z = 0.0;
  for (int i = 0; i < v; ++i) z += std::exp(logits[i] - mx);
  const real lz = mx + std::log(z);
  for (int i = 0; i < v; ++i) out[i] = logits[i] - lz;
}

}  // namespace dualdec
