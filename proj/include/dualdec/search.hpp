#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "dualdec/model_eval.hpp"

namespace dualdec {

// Decoding procedures. The synchronous dual beam advances rank-paired
// hypothesis pairs in lockstep and, because re-ranking re-pairs them, all
// prefix states are recomputed from scratch every step. Hypotheses under the
// attend-best / attend-average schemes are pruned by their scheme-context
// scores, while the pair-aligned joint log-probability is tracked alongside
// and decides the final ranking, so the returned score always equals a fresh
// teacher-forced rescore of the returned pair.

struct SearchConfig {
  int beam_size = 4;
  CouplingScheme coupling_scheme = CouplingScheme::RankAligned;
  int wait_k1 = 0;  // dummy PAD steps before side 1 starts; at most one side
  int wait_k2 = 0;
  std::optional<Ids> forced1;  // content ids (no BOS/EOS), emitted verbatim
  std::optional<Ids> forced2;
  int max_len = 64;
  real length_penalty_alpha = 1.0;  // 0 = raw joint log-probability
  bool allow_unk = true;

  void validate() const {
    if (beam_size < 1) throw ConfigError("search config: beam_size must be >= 1");
    if (max_len < 1) throw ConfigError("search config: max_len must be >= 1");
    if (wait_k1 < 0 || wait_k2 < 0) throw ConfigError("search config: negative wait-k");
    if (wait_k1 > 0 && wait_k2 > 0)
      throw ConfigError("search config: at most one side may be delayed");
    if (forced1 && static_cast<int>(forced1->size()) >= max_len)
      throw InputError("search config: forced sequence longer than max_len");
    if (forced2 && static_cast<int>(forced2->size()) >= max_len)
      throw InputError("search config: forced sequence longer than max_len");
  }
};

struct DualHypothesis {
  Ids tokens1;  // scored emissions (content, then EOS); PAD steps not stored
  Ids tokens2;
  real logp1 = 0.0;  // pair-aligned accumulated log-probabilities
  real logp2 = 0.0;
  real guide = 0.0;  // scheme-context score used for pruning
  bool done1 = false;
  bool done2 = false;

  real score(real alpha) const {
    const real l1 = static_cast<real>(std::max<size_t>(1, tokens1.size()));
    const real l2 = static_cast<real>(std::max<size_t>(1, tokens2.size()));
    return (logp1 + logp2) / std::pow(std::max(l1, l2), alpha);
  }
};

struct DualSearchResult {
  Ids tokens1;  // content tokens, EOS stripped
  Ids tokens2;
  real score = 0.0;
  real logp1 = 0.0;
  real logp2 = 0.0;
  bool truncated = false;
};

namespace search_detail {

inline Ids strip_eos(const Ids& toks) {
  Ids out = toks;
  if (!out.empty() && out.back() == specials::kEos) out.pop_back();
  return out;
}

// Emission sequence of one side at a given step count: wait-k PADs, scored
// tokens, then PAD once finished. Input prefix = BOS followed by this.
inline Ids build_input(const Ids& tokens, int wait_k, int steps) {
  Ids in;
  in.reserve(steps + 1);
  in.push_back(specials::kBos);
  for (int i = 0; i < wait_k && static_cast<int>(in.size()) <= steps; ++i)
    in.push_back(specials::kPad);
  for (TokenId t : tokens) {
    if (static_cast<int>(in.size()) > steps) break;
    in.push_back(t);
  }
  while (static_cast<int>(in.size()) <= steps) in.push_back(specials::kPad);
  return in;
}

struct SideCandidate {
  TokenId tok;      // PAD means "no scored emission this step"
  real lp_guide;
  real lp_true;
};

// Next-token candidates for one side of one hypothesis.
inline void side_candidates(const DualHypothesis& h, bool side1, int step,
                            const SearchConfig& cfg, const real* logits_guide,
                            const real* logits_true, int vocab, int width,
                            std::vector<SideCandidate>& out) {
  out.clear();
  const Ids& tokens = side1 ? h.tokens1 : h.tokens2;
  const bool done = side1 ? h.done1 : h.done2;
  const int wait = side1 ? cfg.wait_k1 : cfg.wait_k2;
  const auto& forced = side1 ? cfg.forced1 : cfg.forced2;

  if (done || step <= wait) {
    out.push_back({specials::kPad, 0.0, 0.0});
    return;
  }
  static thread_local std::vector<real> lp_guide, lp_true;
  log_softmax_row(logits_guide, vocab, lp_guide);
  log_softmax_row(logits_true, vocab, lp_true);

  if (forced) {
    const size_t pos = tokens.size();
    const TokenId tok =
        pos < forced->size() ? (*forced)[pos] : static_cast<TokenId>(specials::kEos);
    out.push_back({tok, lp_guide[tok], lp_true[tok]});
    return;
  }
  for (TokenId t = 0; t < vocab; ++t) {
    if (t == specials::kPad || t == specials::kBos) continue;
    if (t == specials::kUnk && !cfg.allow_unk) continue;
    out.push_back({t, lp_guide[t], lp_true[t]});
  }
  std::partial_sort(out.begin(), out.begin() + std::min<size_t>(width, out.size()), out.end(),
                    [](const SideCandidate& a, const SideCandidate& b) {
                      return a.lp_guide > b.lp_guide;
                    });
  if (out.size() > static_cast<size_t>(width)) out.resize(width);
}

inline bool better(const DualHypothesis& a, const DualHypothesis& b, real alpha) {
  const real sa = a.score(alpha), sb = b.score(alpha);
  if (sa != sb) return sa > sb;
  if (a.tokens1 != b.tokens1) return a.tokens1 < b.tokens1;  // deterministic ties
  return a.tokens2 < b.tokens2;
}

inline DualSearchResult to_result(const DualHypothesis& h, real alpha, bool truncated) {
  DualSearchResult r;
  r.tokens1 = strip_eos(h.tokens1);
  r.tokens2 = strip_eos(h.tokens2);
  r.score = h.score(alpha);
  r.logp1 = h.logp1;
  r.logp2 = h.logp2;
  r.truncated = truncated;
  return r;
}

}  // namespace search_detail

// Teacher-forced joint log-probability of an emission pair under the same
// wait-k layout the search uses; the score-consistency reference.
inline std::pair<real, real> pair_logprob(EvalRunner& runner, const Mat& enc, const Ids& tokens1,
                                          const Ids& tokens2, const SearchConfig& cfg) {
  const int steps = static_cast<int>(std::max(tokens1.size() + cfg.wait_k1,
                                              tokens2.size() + cfg.wait_k2));
  if (steps == 0) return {0.0, 0.0};
  const Ids in1 = search_detail::build_input(tokens1, cfg.wait_k1, steps - 1);
  const Ids in2 = search_detail::build_input(tokens2, cfg.wait_k2, steps - 1);
  Mat logits1, logits2;
  runner.dual_forward(enc, in1, in2, logits1, logits2);
  std::vector<real> lp;
  real sum1 = 0.0, sum2 = 0.0;
  for (int t = 0; t < steps; ++t) {
    // scored emission of side s at step t+1 sits at input position t+1 when
    // present; PAD emissions contribute zero
    auto score_side = [&](const Ids& tokens, int wait, const Mat& logits, real& acc) {
      const int emit_index = t - wait;  // index into the scored token list
      if (emit_index < 0 || emit_index >= static_cast<int>(tokens.size())) return;
      log_softmax_row(logits.row(t), logits.cols, lp);
      acc += lp[tokens[emit_index]];
    };
    score_side(tokens1, cfg.wait_k1, logits1, sum1);
    score_side(tokens2, cfg.wait_k2, logits2, sum2);
  }
  return {sum1, sum2};
}

// Synchronous greedy decoding: at each step every live side emits the argmax
// of its conditional given both prefixes; finished or delayed sides emit PAD.
inline DualSearchResult greedy_dual_decode(const DualModel& model, const Ids& src,
                                           const SearchConfig& cfg) {
  cfg.validate();
  EvalRunner runner(model);
  const Mat enc = runner.encode(src);
  const int vocab = model.cfg.tgt_vocab;

  DualHypothesis h;
  std::vector<search_detail::SideCandidate> cand;
  for (int step = 1; step <= cfg.max_len; ++step) {
    if (h.done1 && h.done2) break;
    const Ids in1 = search_detail::build_input(h.tokens1, cfg.wait_k1, step - 1);
    const Ids in2 = search_detail::build_input(h.tokens2, cfg.wait_k2, step - 1);
    Mat logits1, logits2;
    runner.dual_forward(enc, in1, in2, logits1, logits2, step - 1);
    search_detail::side_candidates(h, true, step, cfg, logits1.row(step - 1),
                                   logits1.row(step - 1), vocab, 1, cand);
    const auto c1 = cand[0];
    search_detail::side_candidates(h, false, step, cfg, logits2.row(step - 1),
                                   logits2.row(step - 1), vocab, 1, cand);
    const auto c2 = cand[0];
    if (c1.tok != specials::kPad) {
      h.tokens1.push_back(c1.tok);
      h.logp1 += c1.lp_true;
      if (c1.tok == specials::kEos) h.done1 = true;
    }
    if (c2.tok != specials::kPad) {
      h.tokens2.push_back(c2.tok);
      h.logp2 += c2.lp_true;
      if (c2.tok == specials::kEos) h.done2 = true;
    }
  }
  return search_detail::to_result(h, cfg.length_penalty_alpha, !(h.done1 && h.done2));
}

// Synchronous dual beam search. Every step recomputes all live prefix pairs
// (layer-synchronous, under the configured coupling scheme), expands both
// sides of each pair, re-scores and re-ranks jointly, then keeps the top-k
// pairs. Finished pairs collect in a pool; the best pair-aligned score wins.
inline DualSearchResult dual_beam_search(const DualModel& model, const Ids& src,
                                         const SearchConfig& cfg) {
  cfg.validate();
  EvalRunner runner(model);
  const Mat enc = runner.encode(src);
  const int vocab = model.cfg.tgt_vocab;
  const real alpha = cfg.length_penalty_alpha;
  const bool aligned = cfg.coupling_scheme == CouplingScheme::RankAligned;
  const int width = std::min<int>(vocab, std::max(2 * cfg.beam_size, 8));

  std::vector<DualHypothesis> live{DualHypothesis{}};
  std::vector<DualHypothesis> finished;
  std::vector<search_detail::SideCandidate> c1s, c2s;

  for (int step = 1; step <= cfg.max_len && !live.empty(); ++step) {
    std::vector<Ids> in1s, in2s;
    in1s.reserve(live.size());
    in2s.reserve(live.size());
    for (const auto& h : live) {
      in1s.push_back(search_detail::build_input(h.tokens1, cfg.wait_k1, step - 1));
      in2s.push_back(search_detail::build_input(h.tokens2, cfg.wait_k2, step - 1));
    }
    std::vector<Mat> guide1, guide2;
    runner.dual_forward_multi(enc, in1s, in2s, cfg.coupling_scheme, guide1, guide2, step - 1);
    std::vector<Mat>* true1 = &guide1;
    std::vector<Mat>* true2 = &guide2;
    std::vector<Mat> aligned1, aligned2;
    if (!aligned) {
      // pair-aligned probabilities for the exact joint score
      runner.dual_forward_multi(enc, in1s, in2s, CouplingScheme::RankAligned, aligned1, aligned2,
                                step - 1);
      true1 = &aligned1;
      true2 = &aligned2;
    }

    std::vector<DualHypothesis> candidates;
    for (size_t r = 0; r < live.size(); ++r) {
      const auto& h = live[r];
      search_detail::side_candidates(h, true, step, cfg, guide1[r].row(step - 1),
                                     (*true1)[r].row(step - 1), vocab, width, c1s);
      search_detail::side_candidates(h, false, step, cfg, guide2[r].row(step - 1),
                                     (*true2)[r].row(step - 1), vocab, width, c2s);
      for (const auto& a : c1s)
        for (const auto& b : c2s) {
          DualHypothesis n = h;
          n.guide += a.lp_guide + b.lp_guide;
          if (a.tok != specials::kPad) {
            n.tokens1.push_back(a.tok);
            n.logp1 += a.lp_true;
            if (a.tok == specials::kEos) n.done1 = true;
          }
          if (b.tok != specials::kPad) {
            n.tokens2.push_back(b.tok);
            n.logp2 += b.lp_true;
            if (b.tok == specials::kEos) n.done2 = true;
          }
          candidates.push_back(std::move(n));
        }
    }

    // rank by the scheme's guide score (equal to the joint score when
    // rank-aligned), then re-pair by keeping the top-k as the new beam
    auto guide_rank = [&](const DualHypothesis& a, const DualHypothesis& b) {
      if (aligned) return search_detail::better(a, b, alpha);
      if (a.guide != b.guide) return a.guide > b.guide;
      if (a.tokens1 != b.tokens1) return a.tokens1 < b.tokens1;
      return a.tokens2 < b.tokens2;
    };
    std::sort(candidates.begin(), candidates.end(), guide_rank);

    live.clear();
    for (auto& c : candidates) {
      if (c.done1 && c.done2) {
        finished.push_back(std::move(c));
      } else if (static_cast<int>(live.size()) < cfg.beam_size) {
        live.push_back(std::move(c));
      }
    }
  }

  const bool truncated = finished.empty();
  std::vector<DualHypothesis>& pool = truncated ? live : finished;
  if (pool.empty()) throw InternalError("dual_beam_search: empty hypothesis pool");
  auto best = pool.begin();
  for (auto it = pool.begin(); it != pool.end(); ++it)
    if (search_detail::better(*it, *best, alpha)) best = it;
  return search_detail::to_result(*best, alpha, truncated);
}

// Two-pass sequential decoding: pass 1 decodes first_side while the other
// side emits only PAD context; pass 2 re-decodes with pass 1's output (or a
// supplied reference) forced. Needs no additional training.
inline DualSearchResult sequential_decode(const DualModel& model, const Ids& src, int first_side,
                                          const SearchConfig& cfg) {
  if (first_side != 1 && first_side != 2) throw ConfigError("sequential_decode: side must be 1 or 2");
  cfg.validate();

  SearchConfig pass2 = cfg;
  auto& first_forced = first_side == 1 ? pass2.forced1 : pass2.forced2;
  if (!first_forced) {
    // pass 1: the other side is silenced by a wait longer than the run
    SearchConfig pass1 = cfg;
    pass1.forced1.reset();
    pass1.forced2.reset();
    (first_side == 1 ? pass1.wait_k2 : pass1.wait_k1) = cfg.max_len + 1;
    (first_side == 1 ? pass1.wait_k1 : pass1.wait_k2) = 0;
    DualSearchResult r1 = cfg.beam_size == 1 ? greedy_dual_decode(model, src, pass1)
                                             : dual_beam_search(model, src, pass1);
    first_forced = first_side == 1 ? r1.tokens1 : r1.tokens2;
    if (static_cast<int>(first_forced->size()) >= cfg.max_len)
      first_forced->resize(cfg.max_len - 1);
  }
  return cfg.beam_size == 1 ? greedy_dual_decode(model, src, pass2)
                            : dual_beam_search(model, src, pass2);
}

// Bi-directional selection: keep the higher-scoring direction, reversing the
// right-to-left output when it wins. Exact ties keep left-to-right.
inline Ids bidi_select(const Ids& y_l2r, real score_l2r, const Ids& y_r2l, real score_r2l) {
  if (score_r2l > score_l2r) return Ids(y_r2l.rbegin(), y_r2l.rend());
  return y_l2r;
}

// ----------------------------- single-decoder search -----------------------------

struct SingleSearchResult {
  Ids tokens;
  real logp = 0.0;
  real score = 0.0;
  bool truncated = false;
};

// Standard beam search over one decoder (used by single / independent models
// for pseudo-data generation and tag-steered translation).
inline SingleSearchResult single_beam_search(const DualModel& model, int dec_idx, const Ids& src,
                                             const SearchConfig& cfg) {
  cfg.validate();
  EvalRunner runner(model);
  const Mat enc = runner.encode(src);
  const int vocab = model.cfg.tgt_vocab;
  const real alpha = cfg.length_penalty_alpha;
  const int width = std::min<int>(vocab, std::max(2 * cfg.beam_size, 8));

  struct Hyp {
    Ids tokens;
    real logp = 0.0;
    bool done = false;
    real score(real a) const {
      return logp / std::pow(static_cast<real>(std::max<size_t>(1, tokens.size())), a);
    }
  };
  std::vector<Hyp> live{Hyp{}};
  std::vector<Hyp> finished;
  std::vector<real> lp;
  Mat logits;

  for (int step = 1; step <= cfg.max_len && !live.empty(); ++step) {
    std::vector<Hyp> candidates;
    for (const auto& h : live) {
      Ids in = search_detail::build_input(h.tokens, 0, step - 1);
      runner.single_forward(enc, dec_idx, in, logits, step - 1);
      log_softmax_row(logits.row(step - 1), vocab, lp);
      std::vector<std::pair<real, TokenId>> cands;
      for (TokenId t = 0; t < vocab; ++t) {
        if (t == specials::kPad || t == specials::kBos) continue;
        if (t == specials::kUnk && !cfg.allow_unk) continue;
        cands.push_back({lp[t], t});
      }
      std::partial_sort(cands.begin(), cands.begin() + std::min<size_t>(width, cands.size()),
                        cands.end(), std::greater<>());
      cands.resize(std::min<size_t>(width, cands.size()));
      for (auto [l, t] : cands) {
        Hyp n = h;
        n.tokens.push_back(t);
        n.logp += l;
        n.done = t == specials::kEos;
        candidates.push_back(std::move(n));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [&](const Hyp& a, const Hyp& b) {
      const real sa = a.score(alpha), sb = b.score(alpha);
      if (sa != sb) return sa > sb;
      return a.tokens < b.tokens;
    });
    live.clear();
    for (auto& c : candidates) {
      if (c.done) {
        finished.push_back(std::move(c));
      } else if (static_cast<int>(live.size()) < cfg.beam_size) {
        live.push_back(std::move(c));
      }
    }
  }
  const bool truncated = finished.empty();
  auto& pool = truncated ? live : finished;
  if (pool.empty()) throw InternalError("single_beam_search: empty hypothesis pool");
  auto best = pool.begin();
  for (auto it = pool.begin(); it != pool.end(); ++it)
    if (it->score(alpha) > best->score(alpha)) best = it;
  SingleSearchResult r;
  r.tokens = search_detail::strip_eos(best->tokens);
  r.logp = best->logp;
  r.score = best->score(alpha);
  r.truncated = truncated;
  return r;
}

}  // namespace dualdec
