#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualdec/data.hpp"
#include "dualdec/model.hpp"
#include "dualdec/optim.hpp"

namespace dualdec {

// Joint maximum-likelihood training: sum of both decoders' per-token
// log-likelihoods, early stopping on the dev metric with patience, and the
// two-stage pretrain-then-fine-tune procedure.

enum class LossNorm { PerToken, RawSum };
enum class TrainMode { Scratch, Finetune };

struct TrainConfig {
  int64_t batch_tokens = 8192;
  int64_t max_steps = 100000;
  int patience = 4;          // checkpoints without improvement before stopping
  int64_t eval_interval = 0;  // must be set explicitly; no hard-coded default
  uint64_t seed = 1;
  TrainMode mode = TrainMode::Scratch;
  real peak_lr = 7e-4;       // scratch default; fine-tuning uses fixed 8e-5
  int64_t warmup_steps = 4000;
  std::optional<real> fixed_lr;  // overrides the schedule when set
  real label_smoothing = 0.1;
  LossNorm loss_norm = LossNorm::PerToken;
  int train_wait_k1 = 0;  // delayed-PAD fine-tuning; at most one nonzero
  int train_wait_k2 = 0;

  void validate() const {
    if (patience < 1) throw ConfigError("train config: patience must be >= 1");
    if (eval_interval <= 0) throw ConfigError("train config: eval_interval must be set");
    if (batch_tokens <= 0) throw ConfigError("train config: batch_tokens must be positive");
    if (train_wait_k1 > 0 && train_wait_k2 > 0)
      throw ConfigError("train config: at most one wait-k side");
  }

  OptimizerState make_optimizer() const {
    OptimizerState st;
    if (fixed_lr) {
      st.mode = LrMode::Fixed;
      st.peak_lr = *fixed_lr;
    } else if (mode == TrainMode::Finetune) {
      st.mode = LrMode::Fixed;
      st.peak_lr = 8e-5;
    } else {
      st.mode = LrMode::InverseSqrt;
      st.peak_lr = peak_lr;
      st.warmup_steps = warmup_steps;
    }
    return st;
  }
};

struct MetricsRecord {
  int64_t step = 0;
  real train_loss = 0.0;
  real dev_loss = 0.0;
  real lr = 0.0;
  int64_t wall_ms = -1;  // negative: not recorded

  std::string to_json_line() const {
    std::ostringstream os;
    os.precision(12);
    os << "{\"step\":" << step << ",\"train_loss\":" << train_loss
       << ",\"dev_loss\":" << dev_loss << ",\"lr\":" << lr;
    if (wall_ms >= 0) os << ",\"wall_ms\":" << wall_ms;
    os << "}";
    return os.str();
  }
};

struct TrainResult {
  std::vector<MetricsRecord> log;
  int64_t best_step = 0;
  real best_dev = 0.0;
  int64_t steps_taken = 0;
};

struct LossParts {
  Tensor loss;       // scalar tape node
  real nll1 = 0.0;   // per-token (or raw) negative log-likelihood, side 1
  real nll2 = 0.0;
  int64_t tokens1 = 0;
  int64_t tokens2 = 0;
};

namespace train_detail {

// Applies the delayed-PAD wait-k transform to one framed target:
// BOS [PAD x k] tokens ... EOS.
inline Ids delay_target(const Ids& framed, int k) {
  if (k <= 0) return framed;
  Ids out;
  out.reserve(framed.size() + k);
  out.push_back(specials::kBos);
  for (int i = 0; i < k; ++i) out.push_back(specials::kPad);
  out.insert(out.end(), framed.begin() + 1, framed.end());
  return out;
}

struct PreparedTarget {
  Ids input;                  // BOS-led, PAD padded to the common length
  Ids output;                 // next-token targets, PAD where inactive
  std::vector<real> weight;   // per-position loss weight
};

// Teacher-forcing split: input = framed[:-1], output = framed[1:], then PAD
// to len. PAD outputs carry zero loss weight.
inline PreparedTarget prepare_target(const Ids& framed, size_t len, real sample_weight) {
  PreparedTarget p;
  p.input.assign(framed.begin(), framed.end() - 1);
  p.output.assign(framed.begin() + 1, framed.end());
  p.input.resize(len, specials::kPad);
  p.output.resize(len, specials::kPad);
  p.weight.assign(len, 0.0);
  for (size_t i = 0; i < len; ++i)
    if (p.output[i] != specials::kPad) p.weight[i] = sample_weight;
  return p;
}

// Cross-entropy of one decoder's logits against the prepared target with
// label smoothing, accumulated as a weighted sum over positions.
inline Tensor target_nll(const Tensor& logits, const PreparedTarget& t, real smoothing) {
  const int len = logits.rows();
  const int vocab = logits.cols();
  Tensor logp = log_softmax_rows(logits);
  // pick matrix: (1-eps) on the gold id, eps/V everywhere, negated
  std::vector<real> pick(static_cast<size_t>(len) * vocab, 0.0);
  for (int i = 0; i < len; ++i) {
    const real w = t.weight[i];
    if (w == 0.0) continue;
    const real uniform = smoothing / vocab;
    for (int v = 0; v < vocab; ++v) pick[static_cast<size_t>(i) * vocab + v] = -w * uniform;
    pick[static_cast<size_t>(i) * vocab + t.output[i]] -= w * (1.0 - smoothing);
  }
  return weighted_sum(logp, std::move(pick));
}

}  // namespace train_detail

// Negative joint log-likelihood of a batch. Dual and independent models both
// use the sum over the two decoders; normalization is per target token within
// each decoder by default (documented, switchable to the raw sum).
inline LossParts joint_loss(const DualModel& model, const std::vector<TriSample>& batch,
                            const TrainConfig& cfg = {}, const ForwardOptions& opt = {}) {
  if (batch.empty()) throw InputError("joint_loss: empty batch");
  const bool dual_data = model.cfg.num_decoders() == 2;
  std::vector<Tensor> terms1, terms2;
  int64_t tokens1 = 0, tokens2 = 0;
  real wsum1 = 0.0, wsum2 = 0.0;

  for (const auto& raw : batch) {
    raw.validate(dual_data);
    TriSample s = raw;
    if (cfg.train_wait_k1 > 0) s.tgt1 = train_detail::delay_target(s.tgt1, cfg.train_wait_k1);
    if (cfg.train_wait_k2 > 0 && !s.tgt2.empty())
      s.tgt2 = train_detail::delay_target(s.tgt2, cfg.train_wait_k2);
    Tensor enc = encode(model, s.src, opt);
    if (dual_data) {
      const size_t len = std::max(s.tgt1.size(), s.tgt2.size()) - 1;
      auto t1 = train_detail::prepare_target(s.tgt1, len, s.weight);
      auto t2 = train_detail::prepare_target(s.tgt2, len, s.weight);
      auto [logits1, logits2] = dual_forward(model, enc, t1.input, t2.input, opt);
      terms1.push_back(train_detail::target_nll(logits1, t1, cfg.label_smoothing));
      terms2.push_back(train_detail::target_nll(logits2, t2, cfg.label_smoothing));
      for (real w : t1.weight) {
        tokens1 += w != 0.0;
        wsum1 += w;
      }
      for (real w : t2.weight) {
        tokens2 += w != 0.0;
        wsum2 += w;
      }
    } else {
      const size_t len = s.tgt1.size() - 1;
      auto t1 = train_detail::prepare_target(s.tgt1, len, s.weight);
      Tensor logits = single_forward(model, 0, enc, t1.input, opt);
      terms1.push_back(train_detail::target_nll(logits, t1, cfg.label_smoothing));
      for (real w : t1.weight) {
        tokens1 += w != 0.0;
        wsum1 += w;
      }
    }
  }

  auto accumulate = [](std::vector<Tensor>& terms) {
    Tensor total = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return total;
  };

  LossParts parts;
  parts.tokens1 = tokens1;
  parts.tokens2 = tokens2;
  Tensor nll1 = accumulate(terms1);
  if (cfg.loss_norm == LossNorm::PerToken && wsum1 > 0) nll1 = scale(nll1, 1.0 / wsum1);
  parts.nll1 = nll1.value();
  if (!terms2.empty()) {
    Tensor nll2 = accumulate(terms2);
    if (cfg.loss_norm == LossNorm::PerToken && wsum2 > 0) nll2 = scale(nll2, 1.0 / wsum2);
    parts.nll2 = nll2.value();
    parts.loss = add(nll1, nll2);
  } else {
    parts.loss = nll1;
  }
  if (!std::isfinite(parts.loss.value())) throw NumericError("joint_loss: non-finite loss");
  return parts;
}

inline real eval_loss(const DualModel& model, const std::vector<TriSample>& dataset,
                      const TrainConfig& cfg) {
  NoGradGuard ng;
  return joint_loss(model, dataset, cfg).loss.value();
}

// Teacher-forced argmax accuracy over both targets' non-PAD positions.
inline real token_accuracy(const DualModel& model, const std::vector<TriSample>& dataset) {
  NoGradGuard ng;
  int64_t correct = 0, total = 0;
  const bool dual_data = model.cfg.num_decoders() == 2;
  for (const auto& s : dataset) {
    Tensor enc = encode(model, s.src);
    auto count_side = [&](const Tensor& logits, const train_detail::PreparedTarget& t) {
      for (int i = 0; i < logits.rows(); ++i) {
        if (t.weight[i] == 0.0) continue;
        int best = 0;
        for (int v = 1; v < logits.cols(); ++v)
          if (logits.at(i, v) > logits.at(i, best)) best = v;
        correct += best == t.output[i];
        ++total;
      }
    };
    if (dual_data) {
      const size_t len = std::max(s.tgt1.size(), s.tgt2.size()) - 1;
      auto t1 = train_detail::prepare_target(s.tgt1, len, 1.0);
      auto t2 = train_detail::prepare_target(s.tgt2, len, 1.0);
      auto [l1, l2] = dual_forward(model, enc, t1.input, t2.input);
      count_side(l1, t1);
      count_side(l2, t2);
    } else {
      auto t1 = train_detail::prepare_target(s.tgt1, s.tgt1.size() - 1, 1.0);
      count_side(single_forward(model, 0, enc, t1.input), t1);
    }
  }
  return total == 0 ? 0.0 : static_cast<real>(correct) / static_cast<real>(total);
}

// Length-bucketed batches: sorted by max target length, filled while
// n_samples * max_len stays within the token budget.
inline std::vector<std::vector<size_t>> make_batches(const std::vector<TriSample>& data,
                                                     int64_t batch_tokens) {
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto sample_len = [&](size_t i) {
    return std::max(data[i].tgt1.size(), data[i].tgt2.size());
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return sample_len(a) < sample_len(b); });
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> current;
  size_t max_len = 0;
  for (size_t idx : order) {
    const size_t len = sample_len(idx);
    const size_t new_max = std::max(max_len, len);
    if (!current.empty() &&
        static_cast<int64_t>((current.size() + 1) * new_max) > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      max_len = 0;
    }
    current.push_back(idx);
    max_len = std::max(max_len, len);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

// Optional external dev scorer (e.g. dev BLEU); higher is better. The default
// selection metric is dev loss, lower is better.
using DevScorer = std::function<real(const DualModel&)>;

inline TrainResult train(DualModel& model, const std::vector<TriSample>& train_set,
                         const std::vector<TriSample>& dev_set, const TrainConfig& cfg,
                         const DevScorer& dev_scorer = nullptr) {
  cfg.validate();
  if (train_set.empty()) throw InputError("train: empty dataset");
  if (dev_set.empty()) throw InputError("train: empty dev set");

  auto params = model.parameters();
  OptimizerState opt_state = cfg.make_optimizer();
  Rng rng(derive_seed(cfg.seed, "train"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  ForwardOptions fopt;
  fopt.training = true;
  fopt.dropout_rng = &dropout_rng;

  auto batches = make_batches(train_set, cfg.batch_tokens);

  TrainResult result;
  DualModel best = model.clone();
  real best_metric = 0.0;
  bool have_best = false;
  int bad_checkpoints = 0;
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<size_t> batch_order(batches.size());
  for (size_t i = 0; i < batch_order.size(); ++i) batch_order[i] = i;
  size_t cursor = batches.size();  // trigger reshuffle on first use

  real last_train_loss = 0.0;
  for (int64_t step = 1; step <= cfg.max_steps; ++step) {
    if (cursor >= batch_order.size()) {
      rng.shuffle(batch_order);
      cursor = 0;
    }
    const auto& batch_idx = batches[batch_order[cursor++]];
    std::vector<TriSample> batch;
    batch.reserve(batch_idx.size());
    for (size_t i : batch_idx) batch.push_back(train_set[i]);

    model.zero_grads();
    LossParts parts = joint_loss(model, batch, cfg, fopt);
    backward(parts.loss);
    adam_step(params, opt_state);
    last_train_loss = parts.loss.value();
    result.steps_taken = step;

    if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
      // dev metric: loss (lower better) or external scorer (higher better)
      const real dev_loss = eval_loss(model, dev_set, cfg);
      const real metric = dev_scorer ? -dev_scorer(model) : dev_loss;
      MetricsRecord rec;
      rec.step = step;
      rec.train_loss = last_train_loss;
      rec.dev_loss = dev_loss;
      rec.lr = lr_schedule(opt_state.step, opt_state);
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      result.log.push_back(rec);

      if (!have_best || metric < best_metric) {
        best_metric = metric;
        have_best = true;
        best.copy_values_from(model);
        result.best_step = step;
        result.best_dev = dev_loss;
        bad_checkpoints = 0;
      } else {
        ++bad_checkpoints;
        if (bad_checkpoints >= cfg.patience) break;
      }
    }
  }
  model.copy_values_from(best);
  return result;
}

// Stage one of the two-step procedure: one encoder, one decoder, tag-steered.
// Each source sentence carries its target-language tag as the first token;
// only bilingual data is needed.
inline DualModel pretrain_multilingual(const Bitext& ids_bitext1, const Bitext& ids_bitext2,
                                       TokenId tag1, TokenId tag2, const ModelConfig& model_cfg,
                                       const TrainConfig& cfg,
                                       const std::vector<TriSample>& dev_set) {
  if (model_cfg.coupling != Coupling::Single)
    throw ConfigError("pretrain_multilingual: config must be single-decoder");
  for (TokenId tag : {tag1, tag2})
    if (tag < specials::kCount || tag >= model_cfg.src_vocab)
      throw ConfigError("pretrain_multilingual: tag id collides with vocab or specials");
  if (tag1 == tag2) throw ConfigError("pretrain_multilingual: tags must differ");

  auto to_samples = [](const Bitext& b, TokenId tag) {
    std::vector<TriSample> out;
    for (size_t i = 0; i < b.size(); ++i) {
      TriSample s;
      s.src.push_back(tag);
      for (const auto& t : parse_ids(b.src[i])) s.src.push_back(t);
      s.tgt1 = frame_target(parse_ids(b.tgt[i]));
      out.push_back(std::move(s));
    }
    return out;
  };
  std::vector<TriSample> train_set = to_samples(ids_bitext1, tag1);
  for (auto& s : to_samples(ids_bitext2, tag2)) train_set.push_back(std::move(s));

  DualModel model = DualModel::random_init(model_cfg, cfg.seed);
  train(model, train_set, dev_set, cfg);
  return model;
}

inline void write_metrics_log(const std::string& path, const std::vector<MetricsRecord>& log,
                              bool with_timings) {
  std::vector<std::string> lines;
  lines.reserve(log.size());
  for (auto rec : log) {
    if (!with_timings) rec.wall_ms = -1;
    lines.push_back(rec.to_json_line());
  }
  write_lines(path, lines);
}

}  // namespace dualdec
