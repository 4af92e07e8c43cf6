#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dualdec/model.hpp"
#include "dualdec/model_eval.hpp"

using namespace dualdec;

namespace {

ModelConfig tiny_config(Coupling coupling, int seed_dims = 0) {
  ModelConfig c;
  c.d_model = 16;
  c.d_ff = 32;
  c.heads = 2;
  c.enc_layers = 1 + seed_dims % 2;
  c.dec_layers = 2;
  c.src_vocab = 10;
  c.tgt_vocab = 12;
  c.coupling = coupling;
  c.dropout = 0.0;
  return c;
}

Ids rand_prefix(Rng& rng, int content_len, int vocab) {
  Ids out = {specials::kBos};
  for (int i = 0; i < content_len; ++i)
    out.push_back(specials::kCount + static_cast<TokenId>(rng.uniform_int(vocab - specials::kCount)));
  return out;
}

bool equal_mats(const Tensor& a, const Tensor& b, real tol = 0.0) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.numel(); ++i)
    if (std::fabs(a.data()[i] - b.data()[i]) > tol) return false;
  return true;
}

// zeroes the cross-decoder value projections (and the output bias they feed)
void zero_cross_values(DualModel& m) {
  for (auto& dec : m.decoders)
    for (auto& l : dec.layers)
      if (l.cross) {
        std::fill(l.cross->v.w.data().begin(), l.cross->v.w.data().end(), 0.0);
        std::fill(l.cross->v.b.data().begin(), l.cross->v.b.data().end(), 0.0);
        std::fill(l.cross->o.b.data().begin(), l.cross->o.b.data().end(), 0.0);
      }
}

}  // namespace

TEST_CASE("encode yields one d_model state per position, deterministically") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 11);
  Ids src = {4, 5, 6, 7};
  Tensor states = encode(m, src);
  REQUIRE(states.shape() == std::vector<int>{4, 16});
  Tensor again = encode(m, src);
  REQUIRE(equal_mats(states, again));
  REQUIRE_THROWS_AS(encode(m, {}), InputError);
}

TEST_CASE("positional encoding makes encode order-sensitive") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 3);
  Tensor a = encode(m, {4, 5, 6});
  Tensor b = encode(m, {4, 6, 5});
  REQUIRE_FALSE(equal_mats(a, b, 1e-9));
}

TEST_CASE("independent coupling ignores the partner prefix") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Independent), 5);
  Tensor enc = encode(m, {4, 5});
  Ids p1 = {specials::kBos, 6, 7};
  Ids real2 = {specials::kBos, 8, 9};
  Ids pad2 = {specials::kBos, specials::kPad, specials::kPad};
  auto [a1, a2] = dual_forward(m, enc, p1, real2);
  auto [b1, b2] = dual_forward(m, enc, p1, pad2);
  REQUIRE(equal_mats(a1, b1));
  REQUIRE_FALSE(equal_mats(a2, b2, 1e-9));
}

TEST_CASE("dual coupling: partner perturbation respects the strict causal mask") {
  Rng rng(77);
  for (int trial = 0; trial < 4; ++trial) {
    DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 100 + trial);
    Tensor enc = encode(m, {4, 5, 6});
    Ids p1 = rand_prefix(rng, 5, 12);
    Ids p2 = rand_prefix(rng, 5, 12);
    auto [base1, base2] = dual_forward(m, enc, p1, p2);
    const int len = static_cast<int>(p1.size());
    for (int j = 1; j < len; ++j) {
      Ids p2_mod = p2;
      p2_mod[j] = (p2_mod[j] - specials::kCount + 1) % (12 - specials::kCount) + specials::kCount;
      REQUIRE(p2_mod[j] != p2[j]);
      auto [l1, l2] = dual_forward(m, enc, p1, p2_mod);
      for (int t = 0; t < len; ++t)
        for (int v = 0; v < 12; ++v) {
          const bool same = l1.at(t, v) == base1.at(t, v);
          if (t <= j) REQUIRE(same);  // strict <t dependence on the partner
        }
      bool changed_later = false;
      for (int t = j + 1; t < len; ++t)
        for (int v = 0; v < 12; ++v)
          if (l1.at(t, v) != base1.at(t, v)) changed_later = true;
      if (j + 1 < len) REQUIRE(changed_later);
    }
  }
}

TEST_CASE("dual coupling: own prefix perturbation is causal (inclusive)") {
  Rng rng(9);
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 42);
  Tensor enc = encode(m, {4, 5});
  Ids p1 = rand_prefix(rng, 4, 12);
  Ids p2 = rand_prefix(rng, 4, 12);
  auto [base1, base2] = dual_forward(m, enc, p1, p2);
  const int len = static_cast<int>(p1.size());
  for (int j = 1; j < len; ++j) {
    Ids p1_mod = p1;
    p1_mod[j] = (p1_mod[j] - specials::kCount + 1) % (12 - specials::kCount) + specials::kCount;
    auto [l1, l2] = dual_forward(m, enc, p1_mod, p2);
    for (int t = 0; t < j; ++t)
      for (int v = 0; v < 12; ++v) REQUIRE(l1.at(t, v) == base1.at(t, v));
    // partner side: logits2 at positions <= j are unchanged (strict mask)
    for (int t = 0; t <= j && t < len; ++t)
      for (int v = 0; v < 12; ++v) REQUIRE(l2.at(t, v) == base2.at(t, v));
  }
}

TEST_CASE("zeroed cross-value projections reduce dual to independent") {
  ModelConfig dual_cfg = tiny_config(Coupling::Dual);
  DualModel dual = DualModel::random_init(dual_cfg, 17);
  zero_cross_values(dual);

  ModelConfig indep_cfg = dual_cfg;
  indep_cfg.coupling = Coupling::Independent;
  DualModel indep = DualModel::random_init(indep_cfg, 17);
  // identical remaining weights: copy everything the models share
  auto dst = indep.named_parameters();
  auto src_params = dual.named_parameters();
  for (auto& [name, t] : dst) {
    for (auto& [sname, st] : src_params)
      if (sname == name) t.data() = st.data();
  }

  Tensor enc_d = encode(dual, {4, 5, 6});
  Tensor enc_i = encode(indep, {4, 5, 6});
  REQUIRE(equal_mats(enc_d, enc_i));
  Ids p1 = {specials::kBos, 6, 7, 8};
  Ids p2 = {specials::kBos, 9, 10, 11};
  auto [d1, d2] = dual_forward(dual, enc_d, p1, p2);
  auto [i1, i2] = dual_forward(indep, enc_i, p1, p2);
  REQUIRE(equal_mats(d1, i1));
  REQUIRE(equal_mats(d2, i2));
}

TEST_CASE("cross-attention position variants both run and differ") {
  ModelConfig cfg = tiny_config(Coupling::Dual);
  cfg.cross_attn_position = CrossAttnPosition::AfterEncDec;
  DualModel after = DualModel::random_init(cfg, 23);
  cfg.cross_attn_position = CrossAttnPosition::BeforeEncDec;
  DualModel before = DualModel::random_init(cfg, 23);
  Tensor enc_a = encode(after, {4, 5});
  Tensor enc_b = encode(before, {4, 5});
  Ids p1 = {specials::kBos, 6, 7};
  Ids p2 = {specials::kBos, 8, 9};
  auto [a1, a2] = dual_forward(after, enc_a, p1, p2);
  auto [b1, b2] = dual_forward(before, enc_b, p1, p2);
  REQUIRE_FALSE(equal_mats(a1, b1, 1e-9));
}

TEST_CASE("all-four tying aliases one matrix across both decoders") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 2);
  REQUIRE(m.decoders[0].emb.same_storage(m.decoders[0].out));
  REQUIRE(m.decoders[0].emb.same_storage(m.decoders[1].emb));
  REQUIRE(m.decoders[0].emb.same_storage(m.decoders[1].out));

  ModelConfig cfg = tiny_config(Coupling::Dual);
  cfg.tie_mode = TieMode::PerDecoder;
  DualModel pd = DualModel::random_init(cfg, 2);
  REQUIRE(pd.decoders[0].emb.same_storage(pd.decoders[0].out));
  REQUIRE(pd.decoders[1].emb.same_storage(pd.decoders[1].out));
  REQUIRE_FALSE(pd.decoders[0].emb.same_storage(pd.decoders[1].emb));
}

TEST_CASE("log-softmax of logits is a proper distribution") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 31);
  Tensor enc = encode(m, {4, 5, 6});
  auto [l1, l2] = dual_forward(m, enc, {specials::kBos, 6, 7}, {specials::kBos, 8, 9});
  Tensor lp = log_softmax_rows(l1);
  for (int t = 0; t < lp.rows(); ++t) {
    real total = 0.0;
    for (int v = 0; v < lp.cols(); ++v) total += std::exp(lp.at(t, v));
    REQUIRE(total == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("checkpoint roundtrip is bit-exact and errors are typed") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 123);
  const auto path = (std::filesystem::temp_directory_path() / "dualdec_ckpt_test.bin").string();
  save_checkpoint(m, path);
  DualModel loaded = load_checkpoint(path);

  auto a = m.named_parameters();
  auto b = loaded.named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].first == b[i].first);
    REQUIRE(a[i].second.data() == b[i].second.data());
  }
  REQUIRE(loaded.cfg.coupling == Coupling::Dual);

  SECTION("coupling expectation mismatch is explicit") {
    ModelConfig ic = tiny_config(Coupling::Independent);
    DualModel indep = DualModel::random_init(ic, 1);
    save_checkpoint(indep, path);
    REQUIRE_THROWS_AS(load_checkpoint(path, Coupling::Dual), CheckpointError);
  }

  SECTION("truncated file is rejected") {
    std::string bytes = checkpoint_bytes(m);
    bytes.resize(bytes.size() / 2);
    REQUIRE_THROWS_AS(model_from_bytes(bytes), CheckpointError);
  }

  SECTION("bad version is rejected") {
    std::string bytes = checkpoint_bytes(m);
    bytes[4] = 99;
    REQUIRE_THROWS_AS(model_from_bytes(bytes), CheckpointError);
  }

  SECTION("tie aliasing survives reload") {
    DualModel re = load_checkpoint(path);
    re.decoders[0].emb.data()[0] = 1234.5;
    REQUIRE(re.decoders[1].emb.data()[0] == 1234.5);
    REQUIRE(re.decoders[1].out.data()[0] == 1234.5);
  }
  std::filesystem::remove(path);
}

TEST_CASE("init_from_pretrained copies the decoder into both sides") {
  ModelConfig single_cfg = tiny_config(Coupling::Single);
  DualModel pre = DualModel::random_init(single_cfg, 7);
  ModelConfig dual_cfg = tiny_config(Coupling::Dual);

  DualModel ft = init_from_pretrained(pre, dual_cfg, 99);

  SECTION("decoders start bit-identical") {
    auto params = ft.named_parameters();
    for (auto& [name, t] : params) {
      if (name.rfind("dec1.", 0) == 0 && name.find("cross") == std::string::npos) {
        const std::string other = "dec2." + name.substr(5);
        for (auto& [n2, t2] : params)
          if (n2 == other) REQUIRE(t.data() == t2.data());
      }
    }
  }

  SECTION("cross projections differ across seeds") {
    DualModel ft2 = init_from_pretrained(pre, dual_cfg, 100);
    bool any_diff = false;
    for (auto& l : ft.decoders[0].layers) {
      auto& l2 = ft2.decoders[0].layers[&l - ft.decoders[0].layers.data()];
      if (l.cross && l.cross->q.w.data() != l2.cross->q.w.data()) any_diff = true;
    }
    REQUIRE(any_diff);
  }

  SECTION("zeroed cross values reproduce pretrained behavior") {
    DualModel probe = ft.clone();
    zero_cross_values(probe);
    Ids src = {4, 5, 6};
    Ids prefix = {specials::kBos, 6, 7};
    Tensor pre_logits = single_forward(pre, 0, encode(pre, src), prefix);
    auto [l1, l2] = dual_forward(probe, encode(probe, src), prefix, prefix);
    REQUIRE(equal_mats(pre_logits, l1, 1e-12));
    REQUIRE(equal_mats(pre_logits, l2, 1e-12));
  }

  SECTION("dimension mismatch raises a checkpoint error") {
    ModelConfig bad = dual_cfg;
    bad.d_model = 32;
    bad.d_ff = 64;
    REQUIRE_THROWS_AS(init_from_pretrained(pre, bad, 1), CheckpointError);
  }
}

TEST_CASE("eval path matches the tape path") {
  for (Coupling coupling : {Coupling::Dual, Coupling::Independent}) {
    DualModel m = DualModel::random_init(tiny_config(coupling), 55);
    EvalRunner runner(m);
    Ids src = {4, 5, 6, 7};
    Tensor enc_tape = encode(m, src);
    Mat enc_eval = runner.encode(src);
    for (int i = 0; i < enc_tape.rows(); ++i)
      for (int j = 0; j < enc_tape.cols(); ++j)
        REQUIRE(enc_eval.at(i, j) == Catch::Approx(enc_tape.at(i, j)).margin(1e-12));

    Ids p1 = {specials::kBos, 6, 7, specials::kPad};
    Ids p2 = {specials::kBos, 8, 9, 10};
    auto [t1, t2] = dual_forward(m, enc_tape, p1, p2);
    Mat e1, e2;
    runner.dual_forward(enc_eval, p1, p2, e1, e2);
    for (int i = 0; i < t1.rows(); ++i)
      for (int j = 0; j < t1.cols(); ++j) {
        REQUIRE(e1.at(i, j) == Catch::Approx(t1.at(i, j)).margin(1e-11));
        REQUIRE(e2.at(i, j) == Catch::Approx(t2.at(i, j)).margin(1e-11));
      }
  }

  SECTION("single model") {
    DualModel m = DualModel::random_init(tiny_config(Coupling::Single), 56);
    EvalRunner runner(m);
    Ids src = {4, 5};
    Ids prefix = {specials::kBos, 6, 7};
    Tensor tape = single_forward(m, 0, encode(m, src), prefix);
    Mat logits;
    runner.single_forward(runner.encode(src), 0, prefix, logits);
    for (int i = 0; i < tape.rows(); ++i)
      for (int j = 0; j < tape.cols(); ++j)
        REQUIRE(logits.at(i, j) == Catch::Approx(tape.at(i, j)).margin(1e-11));
  }
}

TEST_CASE("prefix contract violations throw") {
  DualModel m = DualModel::random_init(tiny_config(Coupling::Dual), 1);
  Tensor enc = encode(m, {4});
  REQUIRE_THROWS_AS(dual_forward(m, enc, {6, 7}, {specials::kBos, 8}), InputError);
  REQUIRE_THROWS_AS(dual_forward(m, enc, {specials::kBos, 6}, {specials::kBos, 8, 9}), InputError);
  REQUIRE_THROWS_AS(DualModel::random_init(ModelConfig{.d_model = 15, .heads = 2, .src_vocab = 8,
                                                       .tgt_vocab = 8},
                                           1),
                    ConfigError);
}
