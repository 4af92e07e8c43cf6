#pragma once

// Checkpoint container: "DDCK" magic, u32 version, JSON config block, then
// named parameter blocks (name, dims, raw float64 little-endian). Tied
// parameters are stored once under their canonical name; aliasing is rebuilt
// from the config on load. Layout details in README.md.

#include <bit>

#include <nlohmann/json.hpp>

#include "dualdec/io.hpp"
#include "dualdec/model.hpp"

namespace dualdec {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"d_model", c.d_model},
      {"d_ff", c.d_ff},
      {"heads", c.heads},
      {"enc_layers", c.enc_layers},
      {"dec_layers", c.dec_layers},
      {"src_vocab", c.src_vocab},
      {"tgt_vocab", c.tgt_vocab},
      {"coupling", to_string(c.coupling)},
      {"cross_attn_position",
       c.cross_attn_position == CrossAttnPosition::AfterEncDec ? "after-encdec" : "before-encdec"},
      {"tie_mode", c.tie_mode == TieMode::AllFour ? "all-four" : "per-decoder"},
      {"dropout", c.dropout},
      {"ln_eps", c.ln_eps},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.heads = j.at("heads").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.src_vocab = j.at("src_vocab").get<int>();
  c.tgt_vocab = j.at("tgt_vocab").get<int>();
  c.coupling = coupling_from_string(j.at("coupling").get<std::string>());
  const std::string pos = j.at("cross_attn_position").get<std::string>();
  if (pos == "after-encdec") c.cross_attn_position = CrossAttnPosition::AfterEncDec;
  else if (pos == "before-encdec") c.cross_attn_position = CrossAttnPosition::BeforeEncDec;
  else throw ConfigError("unknown cross_attn_position: " + pos);
  const std::string tie = j.at("tie_mode").get<std::string>();
  if (tie == "all-four") c.tie_mode = TieMode::AllFour;
  else if (tie == "per-decoder") c.tie_mode = TieMode::PerDecoder;
  else throw ConfigError("unknown tie_mode: " + tie);
  c.dropout = j.at("dropout").get<real>();
  c.ln_eps = j.at("ln_eps").get<real>();
  return c;
}

inline std::string checkpoint_bytes(const DualModel& m) {
  std::string out;
  out.append(ckpt::kMagic, 4);
  ckpt::write_pod<uint32_t>(out, ckpt::kVersion);
  ckpt::write_string(out, config_to_json(m.cfg).dump());
  const auto params = m.named_parameters();
  ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    ckpt::write_string(out, name);
    ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()));
    for (int e : t.shape()) ckpt::write_pod<int32_t>(out, e);
    const auto& data = t.data();
    const size_t bytes = data.size() * sizeof(real);
    out.append(reinterpret_cast<const char*>(data.data()), bytes);
  }
  return out;
}

inline DualModel model_from_bytes(const std::string& bytes) {
  size_t pos = 0;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), ckpt::kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint file");
  pos = 4;
  const uint32_t version = ckpt::read_pod<uint32_t>(bytes, pos);
  if (version != ckpt::kVersion)
    throw CheckpointError("checkpoint version mismatch: " + std::to_string(version));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ckpt::read_string(bytes, pos));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  }
  const ModelConfig cfg = config_from_json(j);

  // Rebuild with the stored config (seed irrelevant, every value is filled),
  // which restores the tie aliasing, then load each named block.
  DualModel m = DualModel::random_init(cfg, 0);
  auto params = m.named_parameters();
  const uint32_t n = ckpt::read_pod<uint32_t>(bytes, pos);
  if (n != params.size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = ckpt::read_string(bytes, pos);
    if (name != params[i].first)
      throw CheckpointError("checkpoint parameter order mismatch at " + name);
    const uint32_t ndim = ckpt::read_pod<uint32_t>(bytes, pos);
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(ckpt::read_pod<int32_t>(bytes, pos));
    Tensor& t = params[i].second;
    if (shape != t.shape()) throw CheckpointError("checkpoint shape mismatch at " + name);
    const size_t count = t.numel();
    if (pos + count * sizeof(real) > bytes.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(t.data().data(), bytes.data() + pos, count * sizeof(real));
    pos += count * sizeof(real);
  }
  if (pos != bytes.size()) throw CheckpointError("checkpoint has trailing bytes");
  return m;
}

inline void save_checkpoint(const DualModel& m, const std::string& path) {
  atomic_write(path, checkpoint_bytes(m));
}

inline DualModel load_checkpoint(const std::string& path, std::optional<Coupling> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  DualModel m = model_from_bytes(os.str());
  if (expected && m.cfg.coupling != *expected)
    throw CheckpointError(std::string("checkpoint coupling is ") + to_string(m.cfg.coupling) +
                          ", expected " + to_string(*expected));
  return m;
}

}  // namespace dualdec
