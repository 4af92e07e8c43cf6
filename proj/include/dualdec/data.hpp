#pragma once

#include <string>
#include <vector>

#include "dualdec/common.hpp"
#include "dualdec/io.hpp"

namespace dualdec {

// One training triple: a source and two targets. Targets are BOS/EOS framed.
// tgt2 may be empty for bilingual samples feeding a single-decoder model.
struct TriSample {
  Ids src;
  Ids tgt1;
  Ids tgt2;
  real weight = 1.0;
  bool synthetic1 = false;  // tgt1 came from a translator, not a reference
  bool synthetic2 = false;

  void validate(bool require_tgt2) const {
    if (src.empty()) throw InputError("TriSample: empty source");
    auto check_target = [](const Ids& t, const char* name) {
      if (t.size() < 2 || t.front() != specials::kBos || t.back() != specials::kEos)
        throw InputError(std::string("TriSample: ") + name + " must be BOS ... EOS framed");
    };
    check_target(tgt1, "tgt1");
    if (require_tgt2 || !tgt2.empty()) check_target(tgt2, "tgt2");
  }
};

using TriCorpus = std::vector<TriSample>;

// Line-aligned sentence pairs, token strings (whitespace tokenized).
struct Bitext {
  std::vector<std::string> src;
  std::vector<std::string> tgt;

  size_t size() const { return src.size(); }

  void validate() const {
    if (src.size() != tgt.size()) throw InputError("bitext: unequal line counts");
    for (size_t i = 0; i < src.size(); ++i)
      if (src[i].empty() || tgt[i].empty())
        throw InputError("bitext: empty line at " + std::to_string(i + 1));
  }

  static Bitext from_files(const std::string& src_path, const std::string& tgt_path) {
    Bitext b{read_lines(src_path), read_lines(tgt_path)};
    b.validate();
    return b;
  }
};

// Plain-text trilingual corpus: three parallel token-string columns.
struct TriText {
  std::vector<std::string> src;
  std::vector<std::string> tgt1;
  std::vector<std::string> tgt2;

  size_t size() const { return src.size(); }

  void validate() const {
    if (src.size() != tgt1.size() || src.size() != tgt2.size())
      throw InputError("trilingual corpus: unequal line counts");
  }

  static TriText from_tsv(const std::string& path) {
    TriText t;
    for (const auto& line : read_lines(path)) {
      auto cols = split_tab(line);
      if (cols.size() != 3) throw InputError("trilingual tsv: expected 3 columns");
      t.src.push_back(cols[0]);
      t.tgt1.push_back(cols[1]);
      t.tgt2.push_back(cols[2]);
    }
    return t;
  }

  static TriText from_files(const std::string& src_path, const std::string& t1_path,
                            const std::string& t2_path) {
    TriText t{read_lines(src_path), read_lines(t1_path), read_lines(t2_path)};
    t.validate();
    return t;
  }

  void write_tsv(const std::string& path) const {
    std::vector<std::string> lines;
    lines.reserve(size());
    for (size_t i = 0; i < size(); ++i) lines.push_back(src[i] + '\t' + tgt1[i] + '\t' + tgt2[i]);
    write_lines(path, lines);
  }
};

inline Ids frame_target(Ids content) {
  Ids out;
  out.reserve(content.size() + 2);
  out.push_back(specials::kBos);
  for (TokenId t : content) out.push_back(t);
  out.push_back(specials::kEos);
  return out;
}

inline Ids strip_frame(const Ids& framed) {
  Ids out;
  for (TokenId t : framed)
    if (t != specials::kBos && t != specials::kEos && t != specials::kPad) out.push_back(t);
  return out;
}

inline Ids parse_ids(const std::string& line) {
  Ids out;
  for (const auto& tok : split_ws(line)) out.push_back(static_cast<TokenId>(std::stol(tok)));
  return out;
}

inline std::string format_ids(const Ids& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

}  // namespace dualdec
