#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualdec/common.hpp"
#include "dualdec/io.hpp"

namespace dualdec {

// Byte-pair-encoding subword model. Words are split into UTF-8 code points
// with an end-of-word marker suffixed to the last symbol; merges are learned
// greedily by pair frequency and applied at encode time in acquisition order.

namespace bpe {
inline constexpr const char* kEow = "</w>";

// Splits a UTF-8 string into code points. Invalid bytes become single-byte
// symbols, which keeps encode/decode total.
inline std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > s.size()) len = 1;
    for (size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) {
        len = k;
        break;
      }
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> syms = utf8_chars(word);
  if (!syms.empty()) syms.back() += kEow;
  return syms;
}
}  // namespace bpe

class SubwordModel {
 public:
  using MergeRule = std::pair<std::string, std::string>;

  SubwordModel() = default;

  const std::vector<MergeRule>& merges() const { return merges_; }
  const std::vector<std::string>& id_to_token() const { return id_to_token_; }
  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  int special_count() const { return special_count_; }

  TokenId token_id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? specials::kUnk : it->second;
  }

  bool has_token(const std::string& tok) const { return token_to_id_.count(tok) > 0; }

  // Greedy merge application in training order, one word at a time.
  Ids encode(const std::string& sentence) const {
    Ids out;
    for (const std::string& word : split_ws(sentence)) {
      std::vector<std::string> syms = bpe::word_symbols(word);
      for (const auto& [a, b] : merges_) {
        for (size_t i = 0; i + 1 < syms.size();) {
          if (syms[i] == a && syms[i + 1] == b) {
            syms[i] = a + b;
            syms.erase(syms.begin() + i + 1);
          } else {
            ++i;
          }
        }
      }
      for (const auto& s : syms) out.push_back(token_id(s));
    }
    return out;
  }

  // Concatenates symbols within a word; the end-of-word marker restores the
  // whitespace. PAD/BOS/EOS are dropped.
  std::string decode(const Ids& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || id >= vocab_size()) throw InputError("decode: unknown token id");
      if (id == specials::kPad || id == specials::kBos || id == specials::kEos) continue;
      std::string tok = id_to_token_[id];
      bool ends_word = false;
      if (tok.size() >= 4 && tok.compare(tok.size() - 4, 4, bpe::kEow) == 0) {
        tok.resize(tok.size() - 4);
        ends_word = true;
      }
      out += tok;
      if (ends_word) out += ' ';
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  // Persists as text: header with counts, one merge per line, then
  // "token<TAB>id" vocabulary entries. UTF-8 throughout.
  std::string to_text() const {
    std::ostringstream os;
    os << "dualdec-bpe 1 " << merges_.size() << ' ' << id_to_token_.size() << ' '
       << special_count_ << '\n';
    for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
    for (size_t i = 0; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
    return os.str();
  }

  void save(const std::string& path) const { atomic_write(path, to_text()); }

  static SubwordModel from_text(const std::string& text) {
    std::istringstream is(text);
    std::string magic;
    int version = 0;
    size_t n_merges = 0, n_vocab = 0;
    int n_specials = 0;
    is >> magic >> version >> n_merges >> n_vocab >> n_specials;
    if (magic != "dualdec-bpe" || version != 1) throw InputError("subword model: bad header");
    std::string line;
    std::getline(is, line);
    SubwordModel m;
    m.special_count_ = n_specials;
    for (size_t i = 0; i < n_merges; ++i) {
      if (!std::getline(is, line)) throw InputError("subword model: truncated merges");
      const size_t sp = line.find(' ');
      if (sp == std::string::npos) throw InputError("subword model: malformed merge rule");
      m.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    m.id_to_token_.assign(n_vocab, "");
    for (size_t i = 0; i < n_vocab; ++i) {
      if (!std::getline(is, line)) throw InputError("subword model: truncated vocabulary");
      const size_t tab = line.find('\t');
      if (tab == std::string::npos) throw InputError("subword model: malformed vocab entry");
      const std::string tok = line.substr(0, tab);
      const size_t id = std::stoul(line.substr(tab + 1));
      if (id >= n_vocab) throw InputError("subword model: vocab id out of range");
      m.id_to_token_[id] = tok;
      m.token_to_id_[tok] = static_cast<TokenId>(id);
    }
    return m;
  }

  static SubwordModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open subword model: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_text(os.str());
  }

  friend SubwordModel bpe_train(const std::vector<std::string>& corpus, int num_merges,
                                const std::vector<std::string>& extra_specials);

 private:
  std::vector<MergeRule> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  int special_count_ = specials::kCount;

  void add_token(const std::string& tok) {
    if (token_to_id_.count(tok)) {
      if (static_cast<size_t>(token_to_id_[tok]) < static_cast<size_t>(special_count_))
        throw ConfigError("subword: learned token collides with a special symbol: " + tok);
      return;
    }
    token_to_id_[tok] = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.push_back(tok);
  }
};

// Learns up to num_merges pair merges from the corpus. Frequency ties break
// on the lexicographically smallest pair, so builds are deterministic.
// Extra specials (language or variant tags) sit directly after the core four.
inline SubwordModel bpe_train(const std::vector<std::string>& corpus, int num_merges,
                              const std::vector<std::string>& extra_specials = {}) {
  if (corpus.empty()) throw InputError("bpe_train: empty corpus");
  if (num_merges < 0) throw InputError("bpe_train: negative merge count");

  // word type frequencies
  std::map<std::string, int64_t> word_freq;
  bool any_word = false;
  for (const auto& line : corpus)
    for (const auto& w : split_ws(line)) {
      ++word_freq[w];
      any_word = true;
    }
  if (!any_word) throw InputError("bpe_train: corpus has no tokens");

  std::vector<std::pair<std::vector<std::string>, int64_t>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) words.emplace_back(bpe::word_symbols(w), f);

  SubwordModel model;
  model.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& tag : extra_specials) {
    if (std::find(model.id_to_token_.begin(), model.id_to_token_.end(), tag) !=
        model.id_to_token_.end())
      throw ConfigError("bpe_train: duplicate special symbol: " + tag);
    model.id_to_token_.push_back(tag);
  }
  model.special_count_ = static_cast<int>(model.id_to_token_.size());
  for (size_t i = 0; i < model.id_to_token_.size(); ++i)
    model.token_to_id_[model.id_to_token_[i]] = static_cast<TokenId>(i);

  // Alphabet, sorted for stable ids. Every code point is registered in both
  // its bare and end-of-word form so any string over the training alphabet
  // encodes without UNK regardless of position in a word.
  std::map<std::string, int64_t> alphabet;
  for (const auto& [w, f] : word_freq)
    for (const auto& c : bpe::utf8_chars(w)) {
      alphabet[c] += f;
      alphabet[c + bpe::kEow] += 0;
    }
  for (const auto& [s, f] : alphabet) model.add_token(s);

  for (int step = 0; step < num_merges; ++step) {
    std::map<SubwordModel::MergeRule, int64_t> pair_freq;
    for (const auto& [syms, f] : words)
      for (size_t i = 0; i + 1 < syms.size(); ++i)
        pair_freq[{syms[i], syms[i + 1]}] += f;
    if (pair_freq.empty()) break;
    // highest count, ties by lexicographically smallest pair (map order)
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [a, b] = best->first;
    model.merges_.emplace_back(a, b);
    model.add_token(a + b);
    for (auto& [syms, f] : words)
      for (size_t i = 0; i + 1 < syms.size();) {
        if (syms[i] == a && syms[i + 1] == b) {
          syms[i] = a + b;
          syms.erase(syms.begin() + i + 1);
        } else {
          ++i;
        }
      }
  }
  return model;
}

}  // namespace dualdec
