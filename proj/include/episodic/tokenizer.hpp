#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "episodic/corpus.hpp"
#include "episodic/json_config.hpp"
#include "json.hpp"

namespace episodic {

using TokenId = std::int64_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kFirstByteId = 2;
inline constexpr std::size_t kBaseVocab = 258;  // pad, eos, 256 bytes

namespace detail {

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

/// Splits text into chunks of "leading whitespace + non-whitespace run".
/// Trailing whitespace forms its own chunk. Merges never cross chunks.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t begin = i;
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    out.push_back(text.substr(begin, i - begin));
  }
  return out;
}

inline std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
}

}  // namespace detail

/// Byte-level pair-merge vocabulary. Ids: 0 pad, 1 eos, 2..257 raw bytes,
/// 258.. merged tokens in merge order.
class SubwordVocab {
 public:
  SubwordVocab() { rebuild(); }

  /// Builds a vocabulary from an explicit merge list (each pair refers to
  /// earlier ids).
  explicit SubwordVocab(std::vector<std::pair<TokenId, TokenId>> merges) : merges_(std::move(merges)) {
    rebuild();
  }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
  const std::string& token_bytes(TokenId id) const { return bytes_.at(static_cast<std::size_t>(id)); }

  /// Token ids of `text` without eos, pad or truncation.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    std::vector<TokenId> sym;
    for (std::string_view chunk : detail::pretokenize(text)) {
      sym.clear();
      for (unsigned char c : chunk) sym.push_back(kFirstByteId + c);
      // Apply the lowest-ranked applicable merge until none applies.
      while (sym.size() > 1) {
        std::size_t best_rank = SIZE_MAX, best_pos = 0;
        for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
          auto it = rank_.find(detail::pair_key(sym[i], sym[i + 1]));
          if (it != rank_.end() && it->second < best_rank) {
            best_rank = it->second;
            best_pos = i;
          }
        }
        if (best_rank == SIZE_MAX) break;
        const auto [l, r] = merges_[best_rank];
        const TokenId merged = static_cast<TokenId>(kBaseVocab + best_rank);
        std::vector<TokenId> next;
        next.reserve(sym.size());
        for (std::size_t i = 0; i < sym.size(); ++i) {
          if (i >= best_pos && i + 1 < sym.size() && sym[i] == l && sym[i + 1] == r) {
            next.push_back(merged);
            ++i;
          } else {
            next.push_back(sym[i]);
          }
        }
        sym.swap(next);
      }
      out.insert(out.end(), sym.begin(), sym.end());
    }
    return out;
  }

  /// Concatenated bytes of all non-reserved ids.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kPadId || id == kEosId) continue;
      if (id < 0 || static_cast<std::size_t>(id) >= size()) {
        throw DataError("decode: token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(size()));
      }
      out += bytes_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  bool operator==(const SubwordVocab& o) const { return merges_ == o.merges_; }

 private:
  void rebuild() {
    bytes_.assign(kBaseVocab, std::string());
    for (int b = 0; b < 256; ++b) bytes_[kFirstByteId + b] = std::string(1, static_cast<char>(b));
    rank_.clear();
    for (std::size_t k = 0; k < merges_.size(); ++k) {
      const auto [l, r] = merges_[k];
      const auto limit = static_cast<TokenId>(kBaseVocab + k);
      if (l < kFirstByteId || r < kFirstByteId || l >= limit || r >= limit) {
        throw DataError("vocab: merge " + std::to_string(k) + " refers to an invalid id");
      }
      if (!rank_.emplace(detail::pair_key(l, r), k).second) {
        throw DataError("vocab: duplicate merge at position " + std::to_string(k));
      }
      bytes_.push_back(bytes_[static_cast<std::size_t>(l)] + bytes_[static_cast<std::size_t>(r)]);
    }
  }

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::vector<std::string> bytes_;
  std::unordered_map<std::uint64_t, std::size_t> rank_;
};

/// Greedy pair merging from bytes: repeatedly merges the most frequent
/// adjacent pair (ties: lexicographically smallest byte strings) until the
/// vocabulary has `target_size` ids or no pair occurs twice.
inline SubwordVocab learn_bpe(const std::vector<std::string>& texts, std::size_t target_size) {
  if (target_size < kBaseVocab) {
    throw std::invalid_argument("learn_bpe: vocabulary size " + std::to_string(target_size) +
                                " is below the " + std::to_string(kBaseVocab) +
                                " reserved and byte ids");
  }
  if (texts.empty()) throw std::invalid_argument("learn_bpe: empty text sample");

  std::map<std::string_view, std::int64_t> chunk_freq;
  for (const auto& t : texts) {
    for (std::string_view c : detail::pretokenize(t)) ++chunk_freq[c];
  }
  std::vector<std::vector<TokenId>> words;
  std::vector<std::int64_t> freq;
  for (const auto& [chunk, f] : chunk_freq) {
    std::vector<TokenId> w;
    for (unsigned char c : chunk) w.push_back(kFirstByteId + c);
    if (w.size() < 2) continue;
    words.push_back(std::move(w));
    freq.push_back(f);
  }

  std::unordered_map<std::uint64_t, std::int64_t> counts;
  auto add_pairs = [&](const std::vector<TokenId>& w, std::int64_t f) {
    for (std::size_t i = 0; i + 1 < w.size(); ++i) counts[detail::pair_key(w[i], w[i + 1])] += f;
  };
  for (std::size_t k = 0; k < words.size(); ++k) add_pairs(words[k], freq[k]);

  std::vector<std::string> bytes(kBaseVocab);
  for (int b = 0; b < 256; ++b) bytes[kFirstByteId + b] = std::string(1, static_cast<char>(b));

  std::vector<std::pair<TokenId, TokenId>> merges;
  while (kBaseVocab + merges.size() < target_size) {
    std::int64_t best = 1;
    TokenId bl = -1, br = -1;
    for (const auto& [key, c] : counts) {
      if (c < best) continue;
      const auto l = static_cast<TokenId>(key >> 32), r = static_cast<TokenId>(key & 0xffffffffu);
      if (c > best || bl < 0 ||
          std::tie(bytes[l], bytes[r]) < std::tie(bytes[bl], bytes[br])) {
        best = c;
        bl = l;
        br = r;
      }
    }
    if (bl < 0 || best < 2) break;

    const auto merged = static_cast<TokenId>(kBaseVocab + merges.size());
    merges.emplace_back(bl, br);
    bytes.push_back(bytes[bl] + bytes[br]);

    for (std::size_t k = 0; k < words.size(); ++k) {
      auto& w = words[k];
      bool hit = false;
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        if (w[i] == bl && w[i + 1] == br) {
          hit = true;
          break;
        }
      }
      if (!hit) continue;
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        auto it = counts.find(detail::pair_key(w[i], w[i + 1]));
        if ((it->second -= freq[k]) == 0) counts.erase(it);
      }
      std::vector<TokenId> next;
      next.reserve(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == bl && w[i + 1] == br) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w.swap(next);
      add_pairs(w, freq[k]);
    }
  }
  return SubwordVocab(std::move(merges));
}

/// `length` ids: the tokens of `text`, then eos, truncated to `length`
/// (eos can be cut off), then padded with pad.
inline std::vector<TokenId> encode_text(const SubwordVocab& vocab, std::string_view text,
                                        std::size_t length) {
  std::vector<TokenId> ids = vocab.tokenize(text);
  ids.push_back(kEosId);
  ids.resize(length, kPadId);
  return ids;
}

/// The most frequent contexts get ids 1..K (ties by name); everything else,
/// including the literal unknown marker, maps to 0.
class ContextVocab {
 public:
  ContextVocab() = default;
  explicit ContextVocab(std::vector<std::string> contexts) : contexts_(std::move(contexts)) {
    for (std::size_t i = 0; i < contexts_.size(); ++i) {
      if (contexts_[i] == kUnknownContext || !ids_.emplace(contexts_[i], i + 1).second) {
        throw DataError("context vocab: invalid or duplicate entry '" + contexts_[i] + "'");
      }
    }
  }

  static ContextVocab learn(const std::map<std::string, std::size_t>& counts, std::size_t k) {
    std::vector<std::pair<std::string, std::size_t>> items;
    for (const auto& [name, n] : counts) {
      if (name != kUnknownContext && n > 0) items.emplace_back(name, n);
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (items.size() > k) items.resize(k);
    std::vector<std::string> names;
    for (auto& it : items) names.push_back(std::move(it.first));
    return ContextVocab(std::move(names));
  }

  std::int64_t id(const std::string& context) const {
    auto it = ids_.find(context);
    return it == ids_.end() ? 0 : static_cast<std::int64_t>(it->second);
  }
  /// Number of distinct ids, including unk.
  std::size_t size() const { return contexts_.size() + 1; }
  const std::vector<std::string>& contexts() const { return contexts_; }
  bool operator==(const ContextVocab& o) const { return contexts_ == o.contexts_; }

 private:
  std::vector<std::string> contexts_;
  std::map<std::string, std::size_t> ids_;
};

/// One action as model input.
struct EncodedAction {
  std::vector<TokenId> text_ids;  // fixed length
  std::int64_t hour_id = 0;
  std::int64_t context_id = 0;
  bool operator==(const EncodedAction&) const = default;
};

struct TokenizerConfig {
  std::size_t vocab_size = 2048;
  std::size_t text_len = 32;
  std::size_t num_contexts = 2048;
};

inline TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  StrictObject o(j, "tokenizer");
  o.read("vocab_size", c.vocab_size);
  o.read("text_len", c.text_len);
  o.read("num_contexts", c.num_contexts);
  o.finish();
  if (c.vocab_size < kBaseVocab) throw ConfigError("tokenizer.vocab_size must be >= 258");
  if (c.text_len < 1) throw ConfigError("tokenizer.text_len must be >= 1");
  return c;
}

inline nlohmann::json to_json(const TokenizerConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"text_len", c.text_len}, {"num_contexts", c.num_contexts}};
}

/// Subword and context vocabularies plus the fixed text length.
struct Vocabulary {
  SubwordVocab subwords;
  ContextVocab contexts;
  std::size_t text_len = 32;

  EncodedAction encode(const Action& a) const {
    return {encode_text(subwords, a.text, text_len), a.hour(), contexts.id(a.context)};
  }

  std::vector<EncodedAction> encode(const std::vector<Action>& actions) const {
    std::vector<EncodedAction> out;
    out.reserve(actions.size());
    for (const auto& a : actions) out.push_back(encode(a));
    return out;
  }

  bool operator==(const Vocabulary& o) const {
    return subwords == o.subwords && contexts == o.contexts && text_len == o.text_len;
  }
};

/// Learns both vocabularies from every action of `corpus`.
inline Vocabulary learn_vocabulary(const Corpus& corpus, const TokenizerConfig& cfg) {
  std::vector<std::string> texts;
  std::map<std::string, std::size_t> ctx_counts;
  for (const auto& [id, h] : corpus) {
    for (const auto& a : h.actions) {
      texts.push_back(a.text);
      ++ctx_counts[a.context];
    }
  }
  if (texts.empty()) throw DataError("learn_vocabulary: corpus has no actions");
  return {learn_bpe(texts, cfg.vocab_size), ContextVocab::learn(ctx_counts, cfg.num_contexts),
          cfg.text_len};
}

inline constexpr int kVocabFormatVersion = 1;

inline nlohmann::json to_json(const Vocabulary& v) {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : v.subwords.merges()) merges.push_back({l, r});
  return {{"version", kVocabFormatVersion},
          {"reserved", {{"pad", kPadId}, {"eos", kEosId}}},
          {"text_len", v.text_len},
          {"merges", merges},
          {"contexts", v.contexts.contexts()}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kVocabFormatVersion) {
      throw DataError("vocab: unsupported version " + j.at("version").dump());
    }
    if (j.at("reserved").at("pad").get<TokenId>() != kPadId ||
        j.at("reserved").at("eos").get<TokenId>() != kEosId) {
      throw DataError("vocab: reserved ids differ from pad=0, eos=1");
    }
    std::vector<std::pair<TokenId, TokenId>> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
    return {SubwordVocab(std::move(merges)),
            ContextVocab(j.at("contexts").get<std::vector<std::string>>()),
            j.at("text_len").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("vocab: malformed file: ") + e.what());
  }
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(v).dump() << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("vocab: " + path + " is not valid JSON: " + e.what());
  }
  return vocabulary_from_json(j);
}

}  // namespace episodic
