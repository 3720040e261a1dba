#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <map>

#include "episodic/synth.hpp"
#include "episodic/tokenizer.hpp"

using namespace episodic;

namespace {

// Expands an id back to bytes using only the merge list.
std::string expand(const std::vector<std::pair<TokenId, TokenId>>& merges, TokenId id) {
  if (id >= static_cast<TokenId>(kBaseVocab)) {
    const auto [l, r] = merges[static_cast<std::size_t>(id) - kBaseVocab];
    return expand(merges, l) + expand(merges, r);
  }
  return std::string(1, static_cast<char>(id - kFirstByteId));
}

// Slow reference learner: recounts every pair from scratch at each step over
// whitespace-led chunks.
std::vector<std::pair<std::string, std::string>> naive_bpe(const std::vector<std::string>& texts,
                                                            std::size_t num_merges) {
  std::vector<std::vector<std::string>> words;
  for (const auto& t : texts) {
    std::size_t i = 0;
    while (i < t.size()) {
      std::size_t b = i;
      while (i < t.size() && t[i] == ' ') ++i;
      while (i < t.size() && t[i] != ' ') ++i;
      std::vector<std::string> w;
      for (std::size_t k = b; k < i; ++k) w.push_back(std::string(1, t[k]));
      words.push_back(w);
    }
  }
  std::vector<std::pair<std::string, std::string>> out;
  while (out.size() < num_merges) {
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    }
    int best = 1;
    std::pair<std::string, std::string> pick;
    for (const auto& [p, c] : counts) {
      if (c > best) {  // map order gives the lexicographic tie-break
        best = c;
        pick = p;
      }
    }
    if (best < 2) break;
    out.push_back(pick);
    for (auto& w : words) {
      std::vector<std::string> n;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == pick.first && w[i + 1] == pick.second) {
          n.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          n.push_back(w[i]);
        }
      }
      w = n;
    }
  }
  return out;
}

std::vector<std::string> sample_texts() {
  SynthConfig cfg;
  cfg.num_authors = 5;
  cfg.actions_per_author = 40;
  std::vector<std::string> texts;
  for (const auto& [id, h] : synth_corpus(cfg)) {
    for (const auto& a : h.actions) texts.push_back(a.text);
  }
  return texts;
}

}  // namespace

TEST(BpeTest, FirstMergeOfRepeatedLetter) {
  const auto v = learn_bpe({"aaaa"}, 259);
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.token_bytes(v.merges()[0].first), "a");
  EXPECT_EQ(v.token_bytes(v.merges()[0].second), "a");
}

TEST(BpeTest, MinimumSizeHasNoMerges) {
  EXPECT_TRUE(learn_bpe({"hello hello"}, kBaseVocab).merges().empty());
  EXPECT_THROW(learn_bpe({"hello"}, kBaseVocab - 1), std::invalid_argument);
  EXPECT_THROW(learn_bpe({}, 300), std::invalid_argument);
}

TEST(BpeTest, StopsWhenNoPairRepeats) {
  const auto v = learn_bpe({"abcd"}, 1000);
  EXPECT_TRUE(v.merges().empty());
}

TEST(BpeTest, DeterministicAndMatchesReference) {
  const auto texts = sample_texts();
  const auto a = learn_bpe(texts, 400);
  const auto b = learn_bpe(texts, 400);
  EXPECT_EQ(a.merges(), b.merges());
  const auto ref = naive_bpe(texts, 400 - kBaseVocab);
  ASSERT_EQ(a.merges().size(), ref.size());
  for (std::size_t k = 0; k < ref.size(); ++k) {
    EXPECT_EQ(a.token_bytes(a.merges()[k].first), ref[k].first) << "merge " << k;
    EXPECT_EQ(a.token_bytes(a.merges()[k].second), ref[k].second) << "merge " << k;
  }
}

TEST(EncodeTest, EmptyTextIsEosThenPad) {
  const auto v = learn_bpe({"abc abc"}, 300);
  const auto ids = encode_text(v, "", 5);
  EXPECT_EQ(ids, (std::vector<TokenId>{kEosId, kPadId, kPadId, kPadId, kPadId}));
}

TEST(EncodeTest, LongTextTruncatedWithoutPad) {
  const SubwordVocab v;
  const auto ids = encode_text(v, "abcdefghijkl", 4);
  ASSERT_EQ(ids.size(), 4u);
  for (TokenId id : ids) {
    EXPECT_NE(id, kPadId);
    EXPECT_NE(id, kEosId);
  }
}

TEST(EncodeTest, RoundTripThroughMergeExpansion) {
  const auto texts = sample_texts();
  const auto v = learn_bpe(texts, 600);
  const std::vector<std::string> probes = {"", "x", "héllo wörld", "  lead and trail  ",
                                           "\xff\x01 bytes", texts[3], texts[17] + " " + texts[4]};
  for (const auto& s : probes) {
    const auto ids = encode_text(v, s, 256);
    std::string oracle;
    for (TokenId id : ids) {
      ASSERT_GE(id, 0);
      ASSERT_LT(static_cast<std::size_t>(id), v.size());
      if (id > kEosId) oracle += expand(v.merges(), id);
    }
    EXPECT_EQ(oracle, s);
    EXPECT_EQ(v.decode(ids), s);
  }
}

TEST(EncodeTest, LengthAndRangeProperty) {
  const auto texts = sample_texts();
  const auto v = learn_bpe(texts, 500);
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const std::size_t n = rng.uniform_int(80);
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>(rng.uniform_int(256)));
    const std::size_t T = 1 + rng.uniform_int(40);
    const auto ids = encode_text(v, s, T);
    ASSERT_EQ(ids.size(), T);
    for (TokenId id : ids) ASSERT_LT(static_cast<std::size_t>(id), v.size());
  }
}

TEST(EncodeTest, MergesReduceLength) {
  const auto texts = sample_texts();
  const auto v = learn_bpe(texts, 800);
  std::size_t bytes = 0, tokens = 0;
  for (const auto& t : texts) {
    bytes += t.size();
    tokens += v.tokenize(t).size();
  }
  EXPECT_LT(tokens * 2, bytes);
}

TEST(TimeFeatureTest, HoursAndPeriodicity) {
  EXPECT_EQ(hour_of_day(*parse_rfc3339("2016-09-15T07:03:00Z")), 7);
  EXPECT_EQ(hour_of_day(*parse_rfc3339("2016-09-15T00:00:00Z")), 0);
  EXPECT_EQ(hour_of_day(*parse_rfc3339("2016-09-15T23:59:59Z")), 23);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto t = static_cast<std::int64_t>(rng.uniform_int(2000000000));
    EXPECT_EQ(hour_of_day(t), hour_of_day(t + 86400));
  }
}

TEST(ContextVocabTest, TopKWithLexicographicTies) {
  const std::map<std::string, std::size_t> counts = {
      {"b", 5}, {"a", 5}, {"c", 9}, {"d", 1}, {"unk", 100}};
  const auto v = ContextVocab::learn(counts, 3);
  EXPECT_EQ(v.contexts(), (std::vector<std::string>{"c", "a", "b"}));
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.id("c"), 1);
  EXPECT_EQ(v.id("a"), 2);
  EXPECT_EQ(v.id("b"), 3);
  EXPECT_EQ(v.id("d"), 0);
  EXPECT_EQ(v.id("unk"), 0);
  EXPECT_EQ(v.id("never-seen"), 0);
}

TEST(VocabularyTest, FileRoundTripPreservesEncodings) {
  SynthConfig scfg;
  scfg.num_authors = 6;
  scfg.actions_per_author = 50;
  const Corpus c = synth_corpus(scfg);
  TokenizerConfig tcfg;
  tcfg.vocab_size = 500;
  tcfg.text_len = 12;
  tcfg.num_contexts = 10;
  const Vocabulary v = learn_vocabulary(c, tcfg);
  const auto path = std::filesystem::temp_directory_path() / "episodic_vocab_test.json";
  save_vocabulary(v, path.string());
  const Vocabulary back = load_vocabulary(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back, v);

  scfg.seed = 77;  // held-out text sample
  for (const auto& [id, h] : synth_corpus(scfg)) {
    for (const auto& a : h.actions) EXPECT_EQ(back.encode(a), v.encode(a));
  }
}

TEST(VocabularyTest, MalformedFilesRejected) {
  nlohmann::json j = to_json(Vocabulary{});
  j["merges"] = {{2, 999}};
  EXPECT_THROW(vocabulary_from_json(j), DataError);
  j = to_json(Vocabulary{});
  j["version"] = 7;
  EXPECT_THROW(vocabulary_from_json(j), DataError);
  j = to_json(Vocabulary{});
  j.erase("contexts");
  EXPECT_THROW(vocabulary_from_json(j), DataError);
  EXPECT_THROW(load_vocabulary("/nonexistent/vocab.json"), std::runtime_error);
}
