#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "episodic/evaluation.hpp"

namespace episodic {

enum class BaselineMethod { tfidf_word, tfidf_char3, tfidf_context, scap };

inline std::string to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::tfidf_word: return "tfidf-word";
    case BaselineMethod::tfidf_char3: return "tfidf-char3";
    case BaselineMethod::tfidf_context: return "tfidf-context";
    case BaselineMethod::scap: return "scap";
  }
  return "?";
}

inline BaselineMethod parse_baseline(const std::string& s) {
  for (auto m : {BaselineMethod::tfidf_word, BaselineMethod::tfidf_char3, BaselineMethod::tfidf_context,
                 BaselineMethod::scap}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown baseline '" + s + "' (expected tfidf-word, tfidf-char3, tfidf-context or scap)");
}

/// Episode texts joined by single spaces.
inline std::string episode_text(const Episode& e) {
  std::string out;
  for (const auto& a : e.actions) {
    if (!out.empty()) out.push_back(' ');
    out += a.text;
  }
  return out;
}

inline std::vector<std::string> char_ngrams(const std::string& text, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + n <= text.size(); ++i) out.push_back(text.substr(i, n));
  return out;
}

// ---------------------------------------------------------------------------
// TF-IDF

enum class TfidfMode { word, char_trigram, context_bag };

inline std::vector<std::string> tfidf_terms(const Episode& e, TfidfMode mode) {
  std::vector<std::string> out;
  switch (mode) {
    case TfidfMode::word: {
      std::istringstream in(episode_text(e));
      std::string w;
      while (in >> w) out.push_back(w);
      break;
    }
    case TfidfMode::char_trigram: out = char_ngrams(episode_text(e), 3); break;
    case TfidfMode::context_bag:
      for (const auto& a : e.actions) out.push_back(a.context);
      break;
  }
  return out;
}

/// L2-normalized weights over indexed terms, sorted by term id.
struct SparseVector {
  std::vector<std::pair<std::size_t, double>> entries;
  bool empty_document = false;
};

inline double dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  auto i = a.entries.begin(), j = b.entries.begin();
  while (i != a.entries.end() && j != b.entries.end()) {
    if (i->first < j->first) {
      ++i;
    } else if (j->first < i->first) {
      ++j;
    } else {
      s += i->second * j->second;
      ++i;
      ++j;
    }
  }
  return s;
}

/// Raw term counts times smoothed idf ln((1 + N) / (1 + df)) + 1, then L2
/// normalization.
class TfidfIndex {
 public:
  TfidfIndex(TfidfMode mode, const std::vector<Episode>& docs) : mode_(mode), n_(docs.size()) {
    for (const auto& d : docs) {
      std::set<std::string> seen;
      for (auto& t : tfidf_terms(d, mode_)) seen.insert(std::move(t));
      for (const auto& t : seen) {
        auto [it, fresh] = ids_.emplace(t, df_.size());
        if (fresh) df_.push_back(0);
        ++df_[it->second];
      }
    }
  }

  TfidfMode mode() const { return mode_; }
  std::size_t num_documents() const { return n_; }
  std::size_t num_terms() const { return df_.size(); }
  std::size_t df(const std::string& term) const {
    auto it = ids_.find(term);
    return it == ids_.end() ? 0 : df_[it->second];
  }
  double idf(std::size_t df) const {
    return std::log((1.0 + static_cast<double>(n_)) / (1.0 + static_cast<double>(df))) + 1.0;
  }

  /// Unseen terms count toward the norm but match nothing.
  SparseVector vectorize(const Episode& e) const {
    std::map<std::string, double> tf;
    for (auto& t : tfidf_terms(e, mode_)) tf[std::move(t)] += 1.0;
    SparseVector v;
    v.empty_document = tf.empty();
    double norm = 0.0;
    for (const auto& [term, count] : tf) {
      auto it = ids_.find(term);
      const double w = count * idf(it == ids_.end() ? 0 : df_[it->second]);
      norm += w * w;
      if (it != ids_.end()) v.entries.emplace_back(it->second, w);
    }
    if (norm > 0.0) {
      const double inv = 1.0 / std::sqrt(norm);
      for (auto& [id, w] : v.entries) w *= inv;
    }
    std::sort(v.entries.begin(), v.entries.end());
    return v;
  }

 private:
  TfidfMode mode_;
  std::size_t n_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<std::size_t> df_;
};

// ---------------------------------------------------------------------------
// SCAP

struct ScapProfile {
  std::size_t n = 3;
  std::vector<std::string> grams;  // sorted
};

/// The `length` most frequent character n-grams; equal counts at the cutoff
/// are taken in lexicographic order.
inline ScapProfile scap_profile(const std::string& text, std::size_t n = 3, std::size_t length = 64) {
  if (n == 0) throw ConfigError("scap: n-gram order must be positive");
  std::map<std::string, std::size_t> counts;
  for (auto& g : char_ngrams(text, n)) ++counts[std::move(g)];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > length) ranked.resize(length);
  ScapProfile p;
  p.n = n;
  for (auto& [g, c] : ranked) p.grams.push_back(g);
  std::sort(p.grams.begin(), p.grams.end());
  return p;
}

inline ScapProfile scap_profile(const Episode& e, std::size_t n = 3, std::size_t length = 64) {
  return scap_profile(episode_text(e), n, length);
}

inline std::size_t scap_similarity(const ScapProfile& a, const ScapProfile& b) {
  std::vector<std::string> common;
  std::set_intersection(a.grams.begin(), a.grams.end(), b.grams.begin(), b.grams.end(), std::back_inserter(common));
  return common.size();
}

// ---------------------------------------------------------------------------
// Ranking with a baseline similarity

struct BaselineOptions {
  std::size_t scap_n = 3;
  std::size_t scap_length = 64;
};

/// Ranks per query; the TF-IDF index is fitted on the task's targets.
inline std::vector<std::size_t> baseline_ranks(const RankingTask& task, BaselineMethod method,
                                               const BaselineOptions& opt = {}) {
  if (method == BaselineMethod::scap) {
    std::vector<ScapProfile> q, t;
    for (const auto& e : task.queries) q.push_back(scap_profile(e, opt.scap_n, opt.scap_length));
    for (const auto& e : task.targets) t.push_back(scap_profile(e, opt.scap_n, opt.scap_length));
    return rank_with(task, [&](std::size_t i, std::size_t j) { return static_cast<double>(scap_similarity(q[i], t[j])); });
  }
  const TfidfMode mode = method == BaselineMethod::tfidf_word    ? TfidfMode::word
                         : method == BaselineMethod::tfidf_char3 ? TfidfMode::char_trigram
                                                                 : TfidfMode::context_bag;
  const TfidfIndex index(mode, task.targets);
  std::vector<SparseVector> q, t;
  for (const auto& e : task.queries) q.push_back(index.vectorize(e));
  for (const auto& e : task.targets) t.push_back(index.vectorize(e));
  return rank_with(task, [&](std::size_t i, std::size_t j) { return dot(q[i], t[j]); });
}

inline RankingReport baseline_rank(const RankingTask& task, BaselineMethod method, const BaselineOptions& opt = {}) {
  return ranking_metrics(baseline_ranks(task, method, opt));
}

inline nlohmann::json baseline_manifest(BaselineMethod method, const BaselineOptions& opt = {}) {
  if (method == BaselineMethod::scap) {
    return {{"method", to_string(method)}, {"ngram", opt.scap_n}, {"profile_length", opt.scap_length}};
  }
  return {{"method", to_string(method)},
          {"tf", "raw count"},
          {"idf", "ln((1+N)/(1+df))+1"},
          {"norm", "l2"},
          {"fit_on", "targets"},
          {"word_split", "whitespace"}};
}

}  // namespace episodic
