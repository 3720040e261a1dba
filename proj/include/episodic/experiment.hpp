#pragma once

#include <algorithm>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "episodic/baselines.hpp"
#include "episodic/corpus.hpp"
#include "episodic/evaluation.hpp"
#include "episodic/synth.hpp"
#include "episodic/tokenizer.hpp"
#include "episodic/trainer.hpp"

namespace episodic {

inline constexpr const char* kToolVersion = "0.1.0";

/// Where actions come from and how they are divided. Each user's history is
/// split chronologically at `train_fraction`: the early part of the first
/// `train_users` users (in id order) is the training data, and the late part
/// of every user is the held-out evaluation period.
struct CorpusSection {
  std::optional<SynthConfig> synth;
  std::string path;  // JSONL corpus, used when synth is unset
  std::size_t min_actions = 0;
  std::size_t max_actions = 0;  // 0: no upper bound
  std::size_t train_users = 0;  // 0: all users
  double train_fraction = 0.5;
};

struct EvalSection {
  std::size_t num_queries = 100;  // 0: one per held-out user
  std::size_t episode_len = 16;
  std::uint64_t seed = 7;
  std::optional<Metric> metric;  // default: from the trained loss
  std::size_t cluster_users = 100;
  std::size_t episodes_per_user = 5;
  std::size_t pairs_per_split = 200;
};

struct ExperimentConfig {
  CorpusSection corpus;
  TokenizerConfig tokenizer;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;
};

inline nlohmann::json to_json(const CorpusSection& c) {
  nlohmann::json j = {{"min_actions", c.min_actions},
                      {"max_actions", c.max_actions},
                      {"train_users", c.train_users},
                      {"train_fraction", c.train_fraction}};
  if (c.synth) {
    j["synth"] = to_json(*c.synth);
  } else {
    j["path"] = c.path;
  }
  return j;
}

inline nlohmann::json to_json(const EvalSection& e) {
  nlohmann::json j = {{"num_queries", e.num_queries},       {"episode_len", e.episode_len},
                      {"seed", e.seed},                     {"cluster_users", e.cluster_users},
                      {"episodes_per_user", e.episodes_per_user}, {"pairs_per_split", e.pairs_per_split}};
  j["metric"] = e.metric ? nlohmann::json(to_string(*e.metric)) : nlohmann::json("auto");
  return j;
}

/// Fully resolved configuration with every default written out.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"corpus", to_json(c.corpus)},
          {"tokenizer", to_json(c.tokenizer)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  StrictObject top(j, "config");
  if (top.has("corpus")) {
    StrictObject o(top.sub("corpus"), "corpus");
    if (o.has("synth")) c.corpus.synth = synth_config_from_json(o.sub("synth"));
    o.read("path", c.corpus.path);
    o.read("min_actions", c.corpus.min_actions);
    o.read("max_actions", c.corpus.max_actions);
    o.read("train_users", c.corpus.train_users);
    o.read("train_fraction", c.corpus.train_fraction);
    o.finish();
  } else {
    c.corpus.synth = SynthConfig{};
  }
  if (c.corpus.synth && !c.corpus.path.empty()) throw ConfigError("corpus: give either synth or path, not both");
  if (!c.corpus.synth && c.corpus.path.empty()) throw ConfigError("corpus: one of synth or path is required");
  if (!(c.corpus.train_fraction > 0.0 && c.corpus.train_fraction < 1.0)) {
    throw ConfigError("corpus.train_fraction must be in (0, 1)");
  }
  if (top.has("tokenizer")) c.tokenizer = tokenizer_config_from_json(top.sub("tokenizer"));
  if (top.has("model")) c.model = model_config_from_json(top.sub("model"));
  if (top.has("train")) c.train = train_config_from_json(top.sub("train"));
  if (top.has("eval")) {
    StrictObject o(top.sub("eval"), "eval");
    o.read("num_queries", c.eval.num_queries);
    o.read("episode_len", c.eval.episode_len);
    o.read("seed", c.eval.seed);
    if (o.has("metric")) {
      std::string m;
      o.read("metric", m);
      if (m != "auto") c.eval.metric = parse_metric(m);
    }
    o.read("cluster_users", c.eval.cluster_users);
    o.read("episodes_per_user", c.eval.episodes_per_user);
    o.read("pairs_per_split", c.eval.pairs_per_split);
    o.finish();
    if (c.eval.episode_len == 0) throw ConfigError("eval.episode_len must be >= 1");
  }
  top.finish();
  c.model.validate();
  c.train.validate();
  return c;
}

/// Corpus divided into training data and the held-out evaluation period.
struct Benchmark {
  Corpus corpus;
  Corpus train;    // early part of training users
  Corpus heldout;  // late part of every user
  std::vector<std::string> train_users;
  std::set<std::string> novel_users;
};

inline Corpus load_corpus(const CorpusSection& c) {
  Corpus corpus;
  if (c.synth) {
    corpus = synth_corpus(*c.synth);
  } else {
    corpus = ingest_jsonl(c.path).corpus;
  }
  if (c.min_actions > 0 || c.max_actions > 0) {
    corpus = filter_users(corpus, std::max<std::size_t>(c.min_actions, 1),
                          c.max_actions ? c.max_actions : std::numeric_limits<std::size_t>::max());
  }
  if (corpus.empty()) throw DataError("corpus: no users left after filtering");
  return corpus;
}

inline Benchmark make_benchmark(const CorpusSection& c) {
  Benchmark b;
  b.corpus = load_corpus(c);
  auto [early, late] = chronological_split(b.corpus, c.train_fraction);
  b.heldout = std::move(late);
  const std::size_t n = c.train_users == 0 ? b.corpus.size() : c.train_users;
  if (n > b.corpus.size()) {
    throw ConfigError("corpus.train_users = " + std::to_string(n) + " exceeds the " +
                      std::to_string(b.corpus.size()) + " users available");
  }
  std::size_t i = 0;
  for (auto& [id, h] : early) {
    if (i++ < n) {
      b.train_users.push_back(id);
      b.train.emplace(id, std::move(h));
    } else {
      b.novel_users.insert(id);
    }
  }
  return b;
}

/// Vocabulary learned from training data only.
inline Model init_model(const Benchmark& b, const ExperimentConfig& cfg) {
  return make_model(learn_vocabulary(b.train, cfg.tokenizer), cfg.model, cfg.train, b.train_users);
}

inline TrainLog train_model(Model& m, const Benchmark& b, std::ostream* jsonl = nullptr) {
  Trainer t(m, b.train);
  return t.run(jsonl);
}

inline Metric eval_metric(const Model& m, const EvalSection& e) { return e.metric ? *e.metric : m.metric(); }

struct RankingResult {
  RankingReport all;
  std::optional<RankingReport> novel;  // queries by users absent from training
};

inline RankingResult evaluate_ranking(const Model& m, const Benchmark& b, const EvalSection& e,
                                      std::size_t episode_len) {
  const RankingTask task = make_ranking_task(b.heldout, e.num_queries, episode_len, e.seed, eval_metric(m, e));
  const auto zt = embed_all(m, task.targets);
  RankingResult out;
  out.all = ranking_metrics(rank(task, embed_all(m, task.queries), zt));
  if (!b.novel_users.empty()) {
    // Novel-user queries are drawn separately so that every novel user can
    // be represented, against the same targets.
    Corpus novel;
    for (const auto& id : b.novel_users) novel.emplace(id, b.heldout.at(id));
    RankingTask nt = make_ranking_task(novel, e.num_queries, episode_len, e.seed + 1, task.metric);
    nt.targets = task.targets;
    out.novel = ranking_metrics(rank(nt, embed_all(m, nt.queries), zt));
  }
  return out;
}

inline RankingReport evaluate_baseline(const Benchmark& b, const EvalSection& e, BaselineMethod method,
                                       std::size_t episode_len) {
  const RankingTask task = make_ranking_task(b.heldout, e.num_queries, episode_len, e.seed, Metric::cosine);
  return baseline_rank(task, method);
}

struct ClusterResult {
  ClusterReport report;
  AffinityResult ap;
};

inline ClusterResult evaluate_clustering(const Model& m, const Benchmark& b, const EvalSection& e) {
  const ClusterSet cs = make_cluster_set(b.heldout, e.cluster_users, e.episodes_per_user, e.episode_len, e.seed);
  const auto z = embed_all(m, cs.episodes);
  ClusterResult r;
  r.ap = affinity_propagation(similarity_matrix(z, eval_metric(m, e)));
  r.report = cluster_metrics(r.ap.labels, cs.truth);
  return r;
}

}  // namespace episodic
