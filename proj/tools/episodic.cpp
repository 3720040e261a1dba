// Command-line driver: synthetic corpora, vocabularies, training and every
// evaluation protocol. Reports are JSON, logs and corpora JSONL, plot data CSV.
// Failures print one JSON error object on stderr and remove partial outputs.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "episodic/episodic.hpp"

using namespace episodic;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kMissingInput = 2, kInvalidInput = 3, kUsage = 64 };

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path) || fs::is_directory(path)) throw MissingInput(what + " not found: " + path);
}

/// Files and directories written by this invocation, removed on failure.
class Outputs {
 public:
  fs::path file(const fs::path& p) {
    if (p.has_parent_path() && !fs::exists(p.parent_path())) dir(p.parent_path());
    files_.push_back(p);
    return p;
  }

  fs::path dir(const fs::path& p) {
    if (!fs::exists(p)) {
      if (p.has_parent_path() && !fs::exists(p.parent_path())) dir(p.parent_path());
      fs::create_directory(p);
      created_dirs_.push_back(p);
    }
    return p;
  }

  void remove_all() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(f, ec);
    for (auto it = created_dirs_.rbegin(); it != created_dirs_.rend(); ++it) fs::remove_all(*it, ec);
  }

 private:
  std::vector<fs::path> files_;
  std::vector<fs::path> created_dirs_;
};

Outputs outputs;

nlohmann::json tool_info(const std::string& command) {
  return {{"name", "episodic"}, {"version", kToolVersion}, {"command", command}};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(outputs.file(p), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

/// Self-describing report: tool, resolved configuration and results.
void write_report(const fs::path& p, const std::string& command, const nlohmann::json& config,
                  const nlohmann::json& results) {
  write_json(p, {{"tool", tool_info(command)}, {"config", config}, {"results", results}});
}

/// Sidecar next to a non-JSON output.
void write_sidecar(const fs::path& out, const std::string& command, const nlohmann::json& config) {
  write_json(fs::path(out.string() + ".meta.json"), {{"tool", tool_info(command)}, {"config", config}});
}

nlohmann::json read_json_file(const std::string& path, const std::string& what) {
  require_file(path, what);
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ExperimentConfig read_experiment(const std::string& path) {
  return experiment_config_from_json(read_json_file(path, "config"));
}

Model read_checkpoint(const std::string& dir) {
  if (!fs::is_regular_file(fs::path(dir) / "manifest.json")) throw MissingInput("checkpoint not found: " + dir);
  return load_checkpoint(dir);
}

Corpus read_corpus(const std::string& path) {
  require_file(path, "corpus");
  return ingest_jsonl(path).corpus;
}

std::vector<Episode> read_episodes(const std::string& path, const std::string& what) {
  require_file(path, what);
  return load_episodes(path);
}

std::vector<Tensor> read_embeddings(const std::string& path, const std::string& what) {
  require_file(path, what);
  return load_embeddings(path);
}

/// Ranking inputs: explicit query/target episode files, or a protocol run
/// over a held-out corpus.
struct TaskSource {
  std::string queries, targets, corpus;
  std::size_t num_queries = 100;
  std::size_t episode_len = 16;
  std::uint64_t seed = 7;

  void add_options(CLI::App* c) {
    c->add_option("--queries", queries, "Query episodes (JSONL)");
    c->add_option("--targets", targets, "Target episodes (JSONL), one per author");
    c->add_option("--corpus", corpus, "Held-out corpus (JSONL) to sample queries and targets from");
    c->add_option("--num-queries", num_queries, "Queries sampled from --corpus (0: one per author)")
        ->capture_default_str();
    c->add_option("--episode-len", episode_len, "Episode length for --corpus")->capture_default_str();
    c->add_option("--seed", seed, "Sampling seed for --corpus")->capture_default_str();
  }

  RankingTask build(Metric metric) const {
    const bool files = !queries.empty() || !targets.empty();
    if (files == !corpus.empty()) throw ConfigError("give either --queries and --targets, or --corpus");
    if (files) {
      if (queries.empty() || targets.empty()) throw ConfigError("--queries and --targets go together");
      RankingTask t;
      t.queries = read_episodes(queries, "query episodes");
      t.targets = read_episodes(targets, "target episodes");
      t.metric = metric;
      return t;
    }
    if (episode_len == 0) throw ConfigError("--episode-len must be >= 1");
    return make_ranking_task(read_corpus(corpus), num_queries, episode_len, seed, metric);
  }

  nlohmann::json to_json() const {
    if (!corpus.empty()) {
      return {{"corpus", corpus}, {"num_queries", num_queries}, {"episode_len", episode_len}, {"seed", seed}};
    }
    return {{"queries", queries}, {"targets", targets}};
  }
};

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("--lengths: '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw ConfigError("--lengths is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(const std::string& config, const std::string& out) {
  const auto j = read_json_file(config, "config");
  SynthConfig s;
  if (j.contains("corpus")) {
    const ExperimentConfig e = experiment_config_from_json(j);
    if (!e.corpus.synth) throw ConfigError("config has no corpus.synth section");
    s = *e.corpus.synth;
  } else {
    s = synth_config_from_json(j);
  }
  std::ostringstream text;
  save_jsonl(synth_corpus(s), text);
  write_text(out, text.str());
  write_sidecar(out, "synth", to_json(s));
}

void cmd_vocab(const std::string& corpus, const TokenizerConfig& cfg, const std::string& out) {
  const Vocabulary v = learn_vocabulary(read_corpus(corpus), cfg);
  save_vocabulary(v, outputs.file(out).string());
  nlohmann::json c = to_json(cfg);
  c["corpus"] = corpus;
  write_sidecar(out, "vocab", c);
}

void cmd_train(const std::string& config, const fs::path& out) {
  const ExperimentConfig cfg = read_experiment(config);
  const Benchmark b = make_benchmark(cfg.corpus);
  Model m = init_model(b, cfg);
  outputs.dir(out);
  nlohmann::json resolved = to_json(cfg);
  write_json(out / "config.json", {{"tool", tool_info("train")}, {"config", resolved}});
  {
    std::ofstream log(outputs.file(out / "train_log.jsonl"), std::ios::binary);
    const TrainLog tl = train_model(m, b, &log);
    if (!log) throw std::runtime_error("write failed: " + (out / "train_log.jsonl").string());
    std::cerr << "trained " << m.iteration << " iterations, final loss " << tl.losses.back() << "\n";
  }
  for (const char* f : {"manifest.json", "params.bin", "vocab.json"}) outputs.file(out / f);
  save_checkpoint(m, out);
  std::ostringstream heldout;
  save_jsonl(b.heldout, heldout);
  write_text(out / "heldout.jsonl", heldout.str());
  write_json(out / "split.json", {{"train_users", b.train_users}, {"novel_users", b.novel_users}});

  const RankingResult r = evaluate_ranking(m, b, cfg.eval, cfg.eval.episode_len);
  nlohmann::json results = {{"all", to_json(r.all)}};
  if (r.novel) results["novel_users"] = to_json(*r.novel);
  write_report(out / "ranking_report.json", "train", resolved, results);
}

void cmd_embed(const std::string& ckpt, const std::string& episodes, const std::string& out) {
  const Model m = read_checkpoint(ckpt);
  const auto eps = read_episodes(episodes, "episodes");
  save_embeddings(embed_all(m, eps), outputs.file(out));
  write_sidecar(out, "embed", {{"ckpt", ckpt}, {"episodes", episodes}, {"rows", eps.size()},
                               {"format", "EPISEMB1, u64 rows, u64 cols, float64 little-endian"}});
}

void cmd_rank(const std::string& ckpt, const std::string& query_emb, const std::string& target_emb,
              const TaskSource& src, const std::string& metric_name, const std::string& out,
              const std::string& ranks_out) {
  const bool precomputed = !query_emb.empty() || !target_emb.empty();
  if (precomputed == !ckpt.empty()) throw ConfigError("give either --ckpt, or --query-emb and --target-emb");
  if (precomputed && (query_emb.empty() || target_emb.empty())) {
    throw ConfigError("--query-emb and --target-emb go together");
  }
  std::optional<Model> m;
  if (!precomputed) m = read_checkpoint(ckpt);
  const Metric metric = metric_name != "auto" ? parse_metric(metric_name) : m ? m->metric() : Metric::cosine;
  const RankingTask task = src.build(metric);
  std::vector<Tensor> qe, te;
  if (precomputed) {
    qe = read_embeddings(query_emb, "query embeddings");
    te = read_embeddings(target_emb, "target embeddings");
    if (qe.size() != task.queries.size() || te.size() != task.targets.size()) {
      throw DataError("embedding rows do not match the episode files");
    }
  } else {
    qe = embed_all(*m, task.queries);
    te = embed_all(*m, task.targets);
  }
  const RankingReport r = ranking_metrics(rank(task, qe, te));
  nlohmann::json cfg = src.to_json();
  cfg["metric"] = to_string(metric);
  if (precomputed) {
    cfg["query_emb"] = query_emb;
    cfg["target_emb"] = target_emb;
  } else {
    cfg["ckpt"] = ckpt;
  }
  write_report(out, "rank", cfg, to_json(r));
  if (!ranks_out.empty()) write_text(ranks_out, ranks_tsv(r));
}

void cmd_cluster(const std::string& ckpt, const std::string& corpus, const EvalSection& e,
                 const std::string& metric_name, const AffinityOptions& ap, const std::string& out) {
  const Model m = read_checkpoint(ckpt);
  const Metric metric = metric_name == "auto" ? m.metric() : parse_metric(metric_name);
  const ClusterSet cs =
      make_cluster_set(read_corpus(corpus), e.cluster_users, e.episodes_per_user, e.episode_len, e.seed);
  const AffinityResult res = affinity_propagation(similarity_matrix(embed_all(m, cs.episodes), metric), ap);
  nlohmann::json results = to_json(cluster_metrics(res.labels, cs.truth));
  results["affinity"] = {{"iterations", res.iterations},
                         {"converged", res.converged},
                         {"preference", res.preference},
                         {"exemplars", res.exemplars}};
  nlohmann::json assignments = nlohmann::json::array();
  for (std::size_t i = 0; i < cs.episodes.size(); ++i) {
    assignments.push_back({{"user_id", cs.episodes[i].user_id}, {"start", cs.episodes[i].start}, {"cluster", res.labels[i]}});
  }
  results["assignments"] = assignments;
  nlohmann::json cfg = {{"ckpt", ckpt},        {"corpus", corpus},
                        {"users", e.cluster_users}, {"episodes_per_user", e.episodes_per_user},
                        {"episode_len", e.episode_len}, {"seed", e.seed},
                        {"metric", to_string(metric)},  {"damping", ap.damping},
                        {"max_iter", ap.max_iter},     {"convergence_iter", ap.convergence_iter}};
  cfg["preference"] = ap.preference ? nlohmann::json(*ap.preference) : nlohmann::json("median");
  write_report(out, "cluster", cfg, results);
}

void cmd_verify(const std::string& ckpt, const std::string& pairs, const std::string& corpus, const EvalSection& e,
                const std::string& method, const VerifyOptions& opt, const std::string& out) {
  if (pairs.empty() == corpus.empty()) throw ConfigError("give either --pairs or --corpus");
  const Model m = read_checkpoint(ckpt);
  PairSplits splits;
  if (!pairs.empty()) {
    require_file(pairs, "pairs");
    splits = load_pairs(pairs);
  } else {
    splits = make_pairs(read_corpus(corpus), e.pairs_per_split, e.episode_len, e.seed);
  }
  const VerifyMethod vm = parse_verify_method(method);
  nlohmann::json cfg = {{"ckpt", ckpt}, {"method", method}, {"pairs", {{"train", splits.train.size()},
                                                                     {"val", splits.val.size()},
                                                                     {"test", splits.test.size()}}}};
  if (!pairs.empty()) {
    cfg["pairs_file"] = pairs;
  } else {
    cfg["corpus"] = corpus;
    cfg["pairs_per_split"] = e.pairs_per_split;
    cfg["episode_len"] = e.episode_len;
    cfg["seed"] = e.seed;
  }
  if (vm == VerifyMethod::mlp) {
    cfg["mlp"] = {{"hidden", opt.hidden}, {"epochs", opt.epochs}, {"batch_size", opt.batch_size},
                  {"lr", opt.lr},         {"momentum", opt.momentum}, {"seed", opt.seed}};
  }
  write_report(out, "verify", cfg, to_json(verify_pairs(m, splits, vm, opt)));
}

void cmd_baseline(const std::string& method, const TaskSource& src, const BaselineOptions& opt, const std::string& out,
                  const std::string& ranks_out) {
  const BaselineMethod bm = parse_baseline(method);
  const RankingReport r = baseline_rank(src.build(Metric::cosine), bm, opt);
  nlohmann::json cfg = src.to_json();
  cfg["baseline"] = baseline_manifest(bm, opt);
  write_report(out, "baseline", cfg, to_json(r));
  if (!ranks_out.empty()) write_text(ranks_out, ranks_tsv(r));
}

void cmd_sweep(const std::string& config, const std::string& ckpt, const std::string& corpus,
               const std::string& lengths_arg, const std::string& out) {
  const auto lengths = parse_lengths(lengths_arg);
  std::ostringstream csv;
  csv << "episode_len,mrr,mr,recall@1,recall@8,novel_mrr\n";
  nlohmann::json cfg = {{"lengths", lengths}};
  auto row = [&](std::size_t len, const RankingResult& r) {
    csv << len << ',' << r.all.mrr << ',' << r.all.mr << ',' << r.all.recall.at(1) << ',' << r.all.recall.at(8) << ',';
    if (r.novel) csv << r.novel->mrr;
    csv << '\n';
  };
  csv.precision(17);
  if (!config.empty()) {
    if (!ckpt.empty() || !corpus.empty()) throw ConfigError("--config retrains per length; do not combine with --ckpt");
    // One model per length, trained and evaluated on episodes of that length.
    const ExperimentConfig base = read_experiment(config);
    const Benchmark b = make_benchmark(base.corpus);
    for (std::size_t len : lengths) {
      ExperimentConfig c = base;
      c.train.episode_len = len;
      c.eval.episode_len = len;
      Model m = init_model(b, c);
      train_model(m, b);
      row(len, evaluate_ranking(m, b, c.eval, len));
      std::cerr << "episode length " << len << " done\n";
    }
    cfg["mode"] = "retrain";
    cfg["experiment"] = to_json(base);
  } else {
    if (ckpt.empty() || corpus.empty()) throw ConfigError("give --config, or --ckpt with --corpus");
    // One trained model evaluated at every length.
    const Model m = read_checkpoint(ckpt);
    Benchmark b;
    b.heldout = read_corpus(corpus);
    EvalSection e;
    for (std::size_t len : lengths) row(len, evaluate_ranking(m, b, e, len));
    cfg["mode"] = "fixed_model";
    cfg["ckpt"] = ckpt;
    cfg["corpus"] = corpus;
    cfg["eval"] = to_json(e);
  }
  write_text(out, csv.str());
  write_sidecar(out, "sweep-length", cfg);
}

void print_error(const std::string& type, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", {{"type", type}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Episode embeddings for author identification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string config, out, corpus, ckpt, episodes, method = "cosine", metric = "auto", ranks_out;

  auto* synth = app.add_subcommand("synth", "Write a deterministic synthetic corpus");
  synth->add_option("--config", config, "Synthetic corpus config, or an experiment config")->required();
  synth->add_option("--out", out, "Corpus file (JSONL)")->required();
  synth->callback([&] { cmd_synth(config, out); });

  TokenizerConfig tok;
  auto* vocab = app.add_subcommand("vocab", "Learn subword and context vocabularies");
  vocab->add_option("--corpus", corpus, "Corpus (JSONL)")->required();
  vocab->add_option("--size", tok.vocab_size, "Subword vocabulary size")->capture_default_str();
  vocab->add_option("--text-len", tok.text_len, "Tokens per action text")->capture_default_str();
  vocab->add_option("--contexts", tok.num_contexts, "Context vocabulary size")->capture_default_str();
  vocab->add_option("--out", out, "Vocabulary file (JSON)")->required();
  vocab->callback([&] { cmd_vocab(corpus, tok, out); });

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint directory");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--out", out, "Checkpoint directory")->required();
  train->callback([&] { cmd_train(config, out); });

  auto* embed = app.add_subcommand("embed", "Embed episodes with a trained model");
  embed->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  embed->add_option("--episodes", episodes, "Episodes (JSONL)")->required();
  embed->add_option("--out", out, "Embedding matrix file")->required();
  embed->callback([&] { cmd_embed(ckpt, episodes, out); });

  TaskSource src;
  std::string query_emb, target_emb;
  auto* rank_cmd = app.add_subcommand("rank", "Rank targets for each query episode");
  rank_cmd->add_option("--ckpt", ckpt, "Checkpoint directory");
  rank_cmd->add_option("--query-emb", query_emb, "Precomputed query embeddings instead of --ckpt");
  rank_cmd->add_option("--target-emb", target_emb, "Precomputed target embeddings instead of --ckpt");
  src.add_options(rank_cmd);
  rank_cmd->add_option("--metric", metric, "cosine, euclidean or auto (from the checkpoint)")->capture_default_str();
  rank_cmd->add_option("--out", out, "Report (JSON)")->required();
  rank_cmd->add_option("--ranks-out", ranks_out, "Per-query ranks (TSV)");
  rank_cmd->callback([&] { cmd_rank(ckpt, query_emb, target_emb, src, metric, out, ranks_out); });

  EvalSection ev;
  AffinityOptions ap;
  double preference = 0.0;
  auto* cluster = app.add_subcommand("cluster", "Cluster episodes with affinity propagation");
  cluster->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  cluster->add_option("--corpus", corpus, "Held-out corpus (JSONL)")->required();
  cluster->add_option("--users", ev.cluster_users, "Authors sampled (0: all)")->capture_default_str();
  cluster->add_option("--episodes-per-user", ev.episodes_per_user, "Disjoint episodes per author")
      ->capture_default_str();
  cluster->add_option("--episode-len", ev.episode_len, "Actions per episode")->capture_default_str();
  cluster->add_option("--seed", ev.seed, "Sampling seed")->capture_default_str();
  cluster->add_option("--metric", metric, "cosine, euclidean or auto")->capture_default_str();
  cluster->add_option("--damping", ap.damping, "Message damping")->capture_default_str();
  auto* pref_opt = cluster->add_option("--preference", preference, "Self-similarity (default: median)");
  cluster->add_option("--out", out, "Report (JSON)")->required();
  cluster->callback([&] {
    if (pref_opt->count()) ap.preference = preference;
    cmd_cluster(ckpt, corpus, ev, metric, ap, out);
  });

  VerifyOptions vopt;
  std::string pairs;
  auto* verify = app.add_subcommand("verify", "Same-author verification on episode pairs");
  verify->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  verify->add_option("--pairs", pairs, "Pair file (JSONL) with train/val/test splits");
  verify->add_option("--corpus", corpus, "Held-out corpus to sample pairs from instead of --pairs");
  verify->add_option("--pairs-per-split", ev.pairs_per_split, "Pairs per split for --corpus")->capture_default_str();
  verify->add_option("--episode-len", ev.episode_len, "Episode length for --corpus")->capture_default_str();
  verify->add_option("--seed", ev.seed, "Sampling seed for --corpus")->capture_default_str();
  verify->add_option("--method", method, "cosine or mlp")->capture_default_str();
  verify->add_option("--epochs", vopt.epochs, "MLP epochs")->capture_default_str();
  verify->add_option("--hidden", vopt.hidden, "MLP hidden width")->capture_default_str();
  verify->add_option("--out", out, "Report (JSON)")->required();
  verify->callback([&] { cmd_verify(ckpt, pairs, corpus, ev, method, vopt, out); });

  BaselineOptions bopt;
  std::string baseline_method;
  auto* baseline = app.add_subcommand("baseline", "Rank with a text baseline");
  baseline->add_option("--method", baseline_method, "tfidf-word, tfidf-char3, tfidf-context or scap")->required();
  src.add_options(baseline);
  baseline->add_option("--scap-n", bopt.scap_n, "SCAP n-gram order")->capture_default_str();
  baseline->add_option("--scap-length", bopt.scap_length, "SCAP profile length")->capture_default_str();
  baseline->add_option("--out", out, "Report (JSON)")->required();
  baseline->add_option("--ranks-out", ranks_out, "Per-query ranks (TSV)");
  baseline->callback([&] { cmd_baseline(baseline_method, src, bopt, out, ranks_out); });

  std::string lengths = "4,8,16";
  auto* sweep = app.add_subcommand("sweep-length", "Recall@8 against episode length (CSV)");
  sweep->add_option("--config", config, "Experiment config: train one model per length");
  sweep->add_option("--ckpt", ckpt, "Evaluate one trained model at every length instead");
  sweep->add_option("--corpus", corpus, "Held-out corpus for --ckpt");
  sweep->add_option("--lengths", lengths, "Comma-separated episode lengths")->capture_default_str();
  sweep->add_option("--out", out, "CSV file")->required();
  sweep->callback([&] { cmd_sweep(config, ckpt, corpus, lengths, out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {  // help and version
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), kUsage);
    return kUsage;
  } catch (const MissingInput& e) {
    outputs.remove_all();
    print_error("missing_input", e.what(), kMissingInput);
    return kMissingInput;
  } catch (const ConfigError& e) {
    outputs.remove_all();
    print_error("config", e.what(), kInvalidInput);
    return kInvalidInput;
  } catch (const DataError& e) {
    outputs.remove_all();
    print_error("data", e.what(), kInvalidInput);
    return kInvalidInput;
  } catch (const std::exception& e) {
    outputs.remove_all();
    print_error("failure", e.what(), kFailure);
    return kFailure;
  }
  return kOk;
}
