// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Every measured value is also written to acceptance_report.json in
// the working directory.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "episodic/baselines.hpp"
#include "episodic/experiment.hpp"
#include "support/grad_fixtures.hpp"
#include "support/oracles.hpp"

using namespace episodic;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  nlohmann::json values = nlohmann::json::object();
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
};

ExperimentConfig desk_config() {
  std::ifstream in(fs::path(EPISODIC_SOURCE_DIR) / "configs" / "desk_am.json");
  if (!in) throw std::runtime_error("configs/desk_am.json not found");
  return experiment_config_from_json(nlohmann::json::parse(in));
}

struct Run {
  Run(const ExperimentConfig& c, Benchmark b) : cfg(c), bench(std::move(b)), model(init_model(bench, cfg)) {}

  ExperimentConfig cfg;
  Benchmark bench;
  Model model;
  RankingResult ranking;
  double train_seconds = 0.0;
  double total_seconds = 0.0;
};

Run train_and_rank(const ExperimentConfig& cfg, const std::string& label) {
  const auto t0 = Clock::now();
  Run r(cfg, make_benchmark(cfg.corpus));
  const auto t1 = Clock::now();
  train_model(r.model, r.bench);
  r.train_seconds = seconds_since(t1);
  r.ranking = evaluate_ranking(r.model, r.bench, cfg.eval, cfg.eval.episode_len);
  r.total_seconds = seconds_since(t0);
  std::cerr << "  [" << label << "] trained in " << r.train_seconds << " s, MRR " << r.ranking.all.mrr << "\n";
  return r;
}

// Trained runs shared by several criteria, built on first use.
class Runs {
 public:
  const Run& get(const std::string& key) {
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    ExperimentConfig cfg = desk_config();
    if (key == "sm") {
      cfg.train.head.loss = LossKind::sm;
    } else if (key == "bands_full" || key == "bands_no_time") {
      cfg.corpus.synth->disjoint_hour_bands = true;
      cfg.model.use_time = key == "bands_full";
    } else if (key == "L4" || key == "L8") {
      const std::size_t len = key == "L4" ? 4 : 8;
      cfg.train.episode_len = len;
      cfg.eval.episode_len = len;
    } else if (key != "am") {
      throw std::logic_error("unknown run " + key);
    }
    return runs_.emplace(key, train_and_rank(cfg, key)).first->second;
  }

 private:
  std::map<std::string, Run> runs_;
};

nlohmann::json brief(const RankingReport& r) {
  return {{"mrr", r.mrr}, {"mr", r.mr}, {"r@1", r.recall.at(1)}, {"r@8", r.recall.at(8)}};
}

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (const auto& c : fixtures::primitive_cases()) {
    const double e = fixtures::run_case(c);
    worst = std::max(worst, e);
    o.check(e <= 1e-4, c.name + " max_rel_err " + std::to_string(e));
  }
  o.values["primitives_max_rel_err"] = worst;
  for (LossKind loss : {LossKind::sm, LossKind::am}) {
    double w = 0.0;
    for (std::uint64_t seed : fixtures::composite_seeds(loss)) {
      const auto c = fixtures::composite_check(loss, seed);
      w = std::max(w, c.report.max_rel_err);
      const std::string tag = "encoder+" + to_string(loss) + " seed " + std::to_string(seed);
      o.check(c.report.max_rel_err <= 1e-4, tag + " max_rel_err " + std::to_string(c.report.max_rel_err));
      if (loss == LossKind::am) o.check(c.max_abs_cosine <= 0.99, tag + " |cos| " + std::to_string(c.max_abs_cosine));
    }
    o.values["composite_" + to_string(loss) + "_max_rel_err"] = w;
  }
  const double secs = seconds_since(t0);
  o.values["seconds"] = secs;
  o.check(secs < 120.0, "suite took " + std::to_string(secs) + " s");
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(101);
  std::size_t rank_mismatch = 0, metric_mismatch = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.uniform_int(50), nq = 1 + rng.uniform_int(50);
    std::vector<std::size_t> ranks;
    for (std::size_t q = 0; q < nq; ++q) {
      std::vector<double> s(n);
      for (auto& v : s) v = static_cast<double>(rng.uniform_int(8));  // frequent ties
      const std::size_t truth = rng.uniform_int(n);
      const std::size_t r = rank_of(s, truth);
      rank_mismatch += r != oracle::rank(s, truth);
      ranks.push_back(r);
    }
    const auto got = ranking_metrics(ranks);
    const auto want = oracle::ranking(ranks);
    metric_mismatch += got.mrr != want.mrr || got.mr != want.mr || got.recall != want.recall;
  }
  o.check(rank_mismatch == 0, std::to_string(rank_mismatch) + " rank mismatches");
  o.check(metric_mismatch == 0, std::to_string(metric_mismatch) + " MRR/MR/R@k mismatches");

  double cluster_dev = 0.0;
  std::size_t cluster_bitwise = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.uniform_int(50);
    const std::size_t kp = 1 + rng.uniform_int(6), kt = 1 + rng.uniform_int(6);
    std::vector<std::size_t> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.uniform_int(kt);
      pred[i] = rng.bernoulli(0.6) ? truth[i] : rng.uniform_int(kp);
    }
    const auto got = cluster_metrics(pred, truth);
    const auto want = oracle::cluster(pred, truth);
    const double d = std::max({std::abs(got.nmi - std::clamp(want.nmi, 0.0, 1.0)),
                               std::abs(got.homogeneity - std::clamp(want.h, 0.0, 1.0)),
                               std::abs(got.completeness - std::clamp(want.c, 0.0, 1.0))});
    cluster_dev = std::max(cluster_dev, d);
    cluster_bitwise += d == 0.0;
  }
  // The two entropy formulas sum in different orders; agreement is exact up
  // to round-off.
  o.check(cluster_dev <= 1e-12, "NMI/H/C deviation " + std::to_string(cluster_dev));
  o.values["cluster_max_deviation"] = cluster_dev;
  o.values["cluster_bitwise_instances"] = cluster_bitwise;

  const auto fixture = ranking_metrics({1, 2, 4});
  o.check(fixture.mrr == 1.75 / 3.0 && std::abs(fixture.mrr - 0.58333) < 1e-5, "ranks [1,2,4] MRR");
  const std::vector<std::size_t> truth = {0, 0, 1, 1, 2};
  const auto single = cluster_metrics(std::vector<std::size_t>(5, 0), truth);
  o.check(single.homogeneity == 0.0 && single.completeness == 1.0, "single-cluster H/C");
  o.values["fixture_mrr"] = fixture.mrr;
  return o;
}

Outcome angular_margin_geometry() {
  Outcome o;
  Rng rng(102);
  const std::vector<std::size_t> labels = {0, 1, 2, 0, 1};
  double scale_dev = 0.0;
  bool zero_margin_bitwise = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Var w(fixtures::random_tensor({3, 8}, rng));
    const Tensor z = fixtures::random_tensor({5, 8}, rng);
    Tensor zc = z;
    const double c = rng.uniform(0.01, 100.0);
    for (std::size_t i = 0; i < zc.size(); ++i) zc[i] *= c;
    scale_dev = std::max(scale_dev, max_abs_diff(am_logits(w, Var(z), labels, 0.5, 64.0).value(),
                                                 am_logits(w, Var(zc), labels, 0.5, 64.0).value()));
    zero_margin_bitwise &= am_logits(w, Var(z), labels, 0.0, 64.0).value() == scale(am_cosines(w, Var(z)), 64.0).value();
  }
  o.check(scale_dev <= 1e-9, "rescaling deviation " + std::to_string(scale_dev));
  o.check(zero_margin_bitwise, "m=0 differs from scaled cosine");
  const double at1 = cos_plus_margin(1.0, 0.5), at06 = cos_plus_margin(0.6, 0.5);
  o.check(std::abs(at1 - std::cos(0.5)) <= 1e-6 && std::abs(at1 - 0.877583) <= 1e-6, "cos(theta+m) at cos=1");
  o.check(std::abs(at06 - std::cos(std::acos(0.6) + 0.5)) <= 1e-6 && std::abs(at06 - 0.143009) <= 1e-6,
          "cos(theta+m) at cos=0.6");
  o.values["rescale_max_deviation"] = scale_dev;
  o.values["cos_plus_margin"] = {at1, at06};
  return o;
}

Outcome end_to_end(Runs& runs) {
  Outcome o;
  const Run& r = runs.get("am");
  const auto& all = r.ranking.all;
  o.values = {{"all", brief(all)},
              {"targets", r.bench.heldout.size()},
              {"queries", all.ranks.size()},
              {"train_users", r.bench.train_users.size()},
              {"novel_users", r.bench.novel_users.size()},
              {"iterations", r.cfg.train.total_iters},
              {"seconds", r.total_seconds}};
  o.check(r.bench.train_users.size() == 200 && r.bench.novel_users.size() == 100, "benchmark is not 200 + 100 authors");
  o.check(r.bench.heldout.size() == 300 && all.ranks.size() == 100, "not 100 queries over 300 targets");
  o.check(r.cfg.train.total_iters <= 20000, "iteration budget");
  o.check(all.recall.at(1) >= 0.50, "R@1 " + std::to_string(all.recall.at(1)));
  o.check(all.mrr >= 0.60, "MRR " + std::to_string(all.mrr));
  o.check(r.ranking.novel.has_value(), "no novel-user ranking");
  if (r.ranking.novel) {
    o.values["novel"] = brief(*r.ranking.novel);
    const double gap = std::abs(r.ranking.novel->mrr - all.mrr);
    o.check(gap <= 0.15, "novel MRR gap " + std::to_string(gap));
  }
  o.check(r.total_seconds <= 1800.0, "runtime " + std::to_string(r.total_seconds) + " s");
  return o;
}

Outcome loss_comparison(Runs& runs) {
  Outcome o;
  const double am = runs.get("am").ranking.all.mrr, sm = runs.get("sm").ranking.all.mrr;
  o.values = {{"am_mrr", am}, {"sm_mrr", sm}};
  o.check(am >= sm - 0.02, "AM " + std::to_string(am) + " < SM " + std::to_string(sm) + " - 0.02");
  return o;
}

Outcome time_ablation(Runs& runs) {
  Outcome o;
  const double full = runs.get("bands_full").ranking.all.mrr, none = runs.get("bands_no_time").ranking.all.mrr;
  o.values = {{"full_mrr", full}, {"no_time_mrr", none}};
  o.check(full - none >= 0.02, "gain " + std::to_string(full - none));
  return o;
}

Outcome episode_length(Runs& runs) {
  Outcome o;
  const std::vector<double> r8 = {runs.get("L4").ranking.all.recall.at(8), runs.get("L8").ranking.all.recall.at(8),
                                  runs.get("am").ranking.all.recall.at(8)};
  std::size_t inversions = 0;
  double worst = 0.0;
  for (std::size_t i = 1; i < r8.size(); ++i) {
    if (r8[i] < r8[i - 1]) {
      ++inversions;
      worst = std::max(worst, r8[i - 1] - r8[i]);
    }
  }
  o.values = {{"L", {4, 8, 16}}, {"r@8", r8}};
  o.check(inversions == 0 || (inversions == 1 && worst <= 0.02), "R@8 not non-decreasing");
  return o;
}

Outcome baseline_ordering(Runs& runs) {
  Outcome o;
  const Run& r = runs.get("am");
  const double model = r.ranking.all.mrr;
  std::map<std::string, double> mrr;
  for (auto m : {BaselineMethod::tfidf_word, BaselineMethod::tfidf_char3, BaselineMethod::tfidf_context,
                 BaselineMethod::scap}) {
    mrr[to_string(m)] = evaluate_baseline(r.bench, r.cfg.eval, m, r.cfg.eval.episode_len).mrr;
  }
  o.check(model > mrr["tfidf-word"], "model MRR not above TF-IDF-word");
  o.check(mrr["tfidf-word"] > mrr["scap"], "TF-IDF-word MRR not above SCAP");

  SynthConfig s;
  s.num_authors = 30;
  s.actions_per_author = 80;
  s.signature_strength = 1.0;
  s.disjoint_signatures = true;
  const auto task = make_ranking_task(synth_corpus(s), 0, 16, 5, Metric::cosine);
  const double r1 = baseline_rank(task, BaselineMethod::tfidf_word).recall.at(1);
  o.check(r1 == 1.0, "disjoint-vocabulary TF-IDF R@1 " + std::to_string(r1));
  o.values = {{"model_mrr", model}, {"baseline_mrr", mrr}, {"disjoint_tfidf_r@1", r1}};
  return o;
}

Outcome clustering(Runs& runs) {
  Outcome o;
  const Run& r = runs.get("am");
  const auto c = evaluate_clustering(r.model, r.bench, r.cfg.eval);
  o.values = {{"nmi", c.report.nmi},
              {"homogeneity", c.report.homogeneity},
              {"completeness", c.report.completeness},
              {"clusters", c.report.num_clusters},
              {"converged", c.ap.converged}};
  o.check(r.cfg.eval.cluster_users == 100 && r.cfg.eval.episodes_per_user == 5, "not 100 authors x 5 episodes");
  o.check(c.report.nmi >= 0.6, "NMI " + std::to_string(c.report.nmi));
  o.check(c.report.homogeneity > c.report.completeness - 0.2, "homogeneity vs completeness");

  const auto [pts, truth] = oracle::gaussian_blobs(13);
  const auto blobs = affinity_propagation(oracle::neg_sq_dist(pts));
  const double blob_nmi = cluster_metrics(blobs.labels, truth).nmi;
  o.check(oracle::partition_of(blobs.labels) == oracle::partition_of(truth), "blobs not recovered exactly");
  o.check(blob_nmi >= 0.95, "blob NMI " + std::to_string(blob_nmi));
  o.values["blob_nmi"] = blob_nmi;
  return o;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism(Runs& runs) {
  Outcome o;
  ExperimentConfig cfg = desk_config();
  cfg.train.total_iters = 60;
  cfg.train.log_every = 20;
  auto short_run = [&] {
    const Benchmark b = make_benchmark(cfg.corpus);
    Model m = init_model(b, cfg);
    std::ostringstream log;
    train_model(m, b, &log);
    const auto r = evaluate_ranking(m, b, cfg.eval, cfg.eval.episode_len);
    nlohmann::json report = {{"all", to_json(r.all)}, {"novel", to_json(*r.novel)}};
    return std::tuple{log.str(), report.dump(), ranks_tsv(r.all), serialize_params(m)};
  };
  const auto a = short_run(), b = short_run();
  o.check(std::get<0>(a) == std::get<0>(b) && !std::get<0>(a).empty(), "training logs differ");
  o.check(std::get<1>(a) == std::get<1>(b), "ranking reports differ");
  o.check(std::get<2>(a) == std::get<2>(b), "rank files differ");
  o.check(std::get<3>(a) == std::get<3>(b), "parameters differ");

  const Run& r = runs.get("am");
  const fs::path dir = fs::temp_directory_path() / "episodic_acceptance_ckpt";
  fs::remove_all(dir);
  save_checkpoint(r.model, dir);
  const Model back = load_checkpoint(dir);
  const auto task = make_ranking_task(r.bench.heldout, 0, r.cfg.eval.episode_len, r.cfg.eval.seed, Metric::cosine);
  const auto before = embed_all(r.model, task.targets), after = embed_all(back, task.targets);
  double dev = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) dev = std::max(dev, max_abs_diff(before[i], after[i]));
  o.check(dev <= 1e-6, "checkpoint embedding change " + std::to_string(dev));

  const fs::path v1 = dir / "vocab_a.json", v2 = dir / "vocab_b.json";
  save_vocabulary(r.model.vocab, v1.string());
  const Vocabulary loaded = load_vocabulary(v1.string());
  save_vocabulary(loaded, v2.string());
  bool same_encoding = loaded == r.model.vocab;
  for (const auto& e : task.targets) same_encoding &= loaded.encode(e.actions) == r.model.vocab.encode(e.actions);
  o.check(same_encoding, "vocabulary round-trip changes encodings");
  o.check(read_bytes(v1) == read_bytes(v2), "vocabulary file not byte-identical after round-trip");
  fs::remove_all(dir);
  o.values = {{"checkpoint_max_embedding_change", dev}, {"log_bytes", std::get<0>(a).size()}};
  return o;
}

}  // namespace

int main() {
  Runs runs;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"metric oracle equivalence", metric_oracles},
      {"angular margin geometry", angular_margin_geometry},
      {"end-to-end learning", [&] { return end_to_end(runs); }},
      {"loss comparison", [&] { return loss_comparison(runs); }},
      {"time-feature ablation", [&] { return time_ablation(runs); }},
      {"episode-length trend", [&] { return episode_length(runs); }},
      {"baseline ordering", [&] { return baseline_ordering(runs); }},
      {"clustering", [&] { return clustering(runs); }},
      {"determinism and round-trips", [&] { return determinism(runs); }},
  };
  nlohmann::json report = nlohmann::json::array();
  bool all_pass = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, fn] = criteria[i];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    all_pass &= o.pass;
    std::cout << "criterion " << i + 1 << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " "
              << o.values.dump();
    for (const auto& f : o.failures) std::cout << " | " << f;
    std::cout << std::endl;
    report.push_back({{"criterion", i + 1}, {"name", name}, {"pass", o.pass}, {"values", o.values},
                      {"failures", o.failures}});
  }
  std::ofstream("acceptance_report.json") << report.dump(2) << "\n";
  return all_pass ? 0 : 1;
}
