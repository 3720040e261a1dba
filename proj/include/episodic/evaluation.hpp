#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "episodic/corpus.hpp"
#include "episodic/objectives.hpp"
#include "episodic/trainer.hpp"

namespace episodic {

// ---------------------------------------------------------------------------
// Ranking

/// Queries and candidate targets; authors are the episodes' user ids.
struct RankingTask {
  std::vector<Episode> queries;
  std::vector<Episode> targets;  // exactly one per author
  Metric metric = Metric::cosine;

  /// Index of each query's true target. Throws DataError on duplicate target
  /// authors or a query whose author has no target.
  std::vector<std::size_t> truth() const {
    std::map<std::string, std::size_t> by_author;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      if (!by_author.emplace(targets[j].user_id, j).second) {
        throw DataError("ranking task: author '" + targets[j].user_id + "' has two targets");
      }
    }
    std::vector<std::size_t> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
      auto it = by_author.find(q.user_id);
      if (it == by_author.end()) throw DataError("ranking task: no target for query author '" + q.user_id + "'");
      out.push_back(it->second);
    }
    return out;
  }
};

inline const std::vector<std::size_t> kDefaultRecallKs = {1, 2, 4, 8, 16, 32};

struct RankingReport {
  double mrr = 0.0;
  std::size_t mr = 0;
  std::map<std::size_t, double> recall;  // k -> R@k
  std::vector<std::size_t> ranks;
};

/// 1 + number of other targets scoring at least as high as the truth, so
/// ties count against the method.
inline std::size_t rank_of(std::span<const double> scores, std::size_t truth) {
  if (truth >= scores.size()) throw DataError("rank: true target index out of range");
  const double s = scores[truth];
  std::size_t r = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j != truth && scores[j] >= s) ++r;
  }
  return r;
}

/// Ranks under an arbitrary score `sim(query_index, target_index)`.
inline std::vector<std::size_t> rank_with(const RankingTask& task,
                                          const std::function<double(std::size_t, std::size_t)>& sim) {
  const auto truth = task.truth();
  std::vector<std::size_t> ranks(task.queries.size());
  std::vector<double> scores(task.targets.size());
  for (std::size_t i = 0; i < task.queries.size(); ++i) {
    for (std::size_t j = 0; j < task.targets.size(); ++j) scores[j] = sim(i, j);
    ranks[i] = rank_of(scores, truth[i]);
  }
  return ranks;
}

inline std::vector<std::size_t> rank(const RankingTask& task, const std::vector<Tensor>& query_emb,
                                     const std::vector<Tensor>& target_emb) {
  if (query_emb.size() != task.queries.size() || target_emb.size() != task.targets.size()) {
    throw ShapeError("rank: embedding counts do not match the task");
  }
  return rank_with(task, [&](std::size_t i, std::size_t j) {
    return similarity(query_emb[i], target_emb[j], task.metric);
  });
}

/// MRR, lower median rank and R@k.
inline RankingReport ranking_metrics(std::vector<std::size_t> ranks,
                                     const std::vector<std::size_t>& ks = kDefaultRecallKs) {
  if (ranks.empty()) throw DataError("ranking_metrics: no ranks");
  RankingReport r;
  double inv = 0.0;
  for (std::size_t x : ranks) {
    if (x < 1) throw DataError("ranking_metrics: ranks start at 1");
    inv += 1.0 / static_cast<double>(x);
  }
  const double n = static_cast<double>(ranks.size());
  r.mrr = inv / n;
  std::vector<std::size_t> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  r.mr = sorted[(sorted.size() - 1) / 2];
  for (std::size_t k : ks) {
    const auto hits = std::upper_bound(sorted.begin(), sorted.end(), k) - sorted.begin();
    r.recall[k] = static_cast<double>(hits) / n;
  }
  r.ranks = std::move(ranks);
  return r;
}

inline nlohmann::json to_json(const RankingReport& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [k, v] : r.recall) recall["R@" + std::to_string(k)] = v;
  return {{"MRR", r.mrr},
          {"MR", r.mr},
          {"recall", recall},
          {"num_queries", r.ranks.size()},
          {"conventions", {{"median", "lower"}, {"ties", "pessimistic"}}}};
}

/// One "query_index<TAB>rank" line per query.
inline std::string ranks_tsv(const RankingReport& r) {
  std::string out = "query\trank\n";
  for (std::size_t i = 0; i < r.ranks.size(); ++i) out += std::to_string(i) + "\t" + std::to_string(r.ranks[i]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Affinity propagation

struct AffinityOptions {
  double damping = 0.5;
  std::optional<double> preference;  // default: median off-diagonal similarity
  std::size_t max_iter = 1000;
  std::size_t convergence_iter = 50;
};

struct AffinityResult {
  std::vector<std::size_t> labels;     // cluster index per point
  std::vector<std::size_t> exemplars;  // point index per cluster
  std::size_t iterations = 0;
  bool converged = false;
  double preference = 0.0;
};

inline double median_off_diagonal(const std::vector<std::vector<double>>& s) {
  std::vector<double> v;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (i != k) v.push_back(s[i][k]);
    }
  }
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Responsibility/availability message passing on a dense similarity matrix.
/// Deterministic: no random noise; ties resolve toward lower indices.
inline AffinityResult affinity_propagation(std::vector<std::vector<double>> s, const AffinityOptions& opt = {}) {
  const std::size_t n = s.size();
  for (const auto& row : s) {
    if (row.size() != n) throw ShapeError("affinity_propagation: similarity matrix is not square");
  }
  if (!(opt.damping >= 0.5 && opt.damping < 1.0)) throw ConfigError("affinity_propagation: damping must be in [0.5, 1)");
  AffinityResult res;
  if (n == 0) return res;
  res.preference = opt.preference ? *opt.preference : median_off_diagonal(s);
  for (std::size_t i = 0; i < n; ++i) s[i][i] = res.preference;
  // Exact ties make the messages oscillate around zero forever (symmetric
  // points never pick an exemplar). A penalty far below any real difference
  // breaks them: lower exemplar indices first, and self over others.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& row : s) {
    for (double v : row) {
      if (!std::isfinite(v)) throw NumericError("affinity_propagation: non-finite similarity");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double delta = 1e-12 * std::max(hi - lo, 1e-300);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      s[i][k] -= delta * ((i == k ? 0.0 : 1.0) + static_cast<double>(k) / static_cast<double>(n));
    }
  }
  if (n == 1) {
    res.labels = {0};
    res.exemplars = {0};
    res.converged = true;
    return res;
  }

  const double lam = opt.damping;
  std::vector<std::vector<double>> r(n, std::vector<double>(n, 0.0)), a = r;
  std::vector<bool> prev(n, false);
  std::size_t stable = 0;
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    res.iterations = it + 1;
    for (std::size_t i = 0; i < n; ++i) {
      // Largest and second largest of a(i,k') + s(i,k').
      double best = -std::numeric_limits<double>::infinity(), second = best;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = a[i][k] + s[i][k];
        if (v > best) {
          second = best;
          best = v;
          arg = k;
        } else if (v > second) {
          second = v;
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        const double nr = s[i][k] - (k == arg ? second : best);
        r[i][k] = lam * r[i][k] + (1.0 - lam) * nr;
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      double pos = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (i != k) pos += std::max(0.0, r[i][k]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double na = i == k ? pos : std::min(0.0, r[k][k] + pos - std::max(0.0, r[i][k]));
        a[i][k] = lam * a[i][k] + (1.0 - lam) * na;
      }
    }
    std::vector<bool> cur(n);
    bool any = false;
    for (std::size_t k = 0; k < n; ++k) {
      cur[k] = a[k][k] + r[k][k] > 0.0;
      any = any || cur[k];
    }
    stable = cur == prev ? stable + 1 : 0;
    prev = std::move(cur);
    if (any && stable >= opt.convergence_iter) {
      res.converged = true;
      break;
    }
  }

  for (std::size_t k = 0; k < n; ++k) {
    if (prev[k]) res.exemplars.push_back(k);
  }
  if (res.exemplars.empty()) {
    // No positive self-evidence: fall back to the single strongest candidate.
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (a[k][k] + r[k][k] > a[best][best] + r[best][best]) best = k;
    }
    res.exemplars.push_back(best);
  }
  res.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t e = 1; e < res.exemplars.size(); ++e) {
      if (s[i][res.exemplars[e]] > s[i][res.exemplars[c]]) c = e;
    }
    res.labels[i] = c;
  }
  for (std::size_t e = 0; e < res.exemplars.size(); ++e) res.labels[res.exemplars[e]] = e;
  return res;
}

// ---------------------------------------------------------------------------
// Clustering metrics

struct ClusterReport {
  double nmi = 0.0;
  double homogeneity = 0.0;
  double completeness = 0.0;
  std::size_t num_clusters = 0;
};

namespace detail {
inline double entropy_of(const std::map<std::size_t, double>& counts, double n) {
  double h = 0.0;
  for (const auto& [k, c] : counts) h -= c / n * std::log(c / n);
  return h;
}
}  // namespace detail

/// Natural-log entropies; NMI normalized by the arithmetic mean of H(truth)
/// and H(pred).
inline ClusterReport cluster_metrics(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("cluster_metrics: label vectors differ in length");
  if (pred.empty()) throw DataError("cluster_metrics: no points");
  const double n = static_cast<double>(pred.size());
  std::map<std::size_t, double> pc, tc;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pc[pred[i]] += 1.0;
    tc[truth[i]] += 1.0;
    joint[{truth[i], pred[i]}] += 1.0;
  }
  const double ht = detail::entropy_of(tc, n), hp = detail::entropy_of(pc, n);
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    mi += c / n * std::log(c * n / (tc[key.first] * pc[key.second]));
  }
  mi = std::max(0.0, mi);
  // H(truth|pred) = H(truth) - I, H(pred|truth) = H(pred) - I.
  ClusterReport r;
  r.num_clusters = pc.size();
  r.homogeneity = ht == 0.0 ? 1.0 : std::clamp(mi / ht, 0.0, 1.0);
  r.completeness = hp == 0.0 ? 1.0 : std::clamp(mi / hp, 0.0, 1.0);
  r.nmi = ht + hp == 0.0 ? 1.0 : std::clamp(2.0 * mi / (ht + hp), 0.0, 1.0);
  return r;
}

inline nlohmann::json to_json(const ClusterReport& r) {
  return {{"NMI", r.nmi},
          {"homogeneity", r.homogeneity},
          {"completeness", r.completeness},
          {"num_clusters", r.num_clusters},
          {"conventions", {{"nmi_normalization", "arithmetic"}, {"log", "natural"}}}};
}

/// Pairwise similarity matrix of embeddings under `metric`.
inline std::vector<std::vector<double>> similarity_matrix(const std::vector<Tensor>& emb, Metric metric) {
  const std::size_t n = emb.size();
  std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) s[i][j] = s[j][i] = similarity(emb[i], emb[j], metric);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Pair verification

struct EpisodePair {
  Episode a;
  Episode b;
  bool same = false;
};

struct PairSplits {
  std::vector<EpisodePair> train, val, test;
};

enum class VerifyMethod { cosine_threshold, mlp };

inline VerifyMethod parse_verify_method(const std::string& s) {
  if (s == "cosine" || s == "cosine_threshold") return VerifyMethod::cosine_threshold;
  if (s == "mlp") return VerifyMethod::mlp;
  throw ConfigError("unknown verification method '" + s + "' (expected cosine or mlp)");
}

struct VerifyOptions {
  std::size_t hidden = 64;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

struct VerifyReport {
  std::string method;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> threshold;
  std::size_t best_epoch = 0;
};

inline nlohmann::json to_json(const VerifyReport& r) {
  nlohmann::json j = {{"method", r.method},
                      {"train_accuracy", r.train_accuracy},
                      {"val_accuracy", r.val_accuracy},
                      {"test_accuracy", r.test_accuracy}};
  if (r.threshold) j["threshold"] = *r.threshold;
  if (r.method == "mlp") j["best_epoch"] = r.best_epoch;
  return j;
}

/// Embedded pair: (z_a, z_b, label).
struct PairEmbedding {
  Tensor a, b;
  bool same = false;
};

namespace detail {

inline double accuracy_at(const std::vector<double>& scores, const std::vector<bool>& labels, double thr) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] > thr) == labels[i];
  return static_cast<double>(ok) / static_cast<double>(scores.size());
}

/// [|a - b|, a * b, cos(a, b)] per pair.
inline Tensor pair_features(const std::vector<PairEmbedding>& pairs) {
  const std::size_t d = pairs.front().a.size();
  Tensor x(Shape{pairs.size(), 2 * d + 1});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& pa = pairs[i].a;
    const auto& pb = pairs[i].b;
    double* row = x.storage().data() + i * (2 * d + 1);
    for (std::size_t k = 0; k < d; ++k) {
      row[k] = std::abs(pa[k] - pb[k]);
      row[d + k] = pa[k] * pb[k];
    }
    row[2 * d] = similarity(pa, pb, Metric::cosine);
  }
  return x;
}

}  // namespace detail

/// Threshold on cosine chosen for validation accuracy ("same" iff cos > t).
inline VerifyReport verify_cosine(const std::vector<PairEmbedding>& train, const std::vector<PairEmbedding>& val,
                                  const std::vector<PairEmbedding>& test) {
  if (val.empty() || test.empty()) throw DataError("verify: empty validation or test split");
  auto scores = [](const std::vector<PairEmbedding>& ps) {
    std::pair<std::vector<double>, std::vector<bool>> out;
    for (const auto& p : ps) {
      out.first.push_back(similarity(p.a, p.b, Metric::cosine));
      out.second.push_back(p.same);
    }
    return out;
  };
  const auto [vs, vl] = scores(val);
  std::vector<double> sorted = vs;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> candidates = {sorted.front() - 1.0};
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    if (sorted[i + 1] > sorted[i]) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  }
  candidates.push_back(sorted.back());
  double best_acc = -1.0, best_thr = 0.0;
  for (double t : candidates) {
    const double acc = detail::accuracy_at(vs, vl, t);
    if (acc > best_acc) {
      best_acc = acc;
      best_thr = t;
    }
  }
  VerifyReport r;
  r.method = "cosine_threshold";
  r.threshold = best_thr;
  r.val_accuracy = best_acc;
  if (!train.empty()) {
    const auto [ts, tl] = scores(train);
    r.train_accuracy = detail::accuracy_at(ts, tl, best_thr);
  }
  const auto [es, el] = scores(test);
  r.test_accuracy = detail::accuracy_at(es, el, best_thr);
  return r;
}

/// One-hidden-layer classifier on frozen pair features, trained with binary
/// cross entropy; the epoch with the best validation accuracy is kept.
inline VerifyReport verify_mlp(const std::vector<PairEmbedding>& train, const std::vector<PairEmbedding>& val,
                               const std::vector<PairEmbedding>& test, const VerifyOptions& opt = {}) {
  if (train.empty() || val.empty() || test.empty()) throw DataError("verify: empty train, validation or test split");
  const Tensor xtr = detail::pair_features(train), xva = detail::pair_features(val), xte = detail::pair_features(test);
  const std::size_t f = xtr.dim(1), h = opt.hidden;
  Rng rng(opt.seed);
  Rng init = rng.split(1), order = rng.split(2);
  ParameterSet ps;
  ps.add("w1", glorot_uniform({f, h}, f, h, init));
  ps.add("b1", Tensor(Shape{h}, 0.0));
  ps.add("w2", glorot_uniform({h, 1}, h, 1, init));
  ps.add("b2", Tensor(Shape{1}, 0.0));
  auto logits = [&](const Var& x) {
    const Var hid = relu(add(matmul(x, ps.get("w1")), ps.get("b1")));
    return add(matmul(hid, ps.get("w2")), ps.get("b2"));
  };
  auto accuracy = [&](const Tensor& x, const std::vector<PairEmbedding>& pairs) {
    NoGradGuard g;
    const Tensor out = logits(Var(x)).value();
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) ok += (out[i] > 0.0) == pairs[i].same;
    return static_cast<double>(ok) / static_cast<double>(pairs.size());
  };

  std::vector<Tensor> vel;
  for (const auto& p : ps.items()) vel.emplace_back(p.var.shape(), 0.0);
  ParameterSet best = ps;
  VerifyReport r;
  r.method = "mlp";
  r.val_accuracy = accuracy(xva, val);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t ep = 1; ep <= opt.epochs; ++ep) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[order.uniform_int(i)]);
    for (std::size_t s = 0; s < idx.size(); s += opt.batch_size) {
      const std::size_t e = std::min(idx.size(), s + opt.batch_size);
      Tensor xb(Shape{e - s, f});
      std::vector<double> yb;
      for (std::size_t k = s; k < e; ++k) {
        std::copy_n(xtr.storage().begin() + static_cast<std::ptrdiff_t>(idx[k] * f), f,
                    xb.storage().begin() + static_cast<std::ptrdiff_t>((k - s) * f));
        yb.push_back(train[idx[k]].same ? 1.0 : 0.0);
      }
      for (auto& p : ps.items()) p.var.zero_grad();
      backward(bce_with_logits(logits(Var(xb)), yb));
      std::vector<Tensor*> pv;
      std::vector<const Tensor*> gv;
      std::vector<Tensor*> vv;
      std::vector<Tensor> zeros;
      zeros.reserve(ps.items().size());
      for (std::size_t k = 0; k < ps.items().size(); ++k) {
        auto& p = ps.items()[k];
        pv.push_back(&p.var.mutable_value());
        if (p.var.has_grad()) {
          gv.push_back(&p.var.grad());
        } else {
          zeros.emplace_back(p.var.shape(), 0.0);
          gv.push_back(&zeros.back());
        }
        vv.push_back(&vel[k]);
      }
      sgd_momentum_step(pv, gv, vv, opt.lr, opt.momentum);
    }
    const double va = accuracy(xva, val);
    if (va > r.val_accuracy) {
      r.val_accuracy = va;
      r.best_epoch = ep;
      best = ps;
    }
  }
  ps = best;
  r.train_accuracy = accuracy(xtr, train);
  r.test_accuracy = accuracy(xte, test);
  return r;
}

inline std::vector<PairEmbedding> embed_pairs(const Model& m, const std::vector<EpisodePair>& pairs) {
  std::vector<std::vector<Action>> eps;
  for (const auto& p : pairs) {
    eps.push_back(p.a.actions);
    eps.push_back(p.b.actions);
  }
  const auto z = m.embed(eps);
  std::vector<PairEmbedding> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) out.push_back({z[2 * i], z[2 * i + 1], pairs[i].same});
  return out;
}

inline VerifyReport verify_pairs(const Model& m, const PairSplits& pairs, VerifyMethod method,
                                 const VerifyOptions& opt = {}) {
  const auto tr = embed_pairs(m, pairs.train), va = embed_pairs(m, pairs.val), te = embed_pairs(m, pairs.test);
  return method == VerifyMethod::mlp ? verify_mlp(tr, va, te, opt) : verify_cosine(tr, va, te);
}

// ---------------------------------------------------------------------------
// Protocols over a held-out corpus

inline std::vector<Tensor> embed_all(const Model& m, const std::vector<Episode>& episodes) {
  std::vector<std::vector<Action>> raw;
  raw.reserve(episodes.size());
  for (const auto& e : episodes) raw.push_back(e.actions);
  return m.embed(raw);
}

/// Queries come from the first half of each user's held-out history and
/// targets from the second half: one target for every user, queries for
/// `num_queries` users drawn without replacement (all users when 0).
inline RankingTask make_ranking_task(const Corpus& heldout, std::size_t num_queries, std::size_t length,
                                     std::uint64_t seed, Metric metric) {
  const Rng root(seed);
  Rng pick = root.split(0);
  RankingTask task;
  task.metric = metric;
  std::vector<const UserHistory*> users;
  for (const auto& [id, h] : heldout) users.push_back(&h);
  if (users.empty()) throw DataError("ranking task: empty held-out corpus");
  if (num_queries == 0 || num_queries > users.size()) num_queries = users.size();
  std::vector<std::size_t> order(users.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < num_queries; ++i) std::swap(order[i], order[i + pick.uniform_int(order.size() - i)]);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(num_queries));
  std::sort(chosen.begin(), chosen.end());

  for (std::size_t u = 0; u < users.size(); ++u) {
    const UserHistory& h = *users[u];
    const std::size_t half = h.size() / 2;
    Rng r = root.split(1 + u);
    const UserHistory late{h.user_id, {h.actions.begin() + static_cast<std::ptrdiff_t>(half), h.actions.end()}};
    Episode t = sample_episode(late, length, r);
    t.start += half;
    task.targets.push_back(std::move(t));
  }
  for (std::size_t u : chosen) {
    const UserHistory& h = *users[u];
    const UserHistory early{h.user_id, {h.actions.begin(), h.actions.begin() + static_cast<std::ptrdiff_t>(h.size() / 2)}};
    Rng r = root.split(1 + users.size() + u);
    task.queries.push_back(sample_episode(early, length, r));
  }
  return task;
}

/// Restricts a task's queries to the given authors (targets unchanged).
inline RankingTask restrict_queries(const RankingTask& task, const std::set<std::string>& authors) {
  RankingTask out;
  out.metric = task.metric;
  out.targets = task.targets;
  for (const auto& q : task.queries) {
    if (authors.count(q.user_id)) out.queries.push_back(q);
  }
  return out;
}

struct ClusterSet {
  std::vector<Episode> episodes;
  std::vector<std::size_t> truth;  // dense author label per episode
};

/// `per_user` disjoint episodes for `num_users` users picked without
/// replacement (all users when 0).
inline ClusterSet make_cluster_set(const Corpus& heldout, std::size_t num_users, std::size_t per_user,
                                   std::size_t length, std::uint64_t seed) {
  const Rng root(seed);
  Rng pick = root.split(0);
  std::vector<const UserHistory*> users;
  for (const auto& [id, h] : heldout) users.push_back(&h);
  if (num_users == 0 || num_users > users.size()) num_users = users.size();
  for (std::size_t i = 0; i < num_users; ++i) std::swap(users[i], users[i + pick.uniform_int(users.size() - i)]);
  users.resize(num_users);
  std::sort(users.begin(), users.end(), [](auto* a, auto* b) { return a->user_id < b->user_id; });
  ClusterSet cs;
  for (std::size_t u = 0; u < users.size(); ++u) {
    Rng r = root.split(1 + u);
    for (auto& e : sample_disjoint_episodes(*users[u], per_user, length, r)) {
      cs.episodes.push_back(std::move(e));
      cs.truth.push_back(u);
    }
  }
  return cs;
}

/// Balanced same/different pairs of disjoint episodes. Users are partitioned
/// into train/val/test by `fractions`, so no author crosses splits.
inline PairSplits make_pairs(const Corpus& heldout, std::size_t pairs_per_split, std::size_t length,
                             std::uint64_t seed, std::array<double, 2> fractions = {0.6, 0.2}) {
  const Rng root(seed);
  Rng pick = root.split(0);
  std::vector<const UserHistory*> users;
  for (const auto& [id, h] : heldout) {
    if (h.size() >= 2 * length) users.push_back(&h);
  }
  for (std::size_t i = users.size(); i > 1; --i) std::swap(users[i - 1], users[pick.uniform_int(i)]);
  const std::size_t n1 = static_cast<std::size_t>(fractions[0] * static_cast<double>(users.size()));
  const std::size_t n2 = n1 + static_cast<std::size_t>(fractions[1] * static_cast<double>(users.size()));
  auto build = [&](std::size_t lo, std::size_t hi, Rng r) {
    if (hi - lo < 2) throw DataError("make_pairs: a split has fewer than two eligible users");
    std::vector<EpisodePair> out;
    for (std::size_t i = 0; i < pairs_per_split; ++i) {
      const bool same = i % 2 == 0;
      const UserHistory& ua = *users[lo + r.uniform_int(hi - lo)];
      if (same) {
        auto eps = sample_disjoint_episodes(ua, 2, length, r);
        out.push_back({std::move(eps[0]), std::move(eps[1]), true});
      } else {
        const UserHistory* ub;
        do {
          ub = users[lo + r.uniform_int(hi - lo)];
        } while (ub == &ua);
        Episode a = sample_episode(ua, length, r);
        Episode b = sample_episode(*ub, length, r);
        out.push_back({std::move(a), std::move(b), false});
      }
    }
    return out;
  };
  PairSplits s;
  s.train = build(0, n1, root.split(1));
  s.val = build(n1, n2, root.split(2));
  s.test = build(n2, users.size(), root.split(3));
  return s;
}

// ---------------------------------------------------------------------------
// Episode and embedding files

inline nlohmann::json episode_to_json(const Episode& e) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : e.actions) actions.push_back({{"ts", a.timestamp}, {"text", a.text}, {"context", a.context}});
  return {{"user_id", e.user_id}, {"start", e.start}, {"actions", actions}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  try {
    Episode e;
    e.user_id = j.at("user_id").get<std::string>();
    e.start = j.value("start", std::size_t{0});
    for (const auto& a : j.at("actions")) {
      Action act;
      act.timestamp = a.at("ts").get<std::int64_t>();
      act.text = a.at("text").get<std::string>();
      act.context = a.value("context", std::string(kUnknownContext));
      e.actions.push_back(std::move(act));
    }
    if (e.actions.empty()) throw DataError("episode of user '" + e.user_id + "' has no actions");
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("malformed episode record: ") + ex.what());
  }
}

/// One episode object per line.
inline void save_episodes(const std::vector<Episode>& eps, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : eps) out << episode_to_json(e).dump() << "\n";
}

inline std::vector<Episode> load_episodes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_pairs(const PairSplits& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto dump = [&](const std::vector<EpisodePair>& ps, const char* split) {
    for (const auto& p : ps) {
      out << nlohmann::json{{"split", split}, {"same", p.same}, {"a", episode_to_json(p.a)}, {"b", episode_to_json(p.b)}}.dump()
          << "\n";
    }
  };
  dump(s.train, "train");
  dump(s.val, "val");
  dump(s.test, "test");
}

inline PairSplits load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  PairSplits s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpisodePair p{episode_from_json(j.at("a")), episode_from_json(j.at("b")), j.at("same").get<bool>()};
      const auto split = j.at("split").get<std::string>();
      if (split == "train") {
        s.train.push_back(std::move(p));
      } else if (split == "val") {
        s.val.push_back(std::move(p));
      } else if (split == "test") {
        s.test.push_back(std::move(p));
      } else {
        throw DataError("unknown pair split '" + split + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed pair record: " + std::string(e.what()));
    }
  }
  return s;
}

inline constexpr char kEmbeddingMagic[8] = {'E', 'P', 'I', 'S', 'E', 'M', 'B', '1'};

/// Magic, u64 rows, u64 cols, then rows of little-endian float64.
inline void save_embeddings(const std::vector<Tensor>& rows, const std::filesystem::path& path) {
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  std::string out(kEmbeddingMagic, 8);
  detail::put_u64(out, rows.size());
  detail::put_u64(out, d);
  for (const auto& r : rows) {
    if (r.size() != d) throw ShapeError("save_embeddings: ragged rows");
    for (double v : r.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::write_file(path, out);
}

inline std::vector<Tensor> load_embeddings(const std::filesystem::path& path) {
  const std::string blob = detail::read_file(path);
  detail::ByteReader r(blob, path.string());
  if (blob.size() < 24 || std::memcmp(blob.data(), kEmbeddingMagic, 8) != 0) {
    throw DataError(path.string() + ": not an embedding file");
  }
  r.bytes(8);
  const std::uint64_t n = r.u64(), d = r.u64();
  if (d != 0 && n > (blob.size() - 24) / 8 / d) throw DataError(path.string() + ": truncated embedding file");
  std::vector<Tensor> rows;
  for (std::uint64_t i = 0; i < n; ++i) {
    Tensor t(Shape{d});
    for (std::uint64_t k = 0; k < d; ++k) t[k] = std::bit_cast<double>(r.u64());
    rows.push_back(std::move(t));
  }
  if (!r.done()) throw DataError(path.string() + ": trailing bytes in embedding file");
  return rows;
}

}  // namespace episodic
