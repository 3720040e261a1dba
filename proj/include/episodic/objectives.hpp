#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "episodic/autodiff.hpp"
#include "episodic/encoder.hpp"
#include "episodic/ops.hpp"

namespace episodic {

enum class LossKind { sm, am };
enum class Metric { cosine, euclidean };

inline std::string to_string(LossKind k) { return k == LossKind::sm ? "sm" : "am"; }
inline std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "sm") return LossKind::sm;
  if (s == "am") return LossKind::am;
  throw ConfigError("unknown loss '" + s + "' (expected sm or am)");
}

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "euclidean") return Metric::euclidean;
  throw ConfigError("unknown metric '" + s + "' (expected cosine or euclidean)");
}

/// The metric that matches a training loss.
inline Metric default_metric(LossKind k) { return k == LossKind::am ? Metric::cosine : Metric::euclidean; }

/// Plain softmax logits z W^T.
inline Var sm_logits(const Var& w, const Var& z) { return matmul_bt(z, w); }

inline Var sm_loss(const Var& w, const Var& z, std::span<const std::size_t> labels) {
  return cross_entropy(sm_logits(w, z), labels);
}

/// Clamped cosines between the rows of z and the rows of w.
inline Var am_cosines(const Var& w, const Var& z) {
  return clamp(matmul_bt(l2_normalize_rows(z), l2_normalize_rows(w)), -1.0, 1.0);
}

/// s * cos(theta + m) at each label, s * cos(theta) elsewhere.
inline Var am_logits(const Var& w, const Var& z, std::span<const std::size_t> labels, double margin,
                     double scale_s) {
  return scale(additive_angular_margin(am_cosines(w, z), labels, margin), scale_s);
}

inline Var am_loss(const Var& w, const Var& z, std::span<const std::size_t> labels, double margin,
                   double scale_s) {
  return cross_entropy(am_logits(w, z, labels, margin, scale_s), labels);
}

struct HeadConfig {
  LossKind loss = LossKind::am;
  double margin = 0.5;
  double scale = 64.0;

  void validate() const {
    if (loss == LossKind::am && !(margin > 0.0)) throw ConfigError("am head: margin must be > 0");
    if (loss == LossKind::am && !(scale > 0.0)) throw ConfigError("am head: scale must be > 0");
  }
};

/// Classification head over the training authors. Discarded after training.
class Head {
 public:
  Head(HeadConfig cfg, std::size_t num_classes, std::size_t dim, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (num_classes < 2) throw ConfigError("head: need at least 2 training authors, got " + std::to_string(num_classes));
    Rng rng(seed);
    params_.add("head.W", glorot_uniform({num_classes, dim}, dim, num_classes, rng));
  }

  const HeadConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return weight().dim(0); }
  const Var& weight() const { return params_.get("head.W"); }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Var loss(const Var& z, std::span<const std::size_t> labels) const {
    if (cfg_.loss == LossKind::sm) return sm_loss(weight(), z, labels);
    return am_loss(weight(), z, labels, cfg_.margin, cfg_.scale);
  }

  /// Predicted class per row (argmax of logits without margin; first index
  /// on ties).
  std::vector<std::size_t> predict(const Var& z) const {
    NoGradGuard guard;
    const Var scores = cfg_.loss == LossKind::sm ? sm_logits(weight(), z) : am_cosines(weight(), z);
    const std::size_t n = scores.dim(0), y = scores.dim(1);
    std::vector<std::size_t> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 1; j < y; ++j) {
        if (scores.value()[i * y + j] > scores.value()[i * y + out[i]]) out[i] = j;
      }
    }
    return out;
  }

 private:
  HeadConfig cfg_;
  ParameterSet params_;
};

/// Higher is more similar for both metrics: cosine similarity, or the
/// negated Euclidean distance.
inline double similarity(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (a.size() != b.size()) {
    throw ShapeError("similarity: dimensions " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  if (metric == Metric::euclidean) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return -std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("similarity: zero vector under cosine");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double similarity(const Tensor& a, const Tensor& b, Metric metric) {
  return similarity(a.data(), b.data(), metric);
}

}  // namespace episodic
