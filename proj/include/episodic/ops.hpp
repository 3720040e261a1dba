#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "episodic/autodiff.hpp"
#include "episodic/rng.hpp"
#include "episodic/tensor.hpp"

namespace episodic {

enum class Mode { train, eval };

/// Running statistics of a batch-norm layer. Updated only in train mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}
inline ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

inline void accumulate(Node& input, const Tensor& delta) {
  if (!input.requires_grad) return;
  Tensor& g = input.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

inline bool wants(const NodePtr& n) { return n->requires_grad; }

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

inline std::size_t leading(const Shape& s, std::size_t drop) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + drop < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are flattened.
inline Var matmul(const Var& a, const Var& b) {
  using namespace detail;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.empty() || bs.size() != 2 || as.back() != bs[0]) {
    shape_fail("matmul", "cannot multiply " + shape_str(as) + " by " + shape_str(bs));
  }
  const std::size_t m = leading(as, 1), k = bs[0], n = bs[1];
  Shape os = as;
  os.back() = n;
  Tensor out(os);
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  NodePtr an = a.node(), bn = b.node();
  return make_result("matmul", std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
    auto dy = as_mat(std::as_const(self.grad), m, n);
    if (wants(an)) {
      as_mat(an->grad_buffer(), m, k).noalias() += dy * as_mat(bn->value, k, n).transpose();
    }
    if (wants(bn)) {
      as_mat(bn->grad_buffer(), k, n).noalias() += as_mat(an->value, m, k).transpose() * dy;
    }
  });
}

/// a[m, k] x b[n, k]^T -> [m, n].
inline Var matmul_bt(const Var& a, const Var& b) {
  using namespace detail;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    shape_fail("matmul_bt", "cannot multiply " + shape_str(as) + " by transpose of " +
                                shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[0];
  Tensor out(Shape{m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), n, k).transpose();
  NodePtr an = a.node(), bn = b.node();
  return make_result("matmul_bt", std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
    auto dy = as_mat(std::as_const(self.grad), m, n);
    if (wants(an)) as_mat(an->grad_buffer(), m, k).noalias() += dy * as_mat(bn->value, n, k);
    if (wants(bn)) {
      as_mat(bn->grad_buffer(), n, k).noalias() += dy.transpose() * as_mat(an->value, m, k);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// Same-shape addition, or broadcast of `b` over the leading axes of `a`
/// when b's shape is a suffix of a's shape.
inline Var add(const Var& a, const Var& b) {
  using namespace detail;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) shape_fail("add", "cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
  const std::size_t inner = b.size();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % inner];
  NodePtr an = a.node(), bn = b.node();
  return make_result("add", std::move(out), {an, bn}, [an, bn, inner](Node& self) {
    accumulate(*an, self.grad);
    if (wants(bn)) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  using namespace detail;
  if (a.shape() != b.shape()) {
    shape_fail("sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result("sub", std::move(out), {an, bn}, [an, bn](Node& self) {
    accumulate(*an, self.grad);
    if (wants(bn)) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  using namespace detail;
  if (a.shape() != b.shape()) {
    shape_fail("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result("mul", std::move(out), {an, bn}, [an, bn](Node& self) {
    if (wants(an)) {
      Tensor& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (wants(bn)) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  NodePtr an = a.node();
  return make_result("scale", std::move(out), {an}, [an, c](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// relu'(0) = 0.
inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  NodePtr an = a.node();
  return make_result("relu", std::move(out), {an}, [an](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

/// Gradient passes only strictly inside (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::min(hi, std::max(lo, v));
  NodePtr an = a.node();
  return make_result("clamp", std::move(out), {an}, [an, lo, hi](Node& self) {
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->value[i];
      if (x > lo && x < hi) g[i] += self.grad[i];
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  NodePtr an = a.node();
  return make_result("sum", Tensor::scalar(s), {an}, [an](Node& self) {
    Tensor& g = an->grad_buffer();
    const double d = self.grad[0];
    for (double& v : g.data()) v += d;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  NodePtr an = a.node();
  return make_result("reshape", std::move(out), {an},
                     [an](Node& self) { detail::accumulate(*an, self.grad); });
}

// ---------------------------------------------------------------------------
// Structure

/// Concatenation along `axis` (negative counts from the end).
inline Var concat(const std::vector<Var>& parts, int axis) {
  using namespace detail;
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  const int r = static_cast<int>(s0.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail("concat", "axis out of range for " + shape_str(s0));
  const auto ax = static_cast<std::size_t>(axis);
  Shape os = s0;
  os[ax] = 0;
  std::vector<std::size_t> widths;
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
    if (!ok) shape_fail("concat", "incompatible " + shape_str(s) + " and " + shape_str(s0));
    os[ax] += s[ax];
    widths.push_back(s[ax] * inner);
  }
  const std::size_t outer = leading(s0, s0.size() - ax);
  const std::size_t row = os[ax] * inner;
  Tensor out(os);
  std::size_t off = 0;
  std::vector<NodePtr> ins;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * row + off));
    }
    off += widths[p];
    ins.push_back(parts[p].node());
  }
  return make_result("concat", std::move(out), ins, [ins, widths, outer, row](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ins.size(); ++p) {
      if (wants(ins[p])) {
        Tensor& g = ins[p]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < widths[p]; ++j) {
            g[o * widths[p] + j] += self.grad[o * row + off + j];
          }
        }
      }
      off += widths[p];
    }
  });
}

/// Row lookup: table[V, d] at `ids` -> lead_shape + [d].
inline Var embedding_gather(const Var& table, std::span<const std::int64_t> ids,
                            Shape lead_shape) {
  using namespace detail;
  if (table.shape().size() != 2) {
    shape_fail("embedding_gather", "table must be 2-D, got " + shape_str(table.shape()));
  }
  if (shape_numel(lead_shape) != ids.size()) {
    shape_fail("embedding_gather", "shape " + shape_str(lead_shape) + " does not hold " +
                                       std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Shape os = lead_shape;
  os.push_back(d);
  Tensor out(os);
  const auto& src = table.value().storage();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DataError("embedding_gather: id " + std::to_string(ids[i]) +
                      " out of range for table with " + std::to_string(rows) + " rows");
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  NodePtr tn = table.node();
  std::vector<std::int64_t> saved(ids.begin(), ids.end());
  return make_result("embedding_gather", std::move(out), {tn},
                     [tn, saved = std::move(saved), d](Node& self) {
                       Tensor& g = tn->grad_buffer();
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         const std::size_t base = static_cast<std::size_t>(saved[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) g[base + j] += self.grad[i * d + j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Sequence kernels

/// Valid (unpadded, stride 1) convolution. x[N, T, C], kernel[w, C, F],
/// bias[F] -> [N, T - w + 1, F].
inline Var conv1d(const Var& x, const Var& kernel, const Var& bias) {
  using namespace detail;
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 3 || ks[1] != xs[2] || bias.shape() != Shape{ks[2]}) {
    shape_fail("conv1d", "input " + shape_str(xs) + ", kernel " + shape_str(ks) + ", bias " +
                             shape_str(bias.shape()));
  }
  const std::size_t n = xs[0], t = xs[1], c = xs[2], w = ks[0], f = ks[2];
  if (t < w) {
    shape_fail("conv1d", "sequence length " + std::to_string(t) + " shorter than width " +
                             std::to_string(w));
  }
  const std::size_t out_t = t - w + 1;
  // Every flat row start is a window of w*c contiguous values; windows that
  // straddle two sequences are computed and discarded.
  const std::size_t windows = n * t - w + 1;
  RowMat all(windows, f);
  all.noalias() = ConstStridedMap(x.value().data().data(), static_cast<Eigen::Index>(windows),
                                  static_cast<Eigen::Index>(w * c),
                                  Eigen::OuterStride<>(static_cast<Eigen::Index>(c))) *
                  as_mat(kernel.value(), w * c, f);
  Tensor out(Shape{n, out_t, f});
  const auto& b = bias.value();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < out_t; ++p) {
      const std::size_t r = s * t + p;
      for (std::size_t j = 0; j < f; ++j) out[(s * out_t + p) * f + j] = all(r, j) + b[j];
    }
  }
  NodePtr xn = x.node(), kn = kernel.node(), bn = bias.node();
  return make_result(
      "conv1d", std::move(out), {xn, kn, bn}, [xn, kn, bn, n, t, c, w, f, out_t, windows](Node& self) {
        RowMat dy = RowMat::Zero(windows, f);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t p = 0; p < out_t; ++p) {
            const std::size_t r = s * t + p;
            for (std::size_t j = 0; j < f; ++j) dy(r, j) = self.grad[(s * out_t + p) * f + j];
          }
        }
        if (wants(bn)) {
          Tensor& g = bn->grad_buffer();
          for (Eigen::Index r = 0; r < dy.rows(); ++r) {
            for (std::size_t j = 0; j < f; ++j) g[j] += dy(r, j);
          }
        }
        ConstStridedMap win(xn->value.data().data(), static_cast<Eigen::Index>(windows),
                            static_cast<Eigen::Index>(w * c),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(c)));
        if (wants(kn)) as_mat(kn->grad_buffer(), w * c, f).noalias() += win.transpose() * dy;
        if (wants(xn)) {
          RowMat dwin = dy * as_mat(kn->value, w * c, f).transpose();
          Tensor& g = xn->grad_buffer();
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t p = 0; p < out_t; ++p) {
              const std::size_t r = s * t + p;
              double* dst = g.data().data() + r * c;
              for (std::size_t j = 0; j < w * c; ++j) dst[j] += dwin(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
            }
          }
        }
      });
}

/// Maximum over the second-to-last axis: [..., T, F] -> [..., F]. Ties route
/// the gradient to the first maximal position.
inline Var max_over_time(const Var& x) {
  using namespace detail;
  const Shape& xs = x.shape();
  if (xs.size() < 2) shape_fail("max_over_time", "need rank >= 2, got " + shape_str(xs));
  const std::size_t n = leading(xs, 2), t = xs[xs.size() - 2], f = xs.back();
  Shape os(xs.begin(), xs.end() - 2);
  os.push_back(f);
  Tensor out(os);
  std::vector<std::size_t> arg(n * f);
  const auto& v = x.value();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < f; ++j) {
      std::size_t best = 0;
      double bv = v[(s * t) * f + j];
      for (std::size_t p = 1; p < t; ++p) {
        const double cand = v[(s * t + p) * f + j];
        if (cand > bv) {
          bv = cand;
          best = p;
        }
      }
      out[s * f + j] = bv;
      arg[s * f + j] = (s * t + best) * f + j;
    }
  }
  NodePtr xn = x.node();
  return make_result("max_over_time", std::move(out), {xn}, [xn, arg = std::move(arg)](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

/// Mean over the second-to-last axis: [..., T, F] -> [..., F].
inline Var mean_over_time(const Var& x) {
  using namespace detail;
  const Shape& xs = x.shape();
  if (xs.size() < 2) shape_fail("mean_over_time", "need rank >= 2, got " + shape_str(xs));
  const std::size_t n = leading(xs, 2), t = xs[xs.size() - 2], f = xs.back();
  Shape os(xs.begin(), xs.end() - 2);
  os.push_back(f);
  Tensor out(os);
  const auto& v = x.value();
  const double inv = 1.0 / static_cast<double>(t);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < t; ++p) {
      for (std::size_t j = 0; j < f; ++j) out[s * f + j] += v[(s * t + p) * f + j];
    }
  }
  for (double& o : out.data()) o *= inv;
  NodePtr xn = x.node();
  return make_result("mean_over_time", std::move(out), {xn}, [xn, n, t, f, inv](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < t; ++p) {
        for (std::size_t j = 0; j < f; ++j) g[(s * t + p) * f + j] += inv * self.grad[s * f + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and probability

/// Softmax along `axis` (negative counts from the end).
inline Var softmax(const Var& x, int axis = -1) {
  using namespace detail;
  const Shape& xs = x.shape();
  const int r = static_cast<int>(xs.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail("softmax", "axis out of range for " + shape_str(xs));
  const auto ax = static_cast<std::size_t>(axis);
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[ax], outer = x.size() / (len * inner);
  Tensor out(xs);
  const auto& v = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, v[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(v[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  NodePtr xn = x.node();
  auto y = std::make_shared<Tensor>(out);
  return make_result("softmax", std::move(out), {xn}, [xn, y, outer, inner, len](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * (*y)[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += (*y)[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

/// Normalizes each row over the last axis, then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6) {
  using namespace detail;
  const Shape& xs = x.shape();
  if (xs.empty() || gain.shape() != Shape{xs.back()} || bias.shape() != Shape{xs.back()}) {
    shape_fail("layer_norm", "input " + shape_str(xs) + ", gain " + shape_str(gain.shape()) +
                                 ", bias " + shape_str(bias.shape()));
  }
  const std::size_t c = xs.back(), rows = x.size() / c;
  auto xhat = std::make_shared<Tensor>(xs);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xs);
  const auto& v = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += v[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (v[r * c + j] - mu) * (v[r * c + j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (v[r * c + j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result("layer_norm", std::move(out), {xn, gn, bn},
                     [xn, gn, bn, xhat, inv_std, rows, c](Node& self) {
                       const auto& dy = self.grad;
                       if (wants(gn)) {
                         Tensor& g = gn->grad_buffer();
                         for (std::size_t i = 0; i < dy.size(); ++i) g[i % c] += dy[i] * (*xhat)[i];
                       }
                       if (wants(bn)) {
                         Tensor& g = bn->grad_buffer();
                         for (std::size_t i = 0; i < dy.size(); ++i) g[i % c] += dy[i];
                       }
                       if (!wants(xn)) return;
                       Tensor& g = xn->grad_buffer();
                       std::vector<double> dh(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           dh[j] = dy[r * c + j] * gn->value[j];
                           m1 += dh[j];
                           m2 += dh[j] * (*xhat)[r * c + j];
                         }
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (std::size_t j = 0; j < c; ++j) {
                           g[r * c + j] += (*inv_std)[r] * (dh[j] - m1 - (*xhat)[r * c + j] * m2);
                         }
                       }
                     });
}

/// Batch normalization over the rows of x[N, C]. Train mode normalizes with
/// batch statistics and folds them into `state` with the given momentum;
/// eval mode uses the running statistics.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
                      Mode mode, double momentum = 0.9, double eps = 1e-5) {
  using namespace detail;
  const Shape& xs = x.shape();
  if (xs.size() != 2 || gamma.shape() != Shape{xs[1]} || beta.shape() != Shape{xs[1]} ||
      state.running_mean.shape() != Shape{xs[1]} || state.running_var.shape() != Shape{xs[1]}) {
    shape_fail("batch_norm", "input " + shape_str(xs) + ", gamma " + shape_str(gamma.shape()) +
                                 ", running " + shape_str(state.running_mean.shape()));
  }
  const std::size_t n = xs[0], c = xs[1];
  const auto& v = x.value();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) mu[j] += v[i * c + j];
    }
    for (double& m : mu) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double d = v[i * c + j] - mu[j];
        var[j] += d * d;
      }
    }
    for (double& s : var) s /= static_cast<double>(n);
    const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
    for (std::size_t j = 0; j < c; ++j) {
      state.running_mean[j] = momentum * state.running_mean[j] + (1.0 - momentum) * mu[j];
      state.running_var[j] = momentum * state.running_var[j] + (1.0 - momentum) * var[j] * unbias;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = state.running_mean[j];
      var[j] = state.running_var[j];
    }
  }
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<Tensor>(xs);
  Tensor out(xs);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (v[i * c + j] - mu[j]) * (*inv_std)[j];
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool batch_stats = mode == Mode::train;
  return make_result("batch_norm", std::move(out), {xn, gn, bn},
                     [xn, gn, bn, xhat, inv_std, n, c, batch_stats](Node& self) {
                       const auto& dy = self.grad;
                       std::vector<double> sum_dh(c, 0.0), sum_dh_xh(c, 0.0);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dh = dy[i * c + j] * gn->value[j];
                           sum_dh[j] += dh;
                           sum_dh_xh[j] += dh * (*xhat)[i * c + j];
                         }
                       }
                       if (wants(gn)) {
                         Tensor& g = gn->grad_buffer();
                         for (std::size_t i = 0; i < dy.size(); ++i) g[i % c] += dy[i] * (*xhat)[i];
                       }
                       if (wants(bn)) {
                         Tensor& g = bn->grad_buffer();
                         for (std::size_t i = 0; i < dy.size(); ++i) g[i % c] += dy[i];
                       }
                       if (!wants(xn)) return;
                       Tensor& g = xn->grad_buffer();
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dh = dy[i * c + j] * gn->value[j];
                           if (batch_stats) {
                             g[i * c + j] += (*inv_std)[j] *
                                             (dh - inv_n * sum_dh[j] -
                                              (*xhat)[i * c + j] * inv_n * sum_dh_xh[j]);
                           } else {
                             g[i * c + j] += (*inv_std)[j] * dh;
                           }
                         }
                       }
                     });
}

/// Inverted dropout. Identity in eval mode or at rate 0.
inline Var dropout(const Var& x, double rate, Mode mode, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout: train mode needs an rng");
  const double keep = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng->uniform() >= rate ? keep : 0.0;
    out[i] *= (*mask)[i];
  }
  NodePtr xn = x.node();
  return make_result("dropout", std::move(out), {xn}, [xn, mask](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*mask)[i] * self.grad[i];
  });
}

/// Multi-head attention core. q, k, v: [B, L, H] with H divisible by
/// `heads`; each head attends over its H/heads slice with scores scaled by
/// 1/sqrt(H/heads).
inline Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  using namespace detail;
  const Shape& qs = q.shape();
  if (qs.size() != 3 || k.shape() != qs || v.shape() != qs || heads == 0 || qs[2] % heads != 0) {
    shape_fail("scaled_dot_product_attention",
               "q " + shape_str(qs) + ", k " + shape_str(k.shape()) + ", v " +
                   shape_str(v.shape()) + ", heads " + std::to_string(heads));
  }
  const std::size_t b = qs[0], l = qs[1], h = qs[2], dh = h / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto L = static_cast<Eigen::Index>(l), DH = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(h));
  auto probs = std::make_shared<std::vector<RowMat>>(b * heads);
  Tensor out(qs);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t hi = 0; hi < heads; ++hi) {
      const std::size_t off = bi * l * h + hi * dh;
      ConstStridedMap qm(q.value().data().data() + off, L, DH, stride);
      ConstStridedMap km(k.value().data().data() + off, L, DH, stride);
      ConstStridedMap vm(v.value().data().data() + off, L, DH, stride);
      RowMat s = (qm * km.transpose()) * sc;
      for (Eigen::Index r = 0; r < L; ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      StridedMap om(out.data().data() + off, L, DH, stride);
      om.noalias() = s * vm;
      (*probs)[bi * heads + hi] = std::move(s);
    }
  }
  NodePtr qn = q.node(), kn = k.node(), vn = v.node();
  return make_result(
      "scaled_dot_product_attention", std::move(out), {qn, kn, vn},
      [qn, kn, vn, probs, b, l, h, heads, dh, sc](Node& self) {
        const auto L = static_cast<Eigen::Index>(l), DH = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(h));
        Tensor* gq = wants(qn) ? &qn->grad_buffer() : nullptr;
        Tensor* gk = wants(kn) ? &kn->grad_buffer() : nullptr;
        Tensor* gv = wants(vn) ? &vn->grad_buffer() : nullptr;
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t hi = 0; hi < heads; ++hi) {
            const std::size_t off = bi * l * h + hi * dh;
            const RowMat& p = (*probs)[bi * heads + hi];
            ConstStridedMap dy(self.grad.data().data() + off, L, DH, stride);
            ConstStridedMap qm(qn->value.data().data() + off, L, DH, stride);
            ConstStridedMap km(kn->value.data().data() + off, L, DH, stride);
            ConstStridedMap vm(vn->value.data().data() + off, L, DH, stride);
            if (gv) StridedMap(gv->data().data() + off, L, DH, stride).noalias() += p.transpose() * dy;
            RowMat dp = dy * vm.transpose();
            RowMat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
            ds *= sc;
            if (gq) StridedMap(gq->data().data() + off, L, DH, stride).noalias() += ds * km;
            if (gk) StridedMap(gk->data().data() + off, L, DH, stride).noalias() += ds.transpose() * qm;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss-side primitives

/// Scales each row of x[N, D] to unit Euclidean norm.
inline Var l2_normalize_rows(const Var& x) {
  using namespace detail;
  const Shape& xs = x.shape();
  if (xs.size() != 2) shape_fail("l2_normalize_rows", "need 2-D input, got " + shape_str(xs));
  const std::size_t n = xs[0], d = xs[1];
  auto norms = std::make_shared<std::vector<double>>(n);
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
    const double nr = std::sqrt(s);
    if (!(nr > 0.0)) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    }
    (*norms)[i] = nr;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= nr;
  }
  auto y = std::make_shared<Tensor>(out);
  NodePtr xn = x.node();
  return make_result("l2_normalize_rows", std::move(out), {xn}, [xn, y, norms, n, d](Node& self) {
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += (*y)[i * d + j] * self.grad[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        g[i * d + j] += (self.grad[i * d + j] - (*y)[i * d + j] * dot) / (*norms)[i];
      }
    }
  });
}

/// cos(theta + m) from cos(theta), with sin(theta) taken as sqrt(1 - cos^2),
/// i.e. the sign of theta is discarded.
inline double cos_plus_margin(double cos_theta, double margin) {
  const double sin_theta = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
  return cos_theta * std::cos(margin) - sin_theta * std::sin(margin);
}

/// Replaces the entry of each row of cosines[N, Y] at its label with
/// cos(theta + margin). Inputs are expected inside [-1, 1].
inline Var additive_angular_margin(const Var& cosines, std::span<const std::size_t> labels,
                                   double margin) {
  using namespace detail;
  const Shape& cs = cosines.shape();
  if (cs.size() != 2 || labels.size() != cs[0]) {
    shape_fail("additive_angular_margin", "cosines " + shape_str(cs) + " with " +
                                              std::to_string(labels.size()) + " labels");
  }
  const std::size_t y = cs[1];
  Tensor out = cosines.value();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= y) {
      throw DataError("additive_angular_margin: label " + std::to_string(labels[i]) +
                      " out of range [0, " + std::to_string(y) + ")");
    }
    out[i * y + labels[i]] = cos_plus_margin(out[i * y + labels[i]], margin);
  }
  NodePtr cn = cosines.node();
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return make_result("additive_angular_margin", std::move(out), {cn},
                     [cn, saved = std::move(saved), y, margin](Node& self) {
                       Tensor& g = cn->grad_buffer();
                       const double cm = std::cos(margin), sm = std::sin(margin);
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         for (std::size_t j = 0; j < y; ++j) {
                           const std::size_t idx = i * y + j;
                           if (j != saved[i]) {
                             g[idx] += self.grad[idx];
                             continue;
                           }
                           const double c = cn->value[idx];
                           const double s2 = 1.0 - c * c;
                           double dcos = cm;
                           if (s2 > 0.0) dcos += sm * c / std::sqrt(s2);
                           g[idx] += self.grad[idx] * dcos;
                         }
                       }
                     });
}

/// Mean negative log-likelihood of softmax(logits[N, Y]) at `labels`.
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  using namespace detail;
  const Shape& ls = logits.shape();
  if (ls.size() != 2 || labels.size() != ls[0]) {
    shape_fail("cross_entropy", "logits " + shape_str(ls) + " with " +
                                    std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = ls[0], y = ls[1];
  auto probs = std::make_shared<Tensor>(ls);
  double total = 0.0;
  const auto& v = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= y) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) +
                      " out of range [0, " + std::to_string(y) + ")");
    }
    std::size_t arg = 0;
    for (std::size_t j = 1; j < y; ++j) {
      if (v[i * y + j] > v[i * y + arg]) arg = j;
    }
    const double mx = v[i * y + arg];
    // log Z = mx + log1p(rest) keeps tiny losses of confident rows exact.
    double rest = 0.0;
    for (std::size_t j = 0; j < y; ++j) {
      const double e = std::exp(v[i * y + j] - mx);
      (*probs)[i * y + j] = e;
      if (j != arg) rest += e;
    }
    for (std::size_t j = 0; j < y; ++j) (*probs)[i * y + j] /= 1.0 + rest;
    total += -(v[i * y + labels[i]] - mx - std::log1p(rest));
  }
  NodePtr ln = logits.node();
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return make_result("cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {ln},
                     [ln, probs, saved = std::move(saved), n, y](Node& self) {
                       Tensor& g = ln->grad_buffer();
                       const double d = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < y; ++j) {
                           const double ind = j == saved[i] ? 1.0 : 0.0;
                           g[i * y + j] += d * ((*probs)[i * y + j] - ind);
                         }
                       }
                     });
}

/// Mean binary cross entropy of sigmoid(logits) against 0/1 targets.
inline Var bce_with_logits(const Var& logits, std::span<const double> targets) {
  if (logits.size() != targets.size()) {
    detail::shape_fail("bce_with_logits", "logits " + shape_str(logits.shape()) + " with " +
                                              std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = targets.size();
  double total = 0.0;
  const auto& v = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = v[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x * t
    total += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * targets[i];
  }
  NodePtr ln = logits.node();
  std::vector<double> saved(targets.begin(), targets.end());
  return make_result("bce_with_logits", Tensor::scalar(total / static_cast<double>(n)), {ln},
                     [ln, saved = std::move(saved), n](Node& self) {
                       Tensor& g = ln->grad_buffer();
                       const double d = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double s = 1.0 / (1.0 + std::exp(-ln->value[i]));
                         g[i] += d * (s - saved[i]);
                       }
                     });
}

}  // namespace episodic
