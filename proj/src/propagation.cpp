#include "tapl/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tapl::propagation {

Tensor label_matrix(std::span<const int> support_labels, std::size_t n_query, std::size_t n_way) {
  const std::size_t n = support_labels.size() + n_query;
  std::vector<double> v(n * n_way, 0.0);
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const int c = support_labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n_way) {
      throw GraphError("label_matrix: support label " + std::to_string(c) + " outside 0.." +
                       std::to_string(n_way - 1));
    }
    v[i * n_way + static_cast<std::size_t>(c)] = 1.0;
  }
  return Tensor::constant({n, n_way}, std::move(v), "label_matrix");
}

Tensor similarity_matrix(const Tensor& logits, const Tensor& sigma) {
  if (logits.rank() != 2) throw ShapeError("similarity_matrix", "logits must be n x N");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (sigma.shape() != Shape{n}) throw ShapeError("similarity_matrix", logits.shape(), sigma.shape());
  for (double s : sigma.values()) {
    if (!(s > 0.0)) throw GraphError("similarity_matrix: non-positive length scale " + std::to_string(s));
  }
  Tensor scaled = div(logits, broadcast_to(reshape(sigma, {n, 1}), {n, c}));
  Tensor kernel = exp(scale(sq_dist_matrix(scaled), -0.5));
  std::vector<double> off(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
  Tensor w = mul(kernel, Tensor::constant({n, n}, std::move(off)));
  return maximum(w, transpose(w));
}

std::size_t default_knn(std::size_t n) { return std::min<std::size_t>(20, n > 0 ? n - 1 : 0); }

Tensor knn_sparsify(const Tensor& w, std::size_t k) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) throw ShapeError("knn_sparsify", "W must be square");
  const std::size_t n = w.dim(0);
  if (k < 1 || k + 1 > n) {
    throw GraphError("knn_sparsify: k = " + std::to_string(k) + " outside [1, " +
                     std::to_string(n > 0 ? n - 1 : 0) + "]");
  }
  std::vector<double> keep(n * n, 0.0);
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < n; ++i) {
    cols.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cols.push_back(j);
    }
    std::stable_sort(cols.begin(), cols.end(),
                     [&](std::size_t a, std::size_t b) { return w.at(i, a) > w.at(i, b); });
    for (std::size_t t = 0; t < k; ++t) keep[i * n + cols[t]] = 1.0;
  }
  Tensor masked = mul(w, Tensor::constant({n, n}, std::move(keep)));
  return maximum(masked, transpose(masked));
}

Tensor normalize(const Tensor& w) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) throw ShapeError("normalize", "W must be square");
  for (double v : w.values()) {
    if (v < 0.0) throw GraphError("normalize: negative affinity " + std::to_string(v));
  }
  const std::size_t n = w.dim(0);
  Tensor dinv = rsqrt_or_zero(sum_to(w, {n, 1}));
  Tensor left = broadcast_to(dinv, {n, n});
  Tensor right = broadcast_to(reshape(dinv, {1, n}), {n, n});
  return mul(mul(left, w), right);
}

Graph build_graph(const Tensor& logits, const Tensor& sigma, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("build_graph", "logits must be n x N");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (sigma.shape() != Shape{n}) throw ShapeError("build_graph", logits.shape(), sigma.shape());
  for (double v : sigma.values()) {
    if (!(v > 0.0)) throw GraphError("build_graph: non-positive length scale " + std::to_string(v));
  }
  if (k < 1 || k + 1 > n) {
    throw GraphError("build_graph: k = " + std::to_string(k) + " outside [1, " +
                     std::to_string(n > 0 ? n - 1 : 0) + "]");
  }
  Tensor scaled = div(logits, broadcast_to(reshape(sigma, {n, 1}), {n, c}));
  Tensor log_w = scale(sq_dist_matrix(scaled), -0.5);
  log_w = maximum(log_w, transpose(log_w));

  std::vector<double> keep(n * n, 0.0);
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < n; ++i) {
    cols.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cols.push_back(j);
    }
    std::stable_sort(cols.begin(), cols.end(),
                     [&](std::size_t a, std::size_t b) { return log_w.at(i, a) > log_w.at(i, b); });
    for (std::size_t t = 0; t < k; ++t) keep[i * n + cols[t]] = 1.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double m = std::max(keep[i * n + j], keep[j * n + i]);
      keep[i * n + j] = keep[j * n + i] = m;
    }
  }
  // log degree = row max + log sum exp(shifted), over kept entries only
  std::vector<double> row_max(n, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (keep[i * n + j] > 0.0) row_max[i] = std::max(row_max[i], log_w.at(i, j));
    }
  }
  Tensor mask = Tensor::constant({n, n}, keep);
  Tensor shift = Tensor::constant({n, 1}, row_max);
  Tensor shifted = mul(mask, sub(log_w, broadcast_to(shift, {n, n})));
  Tensor log_d = add(shift, log(sum_to(mul(mask, exp(shifted)), {n, 1})));
  Tensor half = scale(log_d, 0.5);
  Tensor expo = sub(sub(log_w, broadcast_to(half, {n, n})), broadcast_to(reshape(half, {1, n}), {n, n}));

  Graph g;
  g.s = mul(mask, exp(mul(mask, expo)));
  NoGradGuard ng;
  std::vector<double> off(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
  g.w = mul(exp(log_w), Tensor::constant({n, n}, std::move(off)));
  g.w_knn = mul(g.w, mask);
  return g;
}

Tensor effective_alpha(const Tensor& alpha_raw) { return sigmoid(alpha_raw); }

double alpha_to_raw(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw GraphError("alpha must lie in (0, 1)");
  return std::log(alpha / (1.0 - alpha));
}

Tensor propagate(const Tensor& s, const Tensor& y, const Tensor& alpha_raw) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) throw ShapeError("propagate", "S must be square");
  if (y.rank() != 2 || y.dim(0) != s.dim(0)) throw ShapeError("propagate", s.shape(), y.shape());
  if (alpha_raw.numel() != 1) throw ShapeError("propagate", "alpha_raw must be a scalar");
  const std::size_t n = s.dim(0);
  Tensor alpha = broadcast_to(reshape(effective_alpha(alpha_raw), {}), {n, n});
  Tensor system = sub(Tensor::identity(n), mul(alpha, s));
  return linear_solve(system, y);
}

Tensor harden(const Tensor& f, std::size_t n_support) {
  if (f.rank() != 2 || f.dim(0) < n_support) throw ShapeError("harden", "F has fewer rows than the support set");
  return argmax_rows(rows(f, n_support, f.dim(0) - n_support));
}

PropagationResult finish(const Tensor& f, std::size_t n_support) {
  Tensor query = rows(f, n_support, f.dim(0) - n_support);
  return {f, softmax_rows(query), argmax_rows(query)};
}

}  // namespace tapl::propagation
