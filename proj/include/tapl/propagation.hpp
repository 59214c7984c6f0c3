#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>

#include "tapl/autodiff.hpp"

namespace tapl::propagation {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// (n_support + n_query) x N; support rows one-hot, query rows zero.
Tensor label_matrix(std::span<const int> support_labels, std::size_t n_query, std::size_t n_way);

/// W[i][j] = exp(-1/2 |z_i/s_i - z_j/s_j|^2) off the diagonal, 0 on it,
/// symmetrized by elementwise max with its transpose.
Tensor similarity_matrix(const Tensor& logits, const Tensor& sigma);

/// Keeps the k largest off-diagonal entries of every row (lower column index
/// wins ties), then symmetrizes by elementwise max.
Tensor knn_sparsify(const Tensor& w, std::size_t k);

/// Default neighbor count min(20, n - 1).
std::size_t default_knn(std::size_t n);

/// S = D^-1/2 W D^-1/2; zero-degree rows and columns stay zero.
Tensor normalize(const Tensor& w);

struct Graph {
  Tensor w;      // similarity_matrix, values only
  Tensor w_knn;  // after knn_sparsify, values only
  Tensor s;      // normalized, differentiable
};

/// normalize(knn_sparsify(similarity_matrix(logits, sigma), k)) evaluated in
/// the log domain, so that degrees far below the double range still give a
/// finite S and finite gradients. Neighbours are ranked by log affinity.
Graph build_graph(const Tensor& logits, const Tensor& sigma, std::size_t k);

/// sigmoid(alpha_raw), always strictly inside (0, 1).
Tensor effective_alpha(const Tensor& alpha_raw);
/// alpha_raw such that sigmoid(alpha_raw) == alpha.
double alpha_to_raw(double alpha);

/// F = (I - alpha S)^-1 Y with alpha = sigmoid(alpha_raw).
Tensor propagate(const Tensor& s, const Tensor& y, const Tensor& alpha_raw);

/// Argmax of each query row of F (rows n_support..), shape (Q). No gradient.
Tensor harden(const Tensor& f, std::size_t n_support);

struct PropagationResult {
  Tensor f;           // (NK + Q) x N
  Tensor soft_query;  // row softmax of the query rows of F
  Tensor pseudo;      // (Q) hard pseudo labels
};

PropagationResult finish(const Tensor& f, std::size_t n_support);

}  // namespace tapl::propagation
