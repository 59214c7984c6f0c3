#pragma once

#include <cstddef>

#include "tapl/autodiff.hpp"
#include "tapl/nets.hpp"

namespace tapl::embedding {

/// Task vector tau of length N*K + M: the mean of every backbone layer's
/// parameters (weights and biases pooled, layer order), followed by the mean
/// logit of each support sample (class-major, shot-minor).
Tensor build_task_embedding(const nets::LayeredParams& theta, const Tensor& support_logits,
                            std::size_t n_way, std::size_t k_shot);

inline std::size_t task_embedding_dim(std::size_t n_way, std::size_t k_shot, std::size_t layers) {
  return n_way * k_shot + layers;
}

}  // namespace tapl::embedding
