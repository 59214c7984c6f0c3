#include "tapl/embedding.hpp"

namespace tapl::embedding {

Tensor build_task_embedding(const nets::LayeredParams& theta, const Tensor& support_logits,
                            std::size_t n_way, std::size_t k_shot) {
  const std::size_t nk = n_way * k_shot;
  if (support_logits.rank() != 2 || support_logits.dim(0) != nk ||
      support_logits.dim(1) != n_way) {
    throw ShapeError("build_task_embedding", support_logits.shape(), Shape{nk, n_way});
  }
  std::vector<Tensor> parts;
  parts.reserve(theta.size() + 1);
  for (const auto& layer : theta) {
    if (layer.empty()) throw ShapeError("build_task_embedding", "layer without parameters");
    Tensor total = sum(layer.front());
    std::size_t count = layer.front().numel();
    for (std::size_t i = 1; i < layer.size(); ++i) {
      total = add(total, sum(layer[i]));
      count += layer[i].numel();
    }
    parts.push_back(reshape(scale(total, 1.0 / static_cast<double>(count)), {1}));
  }
  Tensor row_means = scale(sum_to(support_logits, {nk, 1}), 1.0 / static_cast<double>(n_way));
  parts.push_back(reshape(row_means, {nk}));
  return concat(parts);
}

}  // namespace tapl::embedding
