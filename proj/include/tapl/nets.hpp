#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tapl/autodiff.hpp"
#include "tapl/rng.hpp"

namespace tapl::nets {

/// One trainable layer: its weight tensor first, then biases (and for conv
/// blocks the batchnorm scale and shift).
using Layer = std::vector<Tensor>;
using LayeredParams = std::vector<Layer>;

std::vector<Tensor> flatten(const LayeredParams& p);
std::size_t parameter_count(const LayeredParams& p);
/// Fresh trainable leaves with the same values, detached from any history.
LayeredParams clone_leaves(const LayeredParams& p);

enum class Arch { Mlp, Conv4 };

struct BackboneConfig {
  Arch arch = Arch::Mlp;
  std::size_t n_way = 5;
  // MLP input
  std::size_t input_dim = 16;
  std::size_t hidden = 32;
  std::size_t depth = 3;  // trainable layers of the MLP
  // CONV4 input (channels x height x width)
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t conv_width = 32;
};

/// Trainable layers M: the four conv blocks plus the classifier for CONV4,
/// `depth` for the MLP.
std::size_t backbone_layers(const BackboneConfig& cfg);
std::size_t feature_dim(const BackboneConfig& cfg);
Shape input_shape(const BackboneConfig& cfg);

LayeredParams init_backbone(const BackboneConfig& cfg, Rng& rng);

struct BackboneOutput {
  Tensor logits;    // batch x N
  Tensor features;  // batch x F, penultimate activations
};

BackboneOutput backbone_forward(const BackboneConfig& cfg, const LayeredParams& theta,
                                const Tensor& x);

/// Graph-construction net g: L fully connected layers from a logit vector to
/// one raw output, relu between layers. Length scale = exp(raw).
struct GraphNetConfig {
  std::size_t input_dim = 5;
  std::size_t hidden = 16;
  std::size_t layers = 2;
};

LayeredParams init_graph_net(const GraphNetConfig& cfg, Rng& rng);

/// sigma_i = exp(g(z_i)) for every row of `logits`; shape (n).
Tensor length_scales(const GraphNetConfig& cfg, const LayeredParams& phi, const Tensor& logits);

/// Modulator h: 2-layer MLP, relu hidden, sigmoid output of one scalar per
/// graph-net layer.
struct ModulatorConfig {
  std::size_t input_dim = 9;
  std::size_t hidden = 32;
  std::size_t output_dim = 2;
};

LayeredParams init_modulator(const ModulatorConfig& cfg, Rng& rng);

/// gamma in (0,1)^L, shape (L).
Tensor modulator_forward(const ModulatorConfig& cfg, const LayeredParams& psi, const Tensor& tau);

/// Number of modulator_forward calls made so far in this process.
std::uint64_t modulator_forward_count();

/// Scales every tensor of layer l by gamma[l]. The input is not modified.
LayeredParams modulate_params(const LayeredParams& phi, const Tensor& gamma);

/// x W + b for x: batch x in, W: in x out, b: (out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace tapl::nets
