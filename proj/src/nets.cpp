#include "tapl/nets.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>

namespace tapl::nets {

namespace {

std::atomic<std::uint64_t> g_modulator_calls{0};

// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Layer dense_layer(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return {Tensor::parameter({in, out}, std::move(w)),
          Tensor::parameter({out}, std::vector<double>(out, 0.0))};
}

Layer conv_block(std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  const std::size_t fan_in = in_ch * 9;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> w(out_ch * fan_in);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return {Tensor::parameter({out_ch, in_ch, 3, 3}, std::move(w)),
          Tensor::parameter({out_ch}, std::vector<double>(out_ch, 0.0)),
          Tensor::parameter({out_ch}, std::vector<double>(out_ch, 1.0)),
          Tensor::parameter({out_ch}, std::vector<double>(out_ch, 0.0))};
}

void check_layers(const char* what, const LayeredParams& p, std::size_t expected) {
  if (p.size() != expected) {
    throw ShapeError(what, "expected " + std::to_string(expected) + " layers, got " +
                               std::to_string(p.size()));
  }
}

}  // namespace

std::vector<Tensor> flatten(const LayeredParams& p) {
  std::vector<Tensor> out;
  for (const auto& layer : p) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

std::size_t parameter_count(const LayeredParams& p) {
  std::size_t n = 0;
  for (const auto& t : flatten(p)) n += t.numel();
  return n;
}

LayeredParams clone_leaves(const LayeredParams& p) {
  LayeredParams out;
  for (const auto& layer : p) {
    Layer l;
    for (const auto& t : layer) l.push_back(t.clone_leaf(true));
    out.push_back(std::move(l));
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return add(y, broadcast_to(b, y.shape()));
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

std::size_t backbone_layers(const BackboneConfig& cfg) {
  return cfg.arch == Arch::Conv4 ? 5 : cfg.depth;
}

std::size_t feature_dim(const BackboneConfig& cfg) {
  if (cfg.arch == Arch::Conv4) return cfg.conv_width * (cfg.height / 8) * (cfg.width / 8);
  return cfg.depth > 1 ? cfg.hidden : cfg.input_dim;
}

Shape input_shape(const BackboneConfig& cfg) {
  if (cfg.arch == Arch::Conv4) return {cfg.channels, cfg.height, cfg.width};
  return {cfg.input_dim};
}

LayeredParams init_backbone(const BackboneConfig& cfg, Rng& rng) {
  LayeredParams p;
  if (cfg.arch == Arch::Conv4) {
    if (cfg.height % 8 || cfg.width % 8 || cfg.height < 8 || cfg.width < 8) {
      throw ShapeError("init_backbone", "CONV4 input height/width must be multiples of 8");
    }
    std::size_t in = cfg.channels;
    for (int b = 0; b < 4; ++b) {
      p.push_back(conv_block(in, cfg.conv_width, rng));
      in = cfg.conv_width;
    }
    p.push_back(dense_layer(feature_dim(cfg), cfg.n_way, rng));
    return p;
  }
  if (cfg.depth < 1) throw ShapeError("init_backbone", "MLP depth must be >= 1");
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l + 1 < cfg.depth; ++l) {
    p.push_back(dense_layer(in, cfg.hidden, rng));
    in = cfg.hidden;
  }
  p.push_back(dense_layer(in, cfg.n_way, rng));
  return p;
}

BackboneOutput backbone_forward(const BackboneConfig& cfg, const LayeredParams& theta,
                                const Tensor& x) {
  check_layers("backbone_forward", theta, backbone_layers(cfg));
  Shape expect = input_shape(cfg);
  if (x.rank() != expect.size() + 1 ||
      !std::equal(expect.begin(), expect.end(), x.shape().begin() + 1)) {
    throw ShapeError("backbone_forward", x.shape(), expect);
  }
  const std::size_t batch = x.dim(0);
  Tensor h = x;
  if (cfg.arch == Arch::Conv4) {
    for (std::size_t b = 0; b < 4; ++b) {
      const Layer& l = theta[b];
      h = conv2d(h, l[0], 1);
      Shape bias_shape{1, l[1].dim(0), 1, 1};
      h = add(h, broadcast_to(reshape(l[1], bias_shape), h.shape()));
      h = relu(batchnorm_channels(h, l[2], l[3]));
      if (b < 3) h = max_pool2d(h);
    }
    Tensor features = reshape(h, {batch, h.numel() / batch});
    return {linear(features, theta[4][0], theta[4][1]), features};
  }
  for (std::size_t l = 0; l + 1 < theta.size(); ++l) {
    h = relu(linear(h, theta[l][0], theta[l][1]));
  }
  return {linear(h, theta.back()[0], theta.back()[1]), h};
}

// ---------------------------------------------------------------------------
// graph-construction net
// ---------------------------------------------------------------------------

LayeredParams init_graph_net(const GraphNetConfig& cfg, Rng& rng) {
  if (cfg.layers < 1) throw ShapeError("init_graph_net", "needs at least one layer");
  LayeredParams p;
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t out = l + 1 == cfg.layers ? 1 : cfg.hidden;
    p.push_back(dense_layer(in, out, rng));
    in = out;
  }
  return p;
}

Tensor length_scales(const GraphNetConfig& cfg, const LayeredParams& phi, const Tensor& logits) {
  check_layers("length_scales", phi, cfg.layers);
  if (logits.rank() != 2 || logits.dim(1) != cfg.input_dim) {
    throw ShapeError("length_scales", logits.shape(), Shape{logits.rank() ? logits.dim(0) : 0, cfg.input_dim});
  }
  Tensor h = logits;
  for (std::size_t l = 0; l < phi.size(); ++l) {
    h = linear(h, phi[l][0], phi[l][1]);
    if (l + 1 < phi.size()) h = relu(h);
  }
  return exp(reshape(h, {logits.dim(0)}));
}

// ---------------------------------------------------------------------------
// modulator
// ---------------------------------------------------------------------------

LayeredParams init_modulator(const ModulatorConfig& cfg, Rng& rng) {
  return {dense_layer(cfg.input_dim, cfg.hidden, rng), dense_layer(cfg.hidden, cfg.output_dim, rng)};
}

Tensor modulator_forward(const ModulatorConfig& cfg, const LayeredParams& psi, const Tensor& tau) {
  check_layers("modulator_forward", psi, 2);
  if (tau.shape() != Shape{cfg.input_dim}) {
    throw ShapeError("modulator_forward", tau.shape(), Shape{cfg.input_dim});
  }
  g_modulator_calls.fetch_add(1, std::memory_order_relaxed);
  Tensor h = relu(linear(reshape(tau, {1, cfg.input_dim}), psi[0][0], psi[0][1]));
  Tensor out = sigmoid(linear(h, psi[1][0], psi[1][1]));
  return reshape(out, {cfg.output_dim});
}

std::uint64_t modulator_forward_count() { return g_modulator_calls.load(); }

LayeredParams modulate_params(const LayeredParams& phi, const Tensor& gamma) {
  if (gamma.shape() != Shape{phi.size()}) {
    throw ShapeError("modulate_params", gamma.shape(), Shape{phi.size()});
  }
  LayeredParams out;
  out.reserve(phi.size());
  for (std::size_t l = 0; l < phi.size(); ++l) {
    Tensor g = reshape(rows(gamma, l, 1), {});
    Layer layer;
    for (const auto& t : phi[l]) layer.push_back(mul(broadcast_to(g, t.shape()), t));
    out.push_back(std::move(layer));
  }
  return out;
}

}  // namespace tapl::nets
