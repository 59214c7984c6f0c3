#include <algorithm>

#include "tapl/embedding.hpp"
#include "tapl/harness.hpp"

namespace tapl::harness {

namespace {

using Inputs = std::vector<Tensor>;

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::constant(std::move(shape), std::move(v));
}

// Values in [lo, hi] with magnitude at least `gap`, random sign.
Tensor away_from_zero(Rng& rng, Shape shape, double gap, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(gap, hi);
  return Tensor::constant(std::move(shape), std::move(v));
}

// Distinct values spaced well beyond the difference step, so max and kink
// decisions stay put under perturbation.
Tensor distinct(Rng& rng, Shape shape) {
  const std::size_t n = numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -2.0 + 4.0 * static_cast<double>(i) / static_cast<double>(n);
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return Tensor::constant(std::move(shape), std::move(v));
}

nets::LayeredParams regroup(const nets::LayeredParams& like, const Inputs& flat, std::size_t offset) {
  nets::LayeredParams out;
  std::size_t k = offset;
  for (const auto& layer : like) {
    nets::Layer l;
    for (std::size_t i = 0; i < layer.size(); ++i) l.push_back(flat.at(k++));
    out.push_back(std::move(l));
  }
  return out;
}

struct Case {
  std::string name;
  std::function<Tensor(const Inputs&)> op;  // differentiable map to any shape
  Inputs inputs;
};

GradSuiteEntry check(const std::string& name, const GraphBuilder& f, const Inputs& inputs, double tol) {
  GradSuiteEntry e;
  e.name = name;
  e.tol = tol;
  try {
    auto r = gradcheck(f, inputs, 1e-5, tol);
    e.passed = r.passed;
    e.max_rel_error = r.max_rel_error;
    e.checked = r.entries.size();
  } catch (const std::exception& ex) {
    e.passed = false;
    e.error = ex.what();
  }
  return e;
}

std::vector<Case> primitive_cases(Rng& rng) {
  std::vector<Case> c;
  auto u = [&](Shape s) { return uniform(rng, std::move(s), -2.0, 2.0); };
  auto pos = [&](Shape s) { return uniform(rng, std::move(s), 0.5, 2.0); };

  c.push_back({"add", [](const Inputs& x) { return add(x[0], x[1]); }, {u({3, 4}), u({3, 4})}});
  c.push_back({"sub", [](const Inputs& x) { return sub(x[0], x[1]); }, {u({3, 4}), u({3, 4})}});
  c.push_back({"mul", [](const Inputs& x) { return mul(x[0], x[1]); }, {u({3, 4}), u({3, 4})}});
  c.push_back({"div", [](const Inputs& x) { return div(x[0], x[1]); },
               {u({3, 4}), away_from_zero(rng, {3, 4}, 0.5, 2.0)}});
  {
    Tensor a = u({3, 4});
    std::vector<double> b(a.values().begin(), a.values().end());
    for (auto& v : b) v += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
    c.push_back({"maximum", [](const Inputs& x) { return maximum(x[0], x[1]); },
                 {a, Tensor::constant({3, 4}, b)}});
  }
  c.push_back({"neg", [](const Inputs& x) { return neg(x[0]); }, {u({5})}});
  c.push_back({"scale", [](const Inputs& x) { return scale(x[0], -1.7); }, {u({5})}});
  c.push_back({"add_scalar", [](const Inputs& x) { return add_scalar(x[0], 0.3); }, {u({5})}});
  c.push_back({"exp", [](const Inputs& x) { return exp(x[0]); }, {u({2, 3})}});
  c.push_back({"log", [](const Inputs& x) { return log(x[0]); }, {pos({2, 3})}});
  c.push_back({"relu", [](const Inputs& x) { return relu(x[0]); }, {away_from_zero(rng, {2, 4}, 0.1, 2.0)}});
  c.push_back({"sigmoid", [](const Inputs& x) { return sigmoid(x[0]); }, {u({2, 3})}});
  c.push_back({"rsqrt_or_zero", [](const Inputs& x) { return rsqrt_or_zero(x[0]); }, {pos({4})}});
  c.push_back({"matmul", [](const Inputs& x) { return matmul(x[0], x[1]); }, {u({3, 4}), u({4, 2})}});
  c.push_back({"transpose", [](const Inputs& x) { return transpose(x[0]); }, {u({3, 2})}});
  c.push_back({"reshape", [](const Inputs& x) { return reshape(x[0], {2, 3}); }, {u({3, 2})}});
  c.push_back({"broadcast_to", [](const Inputs& x) { return broadcast_to(x[0], {2, 3, 4}); }, {u({3, 1})}});
  c.push_back({"sum_to", [](const Inputs& x) { return sum_to(x[0], {3, 1}); }, {u({2, 3, 4})}});
  c.push_back({"sum", [](const Inputs& x) { return sum(x[0]); }, {u({3, 3})}});
  c.push_back({"mean", [](const Inputs& x) { return mean(x[0]); }, {u({3, 3})}});
  {
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{4, 0, 0, 2, 5, 1, 4});
    c.push_back({"gather", [idx](const Inputs& x) { return gather(x[0], idx, {7}); }, {u({6})}});
    c.push_back({"scatter_add", [idx](const Inputs& x) { return scatter_add(x[0], idx, {6}); }, {u({7})}});
  }
  c.push_back({"rows", [](const Inputs& x) { return rows(x[0], 1, 2); }, {u({4, 3})}});
  c.push_back({"concat", [](const Inputs& x) { return concat({x[0], x[1]}); }, {u({2, 3}), u({1, 3})}});
  c.push_back({"softmax_rows", [](const Inputs& x) { return softmax_rows(x[0]); }, {u({3, 4})}});
  {
    Tensor targets = Tensor::constant({4}, {2, 0, 1, 2});
    c.push_back({"cross_entropy", [targets](const Inputs& x) { return cross_entropy(x[0], targets); },
                 {u({4, 3})}});
  }
  c.push_back({"sq_dist_matrix", [](const Inputs& x) { return sq_dist_matrix(x[0]); }, {u({4, 3})}});
  {
    Tensor a = u({4, 4});
    std::vector<double> v(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < 4; ++i) v[i * 4 + i] += 5.0;
    c.push_back({"linear_solve", [](const Inputs& x) { return linear_solve(x[0], x[1]); },
                 {Tensor::constant({4, 4}, v), u({4, 2})}});
  }
  c.push_back({"conv2d", [](const Inputs& x) { return conv2d(x[0], x[1], 1); },
               {u({2, 2, 4, 4}), u({3, 2, 3, 3})}});
  c.push_back({"conv2d_input_grad",
               [](const Inputs& x) { return conv2d_input_grad(x[0], x[1], {2, 2, 4, 4}, 1); },
               {u({2, 3, 4, 4}), u({3, 2, 3, 3})}});
  c.push_back({"conv2d_weight_grad",
               [](const Inputs& x) { return conv2d_weight_grad(x[0], x[1], {3, 2, 3, 3}, 1); },
               {u({2, 2, 4, 4}), u({2, 3, 4, 4})}});
  c.push_back({"max_pool2d", [](const Inputs& x) { return max_pool2d(x[0]); }, {distinct(rng, {2, 2, 4, 4})}});
  c.push_back({"batchnorm_channels",
               [](const Inputs& x) { return batchnorm_channels(x[0], x[1], x[2]); },
               {u({4, 3, 2, 2}), u({3}), u({3})}});
  return c;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, double tol, double second_order_tol) {
  Rng rng(derive_seed(seed, "gradcheck"));
  std::vector<GradSuiteEntry> out;

  for (auto& c : primitive_cases(rng)) {
    Rng wr(mix_seed(seed, out.size()));
    Tensor probe = c.op(c.inputs);
    Tensor w = uniform(wr, probe.shape(), -1.0, 1.0);
    auto op = c.op;
    out.push_back(check(c.name, [op, w](const Inputs& x) { return sum(mul(op(x), w)); }, c.inputs, tol));
    // Backward rules are themselves graphs; check their derivatives too.
    Tensor w2 = uniform(wr, probe.shape(), -1.0, 1.0);
    std::vector<Tensor> w1s;
    for (const auto& in : c.inputs) w1s.push_back(uniform(wr, in.shape(), -1.0, 1.0));
    out.push_back(check(c.name + " (second order)",
                        [op, w2, w1s](const Inputs& x) {
                          Tensor y = op(x);
                          Tensor h = sum(mul(mul(y, y), w2));
                          auto g = grad(h, x, true);
                          Tensor acc = sum(mul(g[0], w1s[0]));
                          for (std::size_t i = 1; i < g.size(); ++i) acc = add(acc, sum(mul(g[i], w1s[i])));
                          return acc;
                        },
                        c.inputs, tol));
  }

  // modulator: gamma = h(tau)
  {
    nets::ModulatorConfig mc{7, 6, 3};
    auto psi = nets::init_modulator(mc, rng);
    Inputs in = nets::flatten(psi);
    for (auto& t : in) t = uniform(rng, t.shape(), -1.0, 1.0);
    in.push_back(uniform(rng, {7}, -2.0, 2.0));
    Tensor w = uniform(rng, {3}, -1.0, 1.0);
    out.push_back(check("modulator",
                        [mc, psi, w](const Inputs& x) {
                          auto p = regroup(psi, x, 0);
                          return sum(mul(nets::modulator_forward(mc, p, x.back()), w));
                        },
                        in, tol));
  }

  // modulated graph-construction path: sigma = exp(g_{gamma * phi}(z))
  {
    nets::GraphNetConfig gc{4, 5, 3};
    auto phi = nets::init_graph_net(gc, rng);
    Inputs in = nets::flatten(phi);
    for (auto& t : in) t = uniform(rng, t.shape(), -1.0, 1.0);
    in.push_back(uniform(rng, {3}, 0.2, 0.9));         // gamma
    in.push_back(uniform(rng, {6, 4}, -2.0, 2.0));     // logits
    Tensor w = uniform(rng, {6}, -1.0, 1.0);
    const std::size_t np = in.size() - 2;
    out.push_back(check("modulated graph net",
                        [gc, phi, w, np](const Inputs& x) {
                          auto p = nets::modulate_params(regroup(phi, x, 0), x[np]);
                          return sum(mul(nets::length_scales(gc, p, x[np + 1]), w));
                        },
                        in, tol));
  }

  // propagation: F = (I - sigmoid(a) S)^-1 Y through the full graph build
  {
    const std::size_t n = 8, classes = 3;
    Tensor logits = uniform(rng, {n, classes}, -2.0, 2.0);
    Tensor sigma = uniform(rng, {n}, 0.7, 1.5);
    Tensor w = uniform(rng, {n, classes}, -1.0, 1.0);
    std::vector<int> labels{0, 1, 2};
    Tensor y = propagation::label_matrix(labels, n - labels.size(), classes);
    out.push_back(check("propagate (S, Y, alpha_raw)",
                        [w](const Inputs& x) { return sum(mul(propagation::propagate(x[0], x[1], x[2]), w)); },
                        {propagation::normalize(propagation::similarity_matrix(logits, sigma)), y,
                         Tensor::scalar(1.3)},
                        tol));
    out.push_back(check("graph + propagate (logits, sigma, alpha_raw)",
                        [w, y, n](const Inputs& x) {
                          auto g = propagation::build_graph(x[0], x[1], n - 1);
                          return sum(mul(propagation::propagate(g.s, y, x[2]), w));
                        },
                        {logits, sigma, Tensor::scalar(0.4)}, tol));
    out.push_back(check("propagation cross-entropy (logits, sigma, alpha_raw)",
                        [y, n, labels](const Inputs& x) {
                          auto g = propagation::build_graph(x[0], x[1], 4);
                          Tensor f = propagation::propagate(g.s, y, x[2]);
                          Tensor truth = Tensor::constant({n - labels.size()}, {0, 1, 2, 0, 1});
                          return cross_entropy(rows(f, labels.size(), n - labels.size()), truth);
                        },
                        {logits, sigma, Tensor::scalar(2.0)}, tol));
  }

  // task embedding
  {
    nets::BackboneConfig bc;
    bc.n_way = 3;
    bc.input_dim = 4;
    bc.hidden = 5;
    bc.depth = 2;
    auto theta = nets::init_backbone(bc, rng);
    Inputs in = nets::flatten(theta);
    for (auto& t : in) t = uniform(rng, t.shape(), -1.0, 1.0);
    in.push_back(uniform(rng, {6, 3}, -2.0, 2.0));
    Tensor w = uniform(rng, {8}, -1.0, 1.0);
    out.push_back(check("task embedding",
                        [theta, w](const Inputs& x) {
                          auto p = regroup(theta, x, 0);
                          return sum(mul(embedding::build_task_embedding(p, x.back(), 3, 2), w));
                        },
                        in, tol));
  }

  // one inner SGD step, gradient of the query loss w.r.t. the initial weights
  {
    nets::BackboneConfig bc;
    bc.n_way = 3;
    bc.input_dim = 4;
    bc.hidden = 8;
    bc.depth = 2;  // 4*8 + 8 + 8*3 + 3 = 67 parameters
    auto theta = nets::init_backbone(bc, rng);
    Tensor xs = uniform(rng, {6, 4}, -2.0, 2.0), xq = uniform(rng, {9, 4}, -2.0, 2.0);
    Tensor ys = Tensor::constant({6}, {0, 0, 1, 1, 2, 2});
    Tensor yq = Tensor::constant({9}, {0, 0, 0, 1, 1, 1, 2, 2, 2});
    metaloop::AdaptationConfig ac;
    ac.inner_steps = 1;
    ac.inner_lr = 0.5;
    out.push_back(check("second-order outer gradient (MLP, 1 step)",
                        [bc, theta, xs, xq, ys, yq, ac](const Inputs& x) {
                          auto p = regroup(theta, x, 0);
                          auto adapted = metaloop::inner_adapt(bc, p, xs, ys, ac, true);
                          return cross_entropy(nets::backbone_forward(bc, adapted, xq).logits, yq);
                        },
                        nets::flatten(theta), second_order_tol));
  }

  return out;
}

}  // namespace tapl::harness
