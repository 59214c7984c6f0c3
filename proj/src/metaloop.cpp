#include "tapl/metaloop.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "tapl/embedding.hpp"

namespace tapl::metaloop {

using episodes::Episode;
using nets::LayeredParams;

nets::GraphNetConfig PipelineConfig::graph_net() const {
  return {n_way, graph_hidden, graph_layers};
}

nets::ModulatorConfig PipelineConfig::modulator() const {
  return {task_dim(), modulator_hidden, graph_layers};
}

std::size_t PipelineConfig::task_dim() const {
  return embedding::task_embedding_dim(n_way, k_shot, nets::backbone_layers(backbone));
}

std::vector<Tensor> MetaParams::flat() const {
  std::vector<Tensor> out = nets::flatten(theta);
  for (const auto* group : {&phi, &psi}) {
    auto f = nets::flatten(*group);
    out.insert(out.end(), f.begin(), f.end());
  }
  out.push_back(alpha_raw);
  return out;
}

MetaParams MetaParams::with_values(const std::vector<std::vector<double>>& values) const {
  std::size_t next = 0;
  auto rebuild = [&](const LayeredParams& group) {
    LayeredParams out;
    for (const auto& layer : group) {
      nets::Layer l;
      for (const auto& t : layer) {
        const auto& v = values.at(next++);
        if (v.size() != t.numel()) throw ShapeError("MetaParams::with_values", "size mismatch");
        l.push_back(Tensor::parameter(t.shape(), v, t.tag()));
      }
      out.push_back(std::move(l));
    }
    return out;
  };
  MetaParams p;
  p.theta = rebuild(theta);
  p.phi = rebuild(phi);
  p.psi = rebuild(psi);
  const auto& a = values.at(next++);
  p.alpha_raw = Tensor::parameter(alpha_raw.shape(), a, "alpha_raw");
  if (next != values.size()) throw ShapeError("MetaParams::with_values", "extra tensors");
  return p;
}

MetaParams init_meta_params(const PipelineConfig& cfg, Rng& rng, double alpha_init) {
  if (cfg.backbone.n_way != cfg.n_way) {
    throw ShapeError("init_meta_params", "backbone output width differs from N");
  }
  MetaParams p;
  p.theta = nets::init_backbone(cfg.backbone, rng);
  p.phi = nets::init_graph_net(cfg.graph_net(), rng);
  p.psi = nets::init_modulator(cfg.modulator(), rng);
  p.alpha_raw = Tensor::parameter({}, {propagation::alpha_to_raw(alpha_init)}, "alpha_raw");
  return p;
}

// ---------------------------------------------------------------------------

LayeredParams inner_adapt(const nets::BackboneConfig& backbone, const LayeredParams& theta,
                          const Tensor& inputs, const Tensor& labels, const AdaptationConfig& cfg,
                          bool create_graph, std::vector<double>* losses) {
  if (labels.rank() != 1 || inputs.rank() == 0 || labels.dim(0) != inputs.dim(0)) {
    throw ShapeError("inner_adapt", inputs.shape(), labels.shape());
  }
  LayeredParams current = theta;
  for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
    Tensor loss = cross_entropy(nets::backbone_forward(backbone, current, inputs).logits, labels);
    if (!std::isfinite(loss.item())) {
      throw AdaptationError("inner_adapt: non-finite loss at step " + std::to_string(step));
    }
    if (losses) losses->push_back(loss.item());
    auto flat = nets::flatten(current);
    auto grads = grad(loss, flat, create_graph);
    std::size_t k = 0;
    LayeredParams next;
    next.reserve(current.size());
    for (const auto& layer : current) {
      nets::Layer l;
      for (const auto& p : layer) l.push_back(sub(p, scale(grads[k++], cfg.inner_lr)));
      next.push_back(std::move(l));
    }
    current = std::move(next);
  }
  return current;
}

EpisodeForward episode_forward(const MetaParams& params, const Episode& ep,
                               const PipelineConfig& cfg, bool create_graph) {
  if (ep.n_way != cfg.n_way || ep.k_shot != cfg.k_shot || ep.n_query != cfg.n_query) {
    throw ShapeError("episode_forward", "episode is " + std::to_string(ep.n_way) + "-way " +
                                            std::to_string(ep.k_shot) + "-shot with " +
                                            std::to_string(ep.n_query) + " queries; config differs");
  }
  const std::size_t n_s = ep.n_support();
  EpisodeForward fwd;
  fwd.inputs = concat({ep.support_x, ep.query_x});
  fwd.initial = nets::backbone_forward(cfg.backbone, params.theta, fwd.inputs);

  std::vector<double> sl(ep.support_labels.begin(), ep.support_labels.end());
  Tensor support_labels = Tensor::constant({n_s}, std::move(sl), "support_labels");

  Tensor adapt_inputs = ep.support_x;
  fwd.adapt_labels = support_labels;
  if (cfg.pseudo_labels) {
    LayeredParams phi = params.phi;
    if (cfg.modulation == Modulation::Task) {
      fwd.tau = embedding::build_task_embedding(params.theta, rows(fwd.initial.logits, 0, n_s),
                                                cfg.n_way, cfg.k_shot);
      fwd.gamma = nets::modulator_forward(cfg.modulator(), params.psi, fwd.tau);
      phi = nets::modulate_params(params.phi, fwd.gamma);
    } else if (cfg.modulation == Modulation::ForcedOnes) {
      fwd.gamma = Tensor::ones({params.phi.size()});
      phi = nets::modulate_params(params.phi, fwd.gamma);
    }
    fwd.sigma = nets::length_scales(cfg.graph_net(), phi, fwd.initial.logits);
    const std::size_t k = cfg.knn ? cfg.knn : propagation::default_knn(ep.size());
    auto graph = propagation::build_graph(fwd.initial.logits, fwd.sigma, k);
    fwd.w = graph.w;
    fwd.w_knn = graph.w_knn;
    fwd.s = graph.s;
    fwd.y = propagation::label_matrix(ep.support_labels, ep.n_query, ep.n_way);
    fwd.prop = propagation::finish(propagation::propagate(fwd.s, fwd.y, params.alpha_raw), n_s);
    fwd.adapt_labels = concat({support_labels, fwd.prop.pseudo});
    adapt_inputs = fwd.inputs;
  }
  fwd.adapted = inner_adapt(cfg.backbone, params.theta, adapt_inputs, fwd.adapt_labels, cfg.adapt,
                            create_graph, &fwd.inner_losses);
  return fwd;
}

Tensor adapted_query_logits(const PipelineConfig& cfg, const EpisodeForward& fwd,
                            const Episode& ep) {
  Tensor logits = nets::backbone_forward(cfg.backbone, fwd.adapted, fwd.inputs).logits;
  return rows(logits, ep.n_support(), ep.n_query);
}

Tensor query_truth(const Episode& ep) {
  std::vector<double> v(ep.query_labels.begin(), ep.query_labels.end());
  const std::size_t n = v.size();
  return Tensor::constant({n}, std::move(v), kQueryTruthTag);
}

namespace {

struct OuterParts {
  Tensor loss;
  Tensor query_logits;
};

OuterParts outer_parts(const EpisodeForward& fwd, const Episode& ep, const PipelineConfig& cfg) {
  if (ep.query_labels.size() != ep.n_query) {
    throw AdaptationError("outer_loss: ground-truth query labels missing");
  }
  Tensor truth = query_truth(ep);
  Tensor q = adapted_query_logits(cfg, fwd, ep);
  Tensor loss = cross_entropy(q, truth);
  if (cfg.pseudo_labels && cfg.adapt.prop_weight > 0.0) {
    Tensor f_query = rows(fwd.prop.f, ep.n_support(), ep.n_query);
    loss = add(loss, scale(cross_entropy(f_query, truth), cfg.adapt.prop_weight));
  }
  return {loss, q};
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s / static_cast<double>(t.numel());
}

}  // namespace

Tensor outer_loss(const EpisodeForward& fwd, const Episode& ep, const PipelineConfig& cfg) {
  return outer_parts(fwd, ep, cfg).loss;
}

void audit_transductive(const EpisodeForward& fwd) {
  std::vector<Tensor> roots = nets::flatten(fwd.adapted);
  roots.push_back(fwd.adapt_labels);
  if (fwd.prop.pseudo.defined()) roots.push_back(fwd.prop.pseudo);
  if (depends_on_tag(roots, kQueryTruthTag)) {
    throw TaintError("transductive audit: ground-truth query labels reach adaptation or pseudo-labeling");
  }
}

std::size_t count_hits(const Tensor& predicted, const std::vector<int>& truth) {
  if (predicted.numel() != truth.size() || truth.empty()) {
    throw ShapeError("accuracy", predicted.shape(), Shape{truth.size()});
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return hit;
}

double accuracy(const Tensor& predicted, const std::vector<int>& truth) {
  return static_cast<double>(count_hits(predicted, truth)) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------

AdamState init_adam(const MetaParams& params) {
  AdamState s;
  for (const auto& t : params.flat()) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

StepMetrics meta_train_step(MetaParams& params, const std::vector<Episode>& batch,
                            const PipelineConfig& cfg, AdamState& adam) {
  if (batch.empty()) throw AdaptationError("meta_train_step: empty meta-batch");
  const auto all = params.flat();
  if (adam.m.size() != all.size()) throw AdaptationError("meta_train_step: optimizer state does not match parameters");

  // Trainables that the outer loss can reach in this configuration.
  std::vector<std::size_t> active;
  const std::size_t n_theta = nets::flatten(params.theta).size();
  const std::size_t n_phi = nets::flatten(params.phi).size();
  const std::size_t n_psi = nets::flatten(params.psi).size();
  for (std::size_t i = 0; i < n_theta; ++i) active.push_back(i);
  const bool prop_term = cfg.pseudo_labels && cfg.adapt.prop_weight > 0.0;
  if (prop_term) {
    for (std::size_t i = 0; i < n_phi; ++i) active.push_back(n_theta + i);
    if (cfg.modulation == Modulation::Task) {
      for (std::size_t i = 0; i < n_psi; ++i) active.push_back(n_theta + n_phi + i);
    }
    active.push_back(all.size() - 1);
  }
  std::vector<Tensor> wrt;
  for (auto i : active) wrt.push_back(all[i]);

  std::vector<std::vector<double>> grad_sum;
  for (const auto& t : all) grad_sum.emplace_back(t.numel(), 0.0);

  StepMetrics m;
  m.alpha = propagation::effective_alpha(params.alpha_raw).item();
  double pseudo_sum = 0.0, gamma_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Episode& ep = batch[b];
    try {
      EpisodeForward fwd = episode_forward(params, ep, cfg, cfg.adapt.second_order);
      OuterParts parts = outer_parts(fwd, ep, cfg);
      auto grads = grad(parts.loss, wrt, false);
      for (std::size_t k = 0; k < active.size(); ++k) {
        auto& dst = grad_sum[active[k]];
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += grads[k][j];
      }
      m.outer_loss += parts.loss.item();
      m.query_acc += accuracy(argmax_rows(parts.query_logits), ep.query_labels);
      if (fwd.prop.pseudo.defined()) pseudo_sum += accuracy(fwd.prop.pseudo, ep.query_labels);
      if (fwd.gamma.defined()) gamma_sum += mean_of(fwd.gamma);
    } catch (const std::exception& e) {
      throw AdaptationError("episode " + std::to_string(b) + ": " + e.what());
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  m.outer_loss *= inv_b;
  m.query_acc *= inv_b;
  if (cfg.pseudo_labels) m.pseudo_acc = pseudo_sum * inv_b;
  if (cfg.pseudo_labels && cfg.modulation != Modulation::Bypass) m.gamma_mean = gamma_sum * inv_b;

  for (std::size_t i = 0; i < grad_sum.size(); ++i) {
    for (std::size_t j = 0; j < grad_sum[i].size(); ++j) {
      grad_sum[i][j] *= inv_b;
      if (!std::isfinite(grad_sum[i][j])) {
        throw AdaptationError("meta_train_step: non-finite gradient in parameter tensor " +
                              std::to_string(i) + "; step aborted");
      }
    }
  }

  ++adam.t;
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.t));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.t));
  std::vector<std::vector<double>> values;
  values.reserve(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::vector<double> p(all[i].values().begin(), all[i].values().end());
    auto& mi = adam.m[i];
    auto& vi = adam.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grad_sum[i][j];
      mi[j] = adam.beta1 * mi[j] + (1.0 - adam.beta1) * g;
      vi[j] = adam.beta2 * vi[j] + (1.0 - adam.beta2) * g * g;
      p[j] -= cfg.adapt.outer_lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + adam.eps);
    }
    values.push_back(std::move(p));
  }
  params = params.with_values(values);
  return m;
}

// ---------------------------------------------------------------------------

std::pair<double, double> mean_ci95(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(xs.size()))};
}

EvalResult meta_eval(const MetaParams& params, const std::vector<Episode>& eps,
                     const PipelineConfig& cfg, const std::vector<std::string>* train_classes) {
  std::set<std::string> seen_in_train;
  if (train_classes) seen_in_train.insert(train_classes->begin(), train_classes->end());
  EvalResult r;
  // Means come from integer hit counts so they do not depend on episode order.
  std::size_t hits = 0, pseudo_hits = 0, total = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Episode& ep = eps[i];
    for (const auto& c : ep.class_names) {
      if (seen_in_train.count(c)) {
        throw episodes::EpisodeError("meta_eval: episode " + std::to_string(i) + " uses meta-train class '" + c + "'");
      }
    }
    // The query labels enter only after adaptation and the audit.
    EpisodeForward fwd = episode_forward(params, ep, cfg, false);
    audit_transductive(fwd);
    NoGradGuard ng;
    Tensor predicted = argmax_rows(adapted_query_logits(cfg, fwd, ep));
    const auto q = ep.query_labels.size();
    total += q;
    hits += count_hits(predicted, ep.query_labels);
    r.per_episode.push_back(accuracy(predicted, ep.query_labels));
    if (fwd.prop.pseudo.defined()) {
      pseudo_hits += count_hits(fwd.prop.pseudo, ep.query_labels);
      r.per_episode_pseudo.push_back(accuracy(fwd.prop.pseudo, ep.query_labels));
    }
  }
  r.ci95 = mean_ci95(r.per_episode).second;
  if (total) r.accuracy = static_cast<double>(hits) / static_cast<double>(total);
  if (!r.per_episode_pseudo.empty()) {
    r.pseudo_accuracy = static_cast<double>(pseudo_hits) / static_cast<double>(total);
    r.pseudo_ci95 = mean_ci95(r.per_episode_pseudo).second;
  }
  return r;
}

}  // namespace tapl::metaloop
