#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "tapl/autodiff.hpp"
#include "tapl/episodes.hpp"
#include "tapl/nets.hpp"
#include "tapl/propagation.hpp"
#include "tapl/rng.hpp"

namespace tapl::metaloop {

/// Tag carried by every tensor built from ground-truth query labels.
inline constexpr const char* kQueryTruthTag = "query_ground_truth";

class AdaptationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TaintError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdaptationConfig {
  std::size_t inner_steps = 5;
  double inner_lr = 0.01;
  double outer_lr = 1e-3;
  std::size_t meta_batch = 4;
  double prop_weight = 1.0;  // lambda
  bool second_order = true;
};

enum class Modulation {
  Task,        // gamma = h(tau)
  ForcedOnes,  // gamma = 1, still multiplied through
  Bypass,      // modulator never runs
};

struct PipelineConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 15;
  nets::BackboneConfig backbone;
  std::size_t graph_layers = 2;
  std::size_t graph_hidden = 16;
  std::size_t modulator_hidden = 32;
  std::size_t knn = 0;  // 0 selects min(20, n - 1)
  AdaptationConfig adapt;
  Modulation modulation = Modulation::Task;
  bool pseudo_labels = true;  // false: support-only MAML baseline

  nets::GraphNetConfig graph_net() const;
  nets::ModulatorConfig modulator() const;
  std::size_t task_dim() const;
};

struct MetaParams {
  nets::LayeredParams theta;  // backbone
  nets::LayeredParams phi;    // graph-construction net
  nets::LayeredParams psi;    // modulator
  Tensor alpha_raw;

  /// theta, phi, psi, alpha_raw in that order.
  std::vector<Tensor> flat() const;
  MetaParams with_values(const std::vector<std::vector<double>>& values) const;
};

MetaParams init_meta_params(const PipelineConfig& cfg, Rng& rng, double alpha_init = 0.99);

struct EpisodeForward {
  Tensor inputs;  // support rows then query rows
  nets::BackboneOutput initial;
  Tensor tau;    // undefined unless modulation == Task
  Tensor gamma;  // undefined when bypassed
  Tensor sigma, w, w_knn, s, y;
  propagation::PropagationResult prop;  // undefined members without pseudo labels
  Tensor adapt_labels;                  // y_D
  nets::LayeredParams adapted;
  std::vector<double> inner_losses;  // loss before each inner step
};

/// Full per-episode pipeline: logits, task embedding, modulation, graph,
/// propagation, hard pseudo labels and inner adaptation on the union set.
EpisodeForward episode_forward(const MetaParams& params, const episodes::Episode& ep,
                               const PipelineConfig& cfg, bool create_graph);

/// T_in full-batch SGD steps of cross-entropy on (inputs, labels).
nets::LayeredParams inner_adapt(const nets::BackboneConfig& backbone, const nets::LayeredParams& theta,
                                const Tensor& inputs, const Tensor& labels,
                                const AdaptationConfig& cfg, bool create_graph,
                                std::vector<double>* losses = nullptr);

/// Query logits of the adapted backbone, evaluated on the whole episode batch.
Tensor adapted_query_logits(const PipelineConfig& cfg, const EpisodeForward& fwd,
                            const episodes::Episode& ep);

/// Ground-truth query labels as a tagged tensor.
Tensor query_truth(const episodes::Episode& ep);

/// CE(adapted query logits, truth) + lambda CE(query rows of F, truth).
Tensor outer_loss(const EpisodeForward& fwd, const episodes::Episode& ep, const PipelineConfig& cfg);

/// Throws TaintError when ground-truth query labels are an ancestor of the
/// pseudo labels or of any adapted parameter.
void audit_transductive(const EpisodeForward& fwd);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  bool operator==(const AdamState&) const = default;
};

AdamState init_adam(const MetaParams& params);

struct StepMetrics {
  std::size_t step = 0;
  double outer_loss = 0.0;
  double query_acc = 0.0;
  std::optional<double> pseudo_acc;
  double alpha = 0.0;
  std::optional<double> gamma_mean;
};

/// One outer step: mean outer loss over the batch, one Adam update.
StepMetrics meta_train_step(MetaParams& params, const std::vector<episodes::Episode>& batch,
                            const PipelineConfig& cfg, AdamState& adam);

struct EvalResult {
  double accuracy = 0.0;
  double ci95 = 0.0;
  std::optional<double> pseudo_accuracy;
  std::optional<double> pseudo_ci95;
  std::vector<double> per_episode;
  std::vector<double> per_episode_pseudo;
};

/// Mean and 1.96 std / sqrt(E) half-width (population std).
std::pair<double, double> mean_ci95(const std::vector<double>& xs);

/// Adapts with pseudo labels only; ground truth is used for scoring after
/// the audit. Rejects episodes whose classes belong to `train_classes`.
EvalResult meta_eval(const MetaParams& params, const std::vector<episodes::Episode>& episodes,
                     const PipelineConfig& cfg,
                     const std::vector<std::string>* train_classes = nullptr);

std::size_t count_hits(const Tensor& predicted, const std::vector<int>& truth);
double accuracy(const Tensor& predicted, const std::vector<int>& truth);

}  // namespace tapl::metaloop
