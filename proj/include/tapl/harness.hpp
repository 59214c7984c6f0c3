#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tapl/checkpoint.hpp"
#include "tapl/config.hpp"
#include "tapl/metaloop.hpp"

namespace tapl::harness {

// ---------------------------------------------------------------------------
// training and evaluation
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint; its embedded config replaces the one
  /// passed to run_training.
  std::optional<std::filesystem::path> resume;
  std::ostream* log = nullptr;
};

struct TrainOutcome {
  RunConfig config;
  metaloop::MetaParams params;
  metaloop::EvalResult eval;
  std::filesystem::path final_checkpoint;
};

/// Writes metrics.jsonl (header line with the config text, then one record
/// per outer step), ckpt_NNNNNN.bin files and eval.json into out_dir.
TrainOutcome run_training(const RunConfig& cfg, const TrainOptions& opts);

std::string checkpoint_name(std::uint64_t step);

/// Parameters with the architecture of `cfg`, freshly initialised from the
/// "init" stream of the run seed.
metaloop::MetaParams initial_params(const RunConfig& cfg, const episodes::Source& source);

/// Evaluation on `count` meta-test episodes drawn from the "eval" stream of
/// `eval_seed`. Episodes are checked against the meta-train classes.
metaloop::EvalResult evaluate(const RunConfig& cfg, const episodes::Source& source,
                              const metaloop::MetaParams& params, std::size_t count,
                              std::uint64_t eval_seed);

std::vector<episodes::Episode> eval_episodes(const RunConfig& cfg, const episodes::Source& source,
                                             std::size_t count, std::uint64_t eval_seed);

std::string eval_json(const metaloop::EvalResult& r, std::size_t episodes, std::uint64_t eval_seed);

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

struct GradSuiteEntry {
  std::string name;
  bool passed = false;
  double max_rel_error = 0.0;
  double tol = 0.0;
  std::size_t checked = 0;
  std::string error;  // set when the check threw
};

/// Central-difference checks of every differentiable primitive, the
/// modulator, the modulated graph-net path, propagation (including alpha_raw),
/// the task embedding and a one-step second-order outer gradient.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 0, double tol = 1e-5,
                                               double second_order_tol = 1e-4);

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

struct BenchReport {
  std::size_t iterations = 0;
  std::size_t warmup = 0;
  double task_mean_ms = 0.0;
  double task_std_ms = 0.0;
  double bypass_mean_ms = 0.0;
  double bypass_std_ms = 0.0;
  double overhead_pct = 0.0;
  std::uint64_t task_modulator_calls = 0;
  std::uint64_t bypass_modulator_calls = 0;
};

/// Times meta_train_step with task modulation and with the modulator
/// bypassed, interleaved on the same batches. `iterations` must be >= 20.
BenchReport run_bench(const RunConfig& cfg, std::size_t iterations, std::size_t warmup = 5);

std::string bench_json(const BenchReport& r);

// ---------------------------------------------------------------------------
// exports
// ---------------------------------------------------------------------------

struct EmbeddingRow {
  std::size_t episode = 0;
  bool query = false;
  int truth = 0;
  std::optional<int> pseudo;
  std::vector<double> features;
};

/// One row per sample of each episode: adapted penultimate features plus the
/// ground-truth and (for queries) pseudo class.
std::vector<EmbeddingRow> export_embeddings(const RunConfig& cfg, const metaloop::MetaParams& params,
                                            const std::vector<episodes::Episode>& eps);

/// Throws std::runtime_error when rows disagree on the feature dimension.
void write_embeddings_csv(std::ostream& os, const std::vector<EmbeddingRow>& rows);

struct PropagateOptions {
  double alpha = 0.99;
  std::size_t knn = 0;  // 0 selects the default
  std::size_t n_way = 0;  // 0 takes the logit width
};

struct PropagateOutput {
  Tensor f;
  std::vector<std::pair<std::size_t, int>> pseudo;  // unlabeled row -> argmax
};

/// Labels: class index for labeled rows, nullopt for unlabeled rows. With an
/// affinity matrix the graph is taken as given; otherwise it is built from
/// the logits with unit length scales.
PropagateOutput propagate_table(const std::vector<std::vector<double>>& logits,
                                const std::vector<std::optional<int>>& labels,
                                const std::optional<std::vector<std::vector<double>>>& affinity,
                                const PropagateOptions& opts);

std::vector<std::vector<double>> read_csv_matrix(const std::filesystem::path& path);
/// One label per line; empty or negative means unlabeled.
std::vector<std::optional<int>> read_label_column(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// command line
// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tapl::harness
