#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "tapl/harness.hpp"

namespace tapl::harness {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> iterations;
  bool first_order = false;
  bool no_modulation = false;
  bool no_pseudo = false;
  double tol = 1e-5;
  std::string logits, labels, affinity;
  double alpha = 0.99;
  std::size_t knn = 0;
  std::size_t n_way = 0;
};

RunConfig with_overrides(RunConfig cfg, const Flags& f) {
  if (f.first_order) cfg.adapt.second_order = false;
  if (f.no_modulation) cfg.train.modulation = metaloop::Modulation::Bypass;
  if (f.no_pseudo) cfg.train.pseudo_labels = false;
  if (f.iterations) cfg.train.iterations = *f.iterations;
  if (f.episodes) cfg.train.eval_episodes = *f.episodes;
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::pair<RunConfig, metaloop::MetaParams> load_model(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  const RunConfig cfg = RunConfig::parse(c.config);
  const auto source = cfg.make_source();
  return {cfg, restore(initial_params(cfg, *source), c.tensors)};
}

int cmd_train(const Flags& f, std::ostream& out) {
  TrainOptions opts;
  opts.out_dir = f.out;
  opts.log = &out;
  RunConfig cfg;
  if (!f.resume.empty()) {
    opts.resume = f.resume;
  } else {
    cfg = RunConfig::load(f.config);
    if (f.seed) cfg.train.seed = *f.seed;
    cfg = with_overrides(cfg, f);
  }
  const auto r = run_training(cfg, opts);
  out << std::setprecision(6) << "eval accuracy " << r.eval.accuracy << " +- " << r.eval.ci95;
  if (r.eval.pseudo_accuracy) out << "  pseudo " << *r.eval.pseudo_accuracy;
  out << "\ncheckpoint " << r.final_checkpoint.string() << '\n';
  return 0;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  auto [cfg, params] = load_model(f.checkpoint);
  const std::size_t count = f.episodes.value_or(cfg.train.eval_episodes);
  const std::uint64_t eval_seed = f.seed.value_or(cfg.train.eval_seed);
  const auto source = cfg.make_source();
  const auto r = evaluate(cfg, *source, params, count, eval_seed);
  const std::string report = eval_json(r, count, eval_seed);
  if (!f.out.empty()) write_file(fs::path(f.out) / "eval.json", report);
  out << report;
  return 0;
}

int cmd_gradcheck(const Flags& f, std::ostream& out) {
  const auto entries = run_gradient_suite(f.seed.value_or(0), f.tol, std::max(f.tol, 1e-4));
  std::size_t failed = 0;
  for (const auto& e : entries) {
    out << (e.passed ? "PASS  " : "FAIL  ") << e.name;
    if (e.error.empty()) {
      out << "  max_rel_err=" << std::setprecision(3) << std::scientific << e.max_rel_error
          << " tol=" << e.tol << std::defaultfloat << " checked=" << e.checked;
    } else {
      out << "  error: " << e.error;
    }
    out << '\n';
    if (!e.passed) ++failed;
  }
  out << entries.size() - failed << "/" << entries.size() << " checks passed\n";
  return failed ? 1 : 0;
}

int cmd_propagate(const Flags& f, std::ostream& out) {
  const auto logits = read_csv_matrix(f.logits);
  const auto labels = read_label_column(f.labels);
  std::optional<std::vector<std::vector<double>>> affinity;
  if (!f.affinity.empty()) affinity = read_csv_matrix(f.affinity);
  const auto r = propagate_table(logits, labels, affinity, {f.alpha, f.knn, f.n_way});

  std::ostringstream fcsv;
  fcsv << std::setprecision(17);
  const std::size_t cols = r.f.dim(1);
  for (std::size_t i = 0; i < r.f.dim(0); ++i) {
    for (std::size_t j = 0; j < cols; ++j) fcsv << (j ? "," : "") << r.f[i * cols + j];
    fcsv << '\n';
  }
  std::ostringstream pcsv;
  pcsv << "row,pseudo\n";
  for (const auto& [row, c] : r.pseudo) pcsv << row << ',' << c << '\n';
  const fs::path dir = f.out.empty() ? fs::path(".") : fs::path(f.out);
  write_file(dir / "F.csv", fcsv.str());
  write_file(dir / "pseudo.csv", pcsv.str());
  out << "wrote " << (dir / "F.csv").string() << " and " << (dir / "pseudo.csv").string() << '\n';
  return 0;
}

int cmd_export(const Flags& f, std::ostream& out) {
  auto [cfg, params] = load_model(f.checkpoint);
  const auto source = cfg.make_source();
  const std::size_t count = f.episodes.value_or(10);
  const auto eps = eval_episodes(cfg, *source, count, f.seed.value_or(cfg.train.eval_seed));
  const auto rows = export_embeddings(cfg, params, eps);
  std::ostringstream csv;
  write_embeddings_csv(csv, rows);
  write_file(f.out, csv.str());
  out << "wrote " << rows.size() << " rows to " << f.out << '\n';
  return 0;
}

int cmd_bench(const Flags& f, std::ostream& out) {
  RunConfig cfg = RunConfig::load(f.config);
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.first_order) cfg.adapt.second_order = false;
  const auto r = run_bench(cfg, f.iterations.value_or(50));
  const std::string report = bench_json(r);
  if (!f.out.empty()) write_file(fs::path(f.out) / "bench.json", report);
  out << report;
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Task-adaptive pseudo labeling: training and evaluation harness", "tapl"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "meta-train; writes metrics.jsonl, checkpoints and eval.json");
  auto* cfg_opt = train->add_option("--config", f.config, "run config file")->check(CLI::ExistingFile);
  train->add_option("--resume", f.resume, "continue from a checkpoint")
      ->check(CLI::ExistingFile)
      ->excludes(cfg_opt);
  train->add_option("--out", f.out, "output directory")->required();
  train->add_option("--seed", f.seed, "run seed");
  train->add_option("--iterations", f.iterations, "outer steps");
  train->add_option("--episodes", f.episodes, "final evaluation episodes");
  train->add_flag("--first-order", f.first_order, "drop second-order terms of the outer gradient");
  train->add_flag("--no-modulation", f.no_modulation, "run without the modulator (gamma = 1)");
  train->add_flag("--no-pseudo", f.no_pseudo, "adapt on the support set only");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on meta-test episodes");
  eval->add_option("--checkpoint", f.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", f.episodes);
  eval->add_option("--seed", f.seed, "evaluation seed (default: the run's)");
  eval->add_option("--out", f.out, "also write eval.json here");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seed", f.seed);
  grad->add_option("--tol", f.tol, "relative error bound for first-order checks");

  auto* prop = app.add_subcommand("propagate", "label propagation on CSV inputs");
  prop->add_option("--logits", f.logits, "n x d CSV")->required()->check(CLI::ExistingFile);
  prop->add_option("--labels", f.labels, "one label per line, blank or negative = unlabeled")
      ->required()
      ->check(CLI::ExistingFile);
  prop->add_option("--affinity", f.affinity, "n x n CSV used instead of the logit graph")
      ->check(CLI::ExistingFile);
  prop->add_option("--alpha", f.alpha)->check(CLI::Range(0.0, 1.0));
  prop->add_option("--knn", f.knn);
  prop->add_option("--n-way", f.n_way);
  prop->add_option("--out", f.out, "directory for F.csv and pseudo.csv");

  auto* exp = app.add_subcommand("export-embeddings", "per-sample features of meta-test episodes as CSV");
  exp->add_option("--checkpoint", f.checkpoint)->required()->check(CLI::ExistingFile);
  exp->add_option("--episodes", f.episodes);
  exp->add_option("--seed", f.seed, "episode seed (default: the run's eval seed)");
  exp->add_option("--out", f.out, "CSV path")->required();

  auto* bench = app.add_subcommand("bench", "per-step time with and without modulation");
  bench->add_option("--config", f.config)->required()->check(CLI::ExistingFile);
  bench->add_option("--iterations", f.iterations, "timed iterations (>= 20)");
  bench->add_option("--seed", f.seed);
  bench->add_flag("--first-order", f.first_order);
  bench->add_option("--out", f.out, "also write bench.json here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (train->parsed() && f.config.empty() && f.resume.empty()) {
    err << "train: one of --config or --resume is required\n";
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (grad->parsed()) return cmd_gradcheck(f, out);
    if (prop->parsed()) return cmd_propagate(f, out);
    if (exp->parsed()) return cmd_export(f, out);
    if (bench->parsed()) return cmd_bench(f, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace tapl::harness
