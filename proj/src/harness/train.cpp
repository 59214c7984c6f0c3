#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "tapl/harness.hpp"

namespace tapl::harness {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kMetricsFile = "metrics.jsonl";

ordered_json optional_number(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::string header_line(const RunConfig& cfg) {
  ordered_json h;
  h["format"] = "tapl-metrics";
  h["version"] = 1;
  h["config"] = cfg.to_text();
  return h.dump();
}

std::string record_line(const metaloop::StepMetrics& m, double wall_ms) {
  ordered_json r;
  r["step"] = m.step;
  r["outer_loss"] = m.outer_loss;
  r["query_acc"] = m.query_acc;
  r["pseudo_acc"] = optional_number(m.pseudo_acc);
  r["alpha"] = m.alpha;
  r["gamma_mean"] = optional_number(m.gamma_mean);
  r["wall_ms"] = wall_ms;
  return r.dump();
}

// Keeps the header and the records up to `iteration`; anything a crashed run
// wrote past its last checkpoint is dropped.
void prepare_metrics(const fs::path& path, const RunConfig& cfg, std::uint64_t iteration) {
  const std::string header = header_line(cfg);
  std::vector<std::string> keep{header};
  if (fs::exists(path)) {
    std::ifstream is(path);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (first) {
        if (line != header) throw CheckpointError(path.string() + " belongs to a run with a different config");
        first = false;
        continue;
      }
      auto rec = ordered_json::parse(line);
      if (rec.at("step").get<std::uint64_t>() <= iteration) keep.push_back(line);
    }
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  for (const auto& l : keep) os << l << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

}  // namespace

std::string checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

metaloop::MetaParams initial_params(const RunConfig& cfg, const episodes::Source& source) {
  Rng init(derive_seed(cfg.train.seed, "init"));
  return metaloop::init_meta_params(cfg.pipeline(source.sample_shape()), init, cfg.propagation.alpha_init);
}

std::vector<episodes::Episode> eval_episodes(const RunConfig& cfg, const episodes::Source& source,
                                             std::size_t count, std::uint64_t eval_seed) {
  Rng rng(derive_seed(eval_seed, "eval"));
  return episodes::sample_episodes(source, episodes::Split::Test, count, cfg.task.n_way, cfg.task.k_shot,
                                   cfg.task.n_query, rng);
}

metaloop::EvalResult evaluate(const RunConfig& cfg, const episodes::Source& source,
                              const metaloop::MetaParams& params, std::size_t count,
                              std::uint64_t eval_seed) {
  const auto eps = eval_episodes(cfg, source, count, eval_seed);
  const auto& train_classes = source.manifest().of(episodes::Split::Train);
  return metaloop::meta_eval(params, eps, cfg.pipeline(source.sample_shape()), &train_classes);
}

std::string eval_json(const metaloop::EvalResult& r, std::size_t episodes, std::uint64_t eval_seed) {
  ordered_json j;
  j["episodes"] = episodes;
  j["eval_seed"] = eval_seed;
  j["accuracy"] = r.accuracy;
  j["ci95"] = r.ci95;
  j["pseudo_accuracy"] = optional_number(r.pseudo_accuracy);
  j["pseudo_ci95"] = optional_number(r.pseudo_ci95);
  return j.dump(2) + "\n";
}

TrainOutcome run_training(const RunConfig& given, const TrainOptions& opts) {
  fs::create_directories(opts.out_dir);
  std::optional<Checkpoint> resumed;
  if (opts.resume) resumed = load_checkpoint(*opts.resume);
  const RunConfig cfg = resumed ? RunConfig::parse(resumed->config) : given;

  const auto source = cfg.make_source();
  const auto pipeline = cfg.pipeline(source->sample_shape());
  Rng init(derive_seed(cfg.train.seed, "init"));
  Rng sampling(derive_seed(cfg.train.seed, "sampling"));
  auto params = metaloop::init_meta_params(pipeline, init, cfg.propagation.alpha_init);
  auto adam = metaloop::init_adam(params);
  std::uint64_t step = 0;
  if (resumed) {
    params = restore(params, resumed->tensors);
    adam = resumed->adam;
    init.set_state(rng_state(*resumed, "init"));
    sampling.set_state(rng_state(*resumed, "sampling"));
    step = resumed->iteration;
    if (adam.m.size() != params.flat().size()) throw CheckpointError("optimizer state does not match the model");
  }

  const fs::path metrics_path = opts.out_dir / kMetricsFile;
  prepare_metrics(metrics_path, cfg, step);
  std::ofstream metrics(metrics_path, std::ios::app);

  auto snapshot = [&](std::uint64_t at) {
    Checkpoint c;
    c.config = cfg.to_text();
    c.tensors = capture(params);
    c.adam = adam;
    c.rng_states = {{"init", init.state()}, {"sampling", sampling.state()}};
    c.iteration = at;
    const fs::path p = opts.out_dir / checkpoint_name(at);
    save_checkpoint(c, p);
    return p;
  };

  fs::path last = resumed ? *opts.resume : fs::path{};
  const std::size_t total = cfg.train.iterations;
  while (step < total) {
    auto batch = episodes::sample_episodes(*source, episodes::Split::Train, cfg.adapt.meta_batch,
                                           cfg.task.n_way, cfg.task.k_shot, cfg.task.n_query, sampling);
    const auto t0 = std::chrono::steady_clock::now();
    auto m = metaloop::meta_train_step(params, batch, pipeline, adam);
    const auto t1 = std::chrono::steady_clock::now();
    ++step;
    m.step = step;
    const double wall =
        cfg.train.record_wall_time ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
    metrics << record_line(m, wall) << '\n' << std::flush;
    if (opts.log && (step == 1 || step % 50 == 0 || step == total)) {
      *opts.log << "step " << step << "  loss " << m.outer_loss << "  query_acc " << m.query_acc;
      if (m.pseudo_acc) *opts.log << "  pseudo_acc " << *m.pseudo_acc;
      *opts.log << "  alpha " << m.alpha << '\n';
    }
    if ((cfg.train.checkpoint_every && step % cfg.train.checkpoint_every == 0) || step == total) {
      last = snapshot(step);
    }
  }
  if (last.empty()) last = snapshot(step);

  TrainOutcome out{cfg, params, {}, last};
  out.eval = evaluate(cfg, *source, params, cfg.train.eval_episodes, cfg.train.eval_seed);
  write_text(opts.out_dir / "eval.json", eval_json(out.eval, cfg.train.eval_episodes, cfg.train.eval_seed));
  return out;
}

}  // namespace tapl::harness
