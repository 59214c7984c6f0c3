#include <chrono>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "tapl/harness.hpp"

namespace tapl::harness {

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace

BenchReport run_bench(const RunConfig& cfg, std::size_t iterations, std::size_t warmup) {
  if (iterations < 20) throw std::invalid_argument("bench needs at least 20 timed iterations");
  const auto source = cfg.make_source();
  auto task_cfg = cfg.pipeline(source->sample_shape());
  task_cfg.pseudo_labels = true;
  task_cfg.modulation = metaloop::Modulation::Task;
  auto bypass_cfg = task_cfg;
  bypass_cfg.modulation = metaloop::Modulation::Bypass;

  auto task_params = initial_params(cfg, *source);
  auto bypass_params = task_params;
  auto task_adam = metaloop::init_adam(task_params);
  auto bypass_adam = metaloop::init_adam(bypass_params);
  Rng sampling(derive_seed(cfg.train.seed, "sampling"));

  BenchReport r;
  r.iterations = iterations;
  r.warmup = warmup;
  std::vector<double> task_ms, bypass_ms;
  auto timed = [](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  for (std::size_t i = 0; i < warmup + iterations; ++i) {
    auto batch = episodes::sample_episodes(*source, episodes::Split::Train, cfg.adapt.meta_batch,
                                           cfg.task.n_way, cfg.task.k_shot, cfg.task.n_query, sampling);
    double t_task = 0.0, t_bypass = 0.0;
    const auto before_task = nets::modulator_forward_count();
    auto run_task = [&] { metaloop::meta_train_step(task_params, batch, task_cfg, task_adam); };
    auto run_bypass = [&] { metaloop::meta_train_step(bypass_params, batch, bypass_cfg, bypass_adam); };
    // alternate which variant goes first to cancel drift
    if (i % 2 == 0) {
      t_task = timed(run_task);
      const auto mid = nets::modulator_forward_count();
      t_bypass = timed(run_bypass);
      r.task_modulator_calls += mid - before_task;
      r.bypass_modulator_calls += nets::modulator_forward_count() - mid;
    } else {
      t_bypass = timed(run_bypass);
      const auto mid = nets::modulator_forward_count();
      t_task = timed(run_task);
      r.bypass_modulator_calls += mid - before_task;
      r.task_modulator_calls += nets::modulator_forward_count() - mid;
    }
    if (i >= warmup) {
      task_ms.push_back(t_task);
      bypass_ms.push_back(t_bypass);
    }
  }
  std::tie(r.task_mean_ms, r.task_std_ms) = mean_std(task_ms);
  std::tie(r.bypass_mean_ms, r.bypass_std_ms) = mean_std(bypass_ms);
  r.overhead_pct = 100.0 * (r.task_mean_ms - r.bypass_mean_ms) / r.bypass_mean_ms;
  return r;
}

std::string bench_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["iterations"] = r.iterations;
  j["warmup"] = r.warmup;
  j["task_mean_ms"] = r.task_mean_ms;
  j["task_std_ms"] = r.task_std_ms;
  j["bypass_mean_ms"] = r.bypass_mean_ms;
  j["bypass_std_ms"] = r.bypass_std_ms;
  j["overhead_pct"] = r.overhead_pct;
  j["task_modulator_calls"] = r.task_modulator_calls;
  j["bypass_modulator_calls"] = r.bypass_modulator_calls;
  return j.dump(2) + "\n";
}

}  // namespace tapl::harness
