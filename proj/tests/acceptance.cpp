// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "oracles.hpp"
#include "tapl/embedding.hpp"
#include "tapl/harness.hpp"

using namespace tapl;
using namespace tapl::harness;
namespace fs = std::filesystem;

#ifndef TAPL_SOURCE_DIR
#define TAPL_SOURCE_DIR "."
#endif

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<double> values_of(const nets::LayeredParams& p) {
  std::vector<double> out;
  for (const auto& t : nets::flatten(p)) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

// Shared state: the paired training runs feed several criteria.
struct Runs {
  fs::path root;
  RunConfig cfg;
  std::optional<TrainOutcome> tapl, maml;
};

Runs& runs() {
  static Runs r;
  return r;
}

TrainOutcome train_into(const RunConfig& cfg, const std::string& name) {
  return run_training(cfg, {runs().root / name, std::nullopt, nullptr});
}

const TrainOutcome& tapl_run() {
  if (!runs().tapl) runs().tapl = train_into(runs().cfg, "tapl");
  return *runs().tapl;
}

const TrainOutcome& maml_run() {
  if (!runs().maml) {
    auto cfg = runs().cfg;
    cfg.train.pseudo_labels = false;
    runs().maml = train_into(cfg, "maml");
  }
  return *runs().maml;
}

// 1 -------------------------------------------------------------------------
Verdict propagation_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int e = 0; e < 100; ++e) {
    const std::size_t n_way = 2 + rng.below(4);
    const std::size_t k = 1 + rng.below(3);
    const std::size_t per = 1 + rng.below(5);
    const std::size_t ns = n_way * k, nq = n_way * per, n = ns + nq;  // n <= 50
    std::vector<double> z(n * n_way);
    for (auto& v : z) v = rng.normal() * 2.0;
    std::vector<double> sg(n);
    for (auto& v : sg) v = rng.uniform(0.5, 2.0);
    const std::size_t knn = 1 + rng.below(n - 1);
    auto s = propagation::build_graph(Tensor::constant({n, n_way}, z), Tensor::constant({n}, sg), knn).s;
    std::vector<int> labels;
    for (std::size_t c = 0; c < n_way; ++c)
      for (std::size_t j = 0; j < k; ++j) labels.push_back(static_cast<int>(c));
    auto y = propagation::label_matrix(labels, nq, n_way);
    const double alpha = rng.uniform(0.01, 0.99);
    auto f = propagation::propagate(s, y, Tensor::scalar(propagation::alpha_to_raw(alpha)));
    auto expect = oracle::neumann(oracle::from_tensor(s), oracle::from_tensor(y), alpha);
    worst = std::max(worst, oracle::max_abs_diff(oracle::from_tensor(f), expect));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-8 && secs < 10.0, fmt("100 episodes, max |F - Neumann| = %.2e (<= 1e-8), %.2f s (< 10 s)", worst, secs)};
}

// 2 -------------------------------------------------------------------------
Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = run_gradient_suite(0, 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  std::size_t failed = 0;
  double worst = 0.0;
  std::string first_fail;
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_error);
    if (!e.passed) {
      if (!failed) first_fail = e.name + (e.error.empty() ? "" : " (" + e.error + ")");
      ++failed;
    }
  }
  std::string d = fmt("%zu checks, %zu failed, max rel err %.2e, %.2f s (< 120 s)", entries.size(), failed, worst, secs);
  if (failed) d += "; first failure: " + first_fail;
  return {failed == 0 && secs < 120.0, d};
}

// 3 -------------------------------------------------------------------------
Verdict unit_gamma_reduction() {
  auto cfg = runs().cfg;
  auto src = cfg.make_source();
  auto pipe = cfg.pipeline(src->sample_shape());
  auto params = initial_params(cfg, *src);
  Rng rng(303);
  auto eps = episodes::sample_episodes(*src, episodes::Split::Train, 20, 5, 1, 15, rng);

  // Reference with no modulator anywhere: graph net parameters used as they are.
  auto reference = [&](const episodes::Episode& ep) {
    Tensor x = concat({ep.support_x, ep.query_x});
    Tensor logits = nets::backbone_forward(pipe.backbone, params.theta, x).logits;
    Tensor sigma = nets::length_scales(pipe.graph_net(), params.phi, logits);
    auto g = propagation::build_graph(logits, sigma, propagation::default_knn(ep.size()));
    Tensor y = propagation::label_matrix(ep.support_labels, ep.n_query, ep.n_way);
    Tensor f = propagation::propagate(g.s, y, params.alpha_raw);
    Tensor yq = propagation::harden(f, ep.n_support());
    std::vector<double> sl(ep.support_labels.begin(), ep.support_labels.end());
    Tensor labels = concat({Tensor::constant({ep.n_support()}, sl), yq});
    auto theta = metaloop::inner_adapt(pipe.backbone, params.theta, x, labels, pipe.adapt, false);
    return std::tuple{g.w, g.s, f, yq, theta};
  };

  pipe.modulation = metaloop::Modulation::ForcedOnes;
  auto bypass = pipe;
  bypass.modulation = metaloop::Modulation::Bypass;
  const auto calls_before = nets::modulator_forward_count();
  std::size_t mismatches = 0;
  for (const auto& ep : eps) {
    auto [w, s, f, yq, theta] = reference(ep);
    for (const auto& p : {pipe, bypass}) {
      auto fwd = metaloop::episode_forward(params, ep, p, false);
      mismatches += values_of(fwd.w) != values_of(w);
      mismatches += values_of(fwd.s) != values_of(s);
      mismatches += values_of(fwd.prop.f) != values_of(f);
      mismatches += values_of(fwd.prop.pseudo) != values_of(yq);
      mismatches += values_of(fwd.adapted) != values_of(theta);
    }
  }
  const auto calls = nets::modulator_forward_count() - calls_before;
  return {mismatches == 0 && calls == 0,
          fmt("20 episodes x {gamma = 1, modulator bypassed} vs modulator-free reference: %zu of 200 intermediates differ, %llu modulator calls",
              mismatches, static_cast<unsigned long long>(calls))};
}

// 4 -------------------------------------------------------------------------
Verdict task_vector_dimension() {
  std::size_t checked = 0, bad = 0;
  Rng rng(404);
  auto dim_of = [&](std::size_t n, std::size_t k, nets::BackboneConfig bb) {
    bb.n_way = n;
    auto theta = nets::init_backbone(bb, rng);
    return embedding::build_task_embedding(theta, Tensor::zeros({n * k, n}), n, k).numel();
  };
  nets::BackboneConfig conv;
  conv.arch = nets::Arch::Conv4;
  conv.conv_width = 4;
  const bool c1 = dim_of(5, 1, conv) == 10;
  const bool c2 = dim_of(5, 5, conv) == 30;
  for (std::size_t n = 2; n <= 10; ++n)
    for (std::size_t k : {1u, 2u, 5u}) {
      nets::BackboneConfig bb = conv;
      ++checked;
      bad += dim_of(n, k, bb) != n * k + 5;
      for (std::size_t depth : {1u, 2u, 4u}) {
        nets::BackboneConfig mlp;
        mlp.depth = depth;
        mlp.input_dim = 6;
        mlp.hidden = 4;
        ++checked;
        bad += dim_of(n, k, mlp) != n * k + depth;
      }
    }
  return {c1 && c2 && bad == 0,
          fmt("(5,1,CONV4) -> %s, (5,5,CONV4) -> %s, grid %zu settings, %zu off NK+M", c1 ? "10" : "wrong",
              c2 ? "30" : "wrong", checked, bad)};
}

// 5 -------------------------------------------------------------------------
Verdict learning_signal() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& a = tapl_run();
  const auto& b = maml_run();
  const double secs = seconds_since(t0);
  const auto& pa = a.eval.per_episode;
  const auto& pb = b.eval.per_episode;
  if (pa.size() != 200 || pb.size() != 200) return {false, "expected 200 paired evaluation episodes"};
  std::vector<double> diff(200);
  for (std::size_t i = 0; i < 200; ++i) diff[i] = pa[i] - pb[i];
  double m = 0.0;
  for (double d : diff) m += d;
  m /= 200.0;
  double v = 0.0;
  for (double d : diff) v += (d - m) * (d - m);
  const double se = std::sqrt(v / 199.0) / std::sqrt(200.0);
  const double lower = m - 1.96 * se;
  return {lower > 0.0 && secs < 900.0,
          fmt("TAPL %.4f vs support-only %.4f over 200 paired episodes; mean diff %.4f, 95%% CI lower bound %.4f (> 0); "
              "both trainings %.1f s (< 900 s)",
              a.eval.accuracy, b.eval.accuracy, m, lower, secs)};
}

// 6 -------------------------------------------------------------------------
Verdict pseudo_label_quality() {
  auto cfg = runs().cfg;
  cfg.task.separation = 10.0;
  auto src = cfg.make_source();
  auto pipe = cfg.pipeline(src->sample_shape());
  auto params = initial_params(cfg, *src);
  auto eps = eval_episodes(cfg, *src, 200, cfg.train.eval_seed);
  std::size_t hits = 0, ncm_hits = 0, agree = 0, total = 0;
  for (const auto& ep : eps) {
    auto fwd = metaloop::episode_forward(params, ep, pipe, false);
    auto ncm = oracle::ncm(oracle::from_tensor(ep.support_x), ep.support_labels, oracle::from_tensor(ep.query_x), 5);
    for (std::size_t q = 0; q < ep.n_query; ++q) {
      hits += fwd.prop.pseudo[q] == ep.query_labels[q];
      ncm_hits += ncm[q] == ep.query_labels[q];
      agree += fwd.prop.pseudo[q] == ncm[q];
    }
    total += ep.n_query;
  }
  const double untrained = static_cast<double>(hits) / total;
  const double ncm_acc = static_cast<double>(ncm_hits) / total;
  const double agreement = static_cast<double>(agree) / total;
  const auto& trained = tapl_run().eval;
  const double trained_acc = trained.pseudo_accuracy.value_or(0.0);
  return {untrained >= 0.9 && trained_acc >= 0.95,
          fmt("untrained, separation/noise 10: %.4f (>= 0.90; nearest class mean %.4f, agreement %.4f); "
              "trained, separation/noise 6: %.4f (>= 0.95); 200 episodes each",
              untrained, ncm_acc, agreement, trained_acc)};
}

// 7 -------------------------------------------------------------------------
Verdict alpha_behaviour() {
  const auto& run = tapl_run();
  std::ifstream is(runs().root / "tapl" / "metrics.jsonl");
  std::string line;
  std::getline(is, line);
  double lo = 1.0, hi = 0.0;
  std::size_t records = 0;
  bool inside = true;
  while (std::getline(is, line)) {
    const double a = nlohmann::json::parse(line)["alpha"].get<double>();
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    inside &= a > 0.0 && a < 1.0;
    ++records;
  }
  const double final_alpha = propagation::effective_alpha(run.params.alpha_raw).item();
  inside &= final_alpha > 0.0 && final_alpha < 1.0;

  auto cfg = run.config;
  auto src = cfg.make_source();
  auto pipe = cfg.pipeline(src->sample_shape());
  auto params = run.params;
  params.alpha_raw = Tensor::parameter({}, {propagation::alpha_to_raw(1e-6)});
  double worst = 0.0;
  for (const auto& ep : eval_episodes(cfg, *src, 50, 77)) {
    auto fwd = metaloop::episode_forward(params, ep, pipe, false);
    auto q = rows(fwd.prop.f, ep.n_support(), ep.n_query);
    for (double v : q.values()) worst = std::max(worst, std::abs(v));
  }
  return {inside && records == cfg.train.iterations && worst <= 1e-4,
          fmt("alpha over %zu training steps in [%.4f, %.4f], final %.4f, all inside (0,1); "
              "at alpha = 1e-6 max |query score| = %.2e (<= 1e-4) over 50 episodes",
              records, lo, hi, final_alpha, worst)};
}

// 8 -------------------------------------------------------------------------
Verdict overhead() {
  auto r = run_bench(runs().cfg, 50, 5);
  std::ofstream(runs().root / "bench.json") << bench_json(r);
  return {std::isfinite(r.overhead_pct) && r.overhead_pct < 10.0 && r.bypass_modulator_calls == 0,
          fmt("task %.3f +- %.3f ms, bypassed %.3f +- %.3f ms per step, overhead %.2f%% (< 10%%), "
              "bypassed modulator calls %llu",
              r.task_mean_ms, r.task_std_ms, r.bypass_mean_ms, r.bypass_std_ms, r.overhead_pct,
              static_cast<unsigned long long>(r.bypass_modulator_calls))};
}

// 9 -------------------------------------------------------------------------
Verdict transductive_hygiene() {
  const auto& run = tapl_run();
  auto cfg = run.config;
  auto src = cfg.make_source();
  auto pipe = cfg.pipeline(src->sample_shape());
  auto eps = eval_episodes(cfg, *src, 50, 909);
  bool honest = true;
  try {
    metaloop::meta_eval(run.params, eps, pipe, &src->manifest().of(episodes::Split::Train));
  } catch (const metaloop::TaintError&) {
    honest = false;
  }

  // Leaky variant: pseudo labels replaced by ground truth (behind argmax, so no gradient path).
  std::size_t caught = 0;
  for (const auto& ep : eps) {
    auto fwd = metaloop::episode_forward(run.params, ep, pipe, false);
    Tensor truth = metaloop::query_truth(ep);
    Tensor scores = mul(broadcast_to(reshape(truth, {ep.n_query, 1}), {ep.n_query, ep.n_way}), Tensor::ones({ep.n_query, ep.n_way}));
    fwd.prop.pseudo = argmax_rows(scores).detach();
    std::vector<double> sl(ep.support_labels.begin(), ep.support_labels.end());
    fwd.adapt_labels = concat({Tensor::constant({ep.n_support()}, sl), truth});
    fwd.adapted = metaloop::inner_adapt(pipe.backbone, run.params.theta, fwd.inputs, fwd.adapt_labels, pipe.adapt, false);
    try {
      metaloop::audit_transductive(fwd);
    } catch (const metaloop::TaintError&) {
      ++caught;
    }
  }
  return {honest && caught == eps.size(),
          fmt("honest meta_eval on 50 episodes: %s; leaky variant caught in %zu of %zu episodes",
              honest ? "audit clean" : "audit fired", caught, eps.size())};
}

// 10 ------------------------------------------------------------------------
Verdict reproducibility() {
  tapl_run();
  auto again = train_into(runs().cfg, "tapl_again");
  const auto ref = slurp(runs().root / "tapl" / "metrics.jsonl");
  const bool same = ref == slurp(runs().root / "tapl_again" / "metrics.jsonl");

  const fs::path dir = runs().root / "tapl_resumed";
  fs::create_directories(dir);
  fs::copy_file(runs().root / "tapl" / checkpoint_name(200), dir / checkpoint_name(200));
  auto resumed = run_training(runs().cfg, {dir, dir / checkpoint_name(200), nullptr});
  // the resumed directory starts without any metrics; only steps 201.. are written
  std::string tail;
  {
    std::istringstream is(ref);
    std::string l;
    std::getline(is, l);
    tail = l + "\n";
    while (std::getline(is, l)) {
      if (nlohmann::json::parse(l)["step"].get<std::size_t>() > 200) tail += l + "\n";
    }
  }
  const bool metrics_match = slurp(dir / "metrics.jsonl") == tail;
  const std::string final_name = checkpoint_name(runs().cfg.train.iterations);
  const bool ckpt_match = slurp(dir / final_name) == slurp(runs().root / "tapl" / final_name);
  const bool eval_match = resumed.eval.accuracy == tapl_run().eval.accuracy;
  return {same && metrics_match && ckpt_match && eval_match,
          fmt("two runs: metrics %s; resume from step 200: metrics %s, final checkpoint %s, eval %s",
              same ? "byte-identical" : "DIFFER", metrics_match ? "identical" : "DIFFER",
              ckpt_match ? "byte-identical" : "DIFFERS", eval_match ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config = fs::path(TAPL_SOURCE_DIR) / "configs" / "blob.ini";
  if (argc > 1) config = argv[1];
  runs().cfg = RunConfig::load(config.string());
  runs().root = fs::temp_directory_path() / ("tapl_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(runs().root);
  fs::create_directories(runs().root);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"1  propagation closed form vs Neumann series", propagation_oracle},
      {"2  gradient suite", gradient_suite},
      {"3  unit-gamma reduction", unit_gamma_reduction},
      {"4  task vector dimension", task_vector_dimension},
      {"5  learning signal vs support-only baseline", learning_signal},
      {"6  pseudo-label quality", pseudo_label_quality},
      {"7  alpha behaviour", alpha_behaviour},
      {"8  modulation overhead", overhead},
      {"9  transductive hygiene", transductive_hygiene},
      {"10 reproducibility", reproducibility},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS  " : "FAIL  ") << name << "  " << v.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  fs::remove_all(runs().root);
  return failed ? 1 : 0;
}
