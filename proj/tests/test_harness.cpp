#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "tapl/harness.hpp"

using namespace tapl;
using namespace tapl::harness;
namespace fs = std::filesystem;

namespace {

const char* kQuick = R"(
[task]
family = blob
num_classes = 40
samples_per_class = 60
[adapt]
meta_batch = 2
[propagation]
alpha_init = 0.5
[train]
iterations = 20
checkpoint_every = 10
eval_episodes = 20
)";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "tapl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string l;
  while (std::getline(is, l)) out.push_back(l);
  return out;
}

Checkpoint sample_checkpoint() {
  auto cfg = RunConfig::parse(kQuick);
  auto src = cfg.make_source();
  auto params = initial_params(cfg, *src);
  Checkpoint c;
  c.config = cfg.to_text();
  c.tensors = capture(params);
  c.adam = metaloop::init_adam(params);
  c.adam.t = 3;
  c.adam.m[0][0] = -0.0;
  c.adam.v[1][2] = 1e-300;
  c.adam.m[2][1] = std::nextafter(1.0, 2.0);
  Rng r(5);
  r.normal();
  c.rng_states = {{"init", Rng(1).state()}, {"sampling", r.state()}};
  c.iteration = 1234567890123ULL;
  return c;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config text round trip") {
  auto cfg = RunConfig::parse(kQuick);
  CHECK(cfg.train.iterations == 20);
  CHECK(cfg.propagation.alpha_init == 0.5);
  CHECK(RunConfig::parse(cfg.to_text()) == cfg);
  RunConfig odd;
  odd.propagation.alpha_init = 0.1 + 0.2;
  odd.train.modulation = metaloop::Modulation::ForcedOnes;
  odd.task.family = Family::Shapes;
  odd.model.arch = nets::Arch::Conv4;
  CHECK(RunConfig::parse(odd.to_text()) == odd);
}

TEST_CASE("strict config parsing") {
  CHECK_THROWS_AS(RunConfig::parse("[task]\nn_wya = 5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[tsak]\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("n_way = 5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[task]\nn_way = five\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[task]\nn_way = 5\nn_way = 5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[task]\nn_query = 14\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[adapt]\nsecond_order = yes\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[propagation]\nalpha_init = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[task]\nfamily = directory\n"), ConfigError);
  CHECK_NOTHROW(RunConfig::parse("# only a comment\n\n[task]  \n  dim = 8   # trailing\n"));
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "TAPL");
  const auto back = decode_checkpoint(bytes);
  CHECK(back == c);
  CHECK(std::signbit(back.adam.m[0][0]));
  CHECK(encode_checkpoint(back) == bytes);

  TempDir dir("ckpt");
  save_checkpoint(c, dir.path / "c.bin");
  CHECK(load_checkpoint(dir.path / "c.bin") == c);

  auto cfg = RunConfig::parse(c.config);
  auto like = initial_params(cfg, *cfg.make_source());
  auto restored = restore(like, c.tensors);
  CHECK(capture(restored) == c.tensors);
  Rng r(0);
  r.set_state(rng_state(c, "sampling"));
  Rng expect(5);
  expect.normal();
  CHECK(r == expect);
  CHECK_THROWS_AS(rng_state(c, "missing"), CheckpointError);
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  auto wrong_version = bytes;
  wrong_version[4] = 2;
  CHECK_THROWS_AS(decode_checkpoint(wrong_version), CheckpointError);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(wrong_magic), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), CheckpointError);

  auto c = sample_checkpoint();
  c.tensors[0].shape[0] += 1;
  c.tensors[0].values.resize(numel(c.tensors[0].shape));
  auto cfg = RunConfig::parse(c.config);
  CHECK_THROWS_AS(restore(initial_params(cfg, *cfg.make_source()), c.tensors), CheckpointError);
}

TEST_CASE("training artifacts, determinism and resume") {
  TempDir dir("train");
  const auto cfg = RunConfig::parse(kQuick);
  auto a = run_training(cfg, {dir.path / "a", std::nullopt, nullptr});
  auto b = run_training(cfg, {dir.path / "b", std::nullopt, nullptr});
  const auto metrics = slurp(dir.path / "a" / "metrics.jsonl");
  CHECK(metrics == slurp(dir.path / "b" / "metrics.jsonl"));
  CHECK(slurp(dir.path / "a" / "ckpt_000020.bin") == slurp(dir.path / "b" / "ckpt_000020.bin"));
  CHECK(fs::exists(dir.path / "a" / "ckpt_000010.bin"));

  auto ls = lines(metrics);
  REQUIRE(ls.size() == 21);
  auto header = nlohmann::json::parse(ls[0]);
  CHECK(header["format"] == "tapl-metrics");
  CHECK(header["config"] == cfg.to_text());
  for (std::size_t i = 1; i < ls.size(); ++i) {
    auto rec = nlohmann::ordered_json::parse(ls[i]);
    std::vector<std::string> keys;
    for (auto it = rec.begin(); it != rec.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"step", "outer_loss", "query_acc", "pseudo_acc", "alpha", "gamma_mean", "wall_ms"});
    CHECK(rec["step"] == i);
    CHECK(rec["alpha"].get<double>() > 0.0);
    CHECK(rec["alpha"].get<double>() < 1.0);
  }

  // resume from the middle into a directory holding a crashed run's extra records
  fs::create_directories(dir.path / "c");
  fs::copy_file(dir.path / "a" / "ckpt_000010.bin", dir.path / "c" / "ckpt_000010.bin");
  std::string partial;
  for (std::size_t i = 0; i < 14; ++i) partial += ls[i] + "\n";
  spit(dir.path / "c" / "metrics.jsonl", partial);
  auto c = run_training(cfg, {dir.path / "c", dir.path / "c" / "ckpt_000010.bin", nullptr});
  CHECK(slurp(dir.path / "c" / "metrics.jsonl") == metrics);
  CHECK(slurp(dir.path / "c" / "ckpt_000020.bin") == slurp(dir.path / "a" / "ckpt_000020.bin"));
  CHECK(c.eval.accuracy == a.eval.accuracy);

  // metrics of a different run are not silently extended
  auto other = cfg;
  other.train.seed = 99;
  fs::create_directories(dir.path / "d");
  fs::copy_file(dir.path / "a" / "metrics.jsonl", dir.path / "d" / "metrics.jsonl");
  CHECK_THROWS_AS(run_training(other, {dir.path / "d", std::nullopt, nullptr}), CheckpointError);

  // eval on the saved checkpoint reproduces the training report
  std::string out;
  REQUIRE(cli({"eval", "--checkpoint", (dir.path / "a" / "ckpt_000020.bin").string()}, &out) == 0);
  CHECK(out == slurp(dir.path / "a" / "eval.json"));
  CHECK(nlohmann::json::parse(out)["accuracy"].get<double>() == a.eval.accuracy);
}

TEST_CASE("cli train flags") {
  TempDir dir("cli_train");
  spit(dir.path / "run.ini", kQuick);
  std::string out;
  REQUIRE(cli({"train", "--config", (dir.path / "run.ini").string(), "--out", (dir.path / "o").string(),
               "--iterations", "3", "--seed", "4", "--no-pseudo", "--first-order", "--episodes", "5"},
              &out) == 0);
  CHECK(out.find("eval accuracy") != std::string::npos);
  auto cfg = RunConfig::parse(load_checkpoint(dir.path / "o" / "ckpt_000003.bin").config);
  CHECK(cfg.train.iterations == 3);
  CHECK(cfg.train.seed == 4);
  CHECK_FALSE(cfg.train.pseudo_labels);
  CHECK_FALSE(cfg.adapt.second_order);
  CHECK(cfg.train.eval_episodes == 5);
  auto rec = nlohmann::json::parse(lines(slurp(dir.path / "o" / "metrics.jsonl"))[1]);
  CHECK(rec["pseudo_acc"].is_null());
  CHECK(rec["gamma_mean"].is_null());

  REQUIRE(cli({"train", "--config", (dir.path / "run.ini").string(), "--out", (dir.path / "m").string(),
               "--iterations", "2", "--no-modulation"}) == 0);
  cfg = RunConfig::parse(load_checkpoint(dir.path / "m" / "ckpt_000002.bin").config);
  CHECK(cfg.train.modulation == metaloop::Modulation::Bypass);

  std::string err;
  CHECK(cli({"train", "--out", (dir.path / "x").string()}, nullptr, &err) != 0);
  CHECK(cli({"train", "--config", (dir.path / "run.ini").string(), "--out", "x", "--bogus"}, nullptr, &err) != 0);
  spit(dir.path / "bad.ini", "[train]\niteration = 5\n");
  CHECK(cli({"train", "--config", (dir.path / "bad.ini").string(), "--out", (dir.path / "y").string()}, nullptr,
            &err) == 1);
  CHECK(err.find("unknown key 'iteration'") != std::string::npos);
  CHECK(cli({}, nullptr, &err) != 0);
}

TEST_CASE("cli gradcheck passes") {
  std::string out;
  CHECK(cli({"gradcheck"}, &out) == 0);
  CHECK(out.find("FAIL") == std::string::npos);
  CHECK(out.find("second-order outer gradient") != std::string::npos);
}

TEST_CASE("cli gradcheck fails loudly under an impossible tolerance") {
  std::string out;
  CHECK(cli({"gradcheck", "--tol", "1e-30"}, &out) == 1);
  CHECK(out.find("FAIL") != std::string::npos);
}

TEST_CASE("cli propagate with an empty graph returns Y") {
  TempDir dir("prop");
  spit(dir.path / "z.csv", "0.1,0.2,0.3\n1,2,3\n-1,0,1\n4,4,4\n");
  spit(dir.path / "y.csv", "2\n0\n\n-1\n");
  spit(dir.path / "w.csv", "0,0,0,0\n0,0,0,0\n0,0,0,0\n0,0,0,0\n");
  REQUIRE(cli({"propagate", "--logits", (dir.path / "z.csv").string(), "--labels", (dir.path / "y.csv").string(),
               "--affinity", (dir.path / "w.csv").string(), "--out", dir.path.string()}) == 0);
  CHECK(slurp(dir.path / "F.csv") == "0,0,1\n1,0,0\n0,0,0\n0,0,0\n");
  CHECK(slurp(dir.path / "pseudo.csv") == "row,pseudo\n2,0\n3,0\n");
}

TEST_CASE("cli propagate on a logit graph") {
  TempDir dir("prop2");
  spit(dir.path / "z.csv", "0,0\n5,5\n0.2,0.1\n5.1,4.8\n");
  spit(dir.path / "y.csv", "0\n1\n\n\n");
  REQUIRE(cli({"propagate", "--logits", (dir.path / "z.csv").string(), "--labels", (dir.path / "y.csv").string(),
               "--out", dir.path.string(), "--knn", "1"}) == 0);
  CHECK(slurp(dir.path / "pseudo.csv") == "row,pseudo\n2,0\n3,1\n");
  spit(dir.path / "bad.csv", "0,0\n1,x\n");
  std::string err;
  CHECK(cli({"propagate", "--logits", (dir.path / "bad.csv").string(), "--labels", (dir.path / "y.csv").string()},
            nullptr, &err) == 1);
  CHECK(err.find("not a number") != std::string::npos);
  spit(dir.path / "y3.csv", "0\n1\n2\n\n");
  CHECK(cli({"propagate", "--logits", (dir.path / "z.csv").string(), "--labels", (dir.path / "y3.csv").string(),
             "--out", dir.path.string()},
            nullptr, &err) == 1);
}

TEST_CASE("embedding export") {
  TempDir dir("export");
  auto cfg = RunConfig::parse(kQuick);
  cfg.task.separation = 10.0;
  auto src = cfg.make_source();
  auto params = initial_params(cfg, *src);
  auto eps = eval_episodes(cfg, *src, 30, 3);
  auto rows = export_embeddings(cfg, params, eps);
  CHECK(rows.size() == 30 * 20);
  std::size_t queries = 0, agree = 0;
  for (const auto& r : rows) {
    CHECK(r.features.size() == 32);
    if (!r.query) CHECK_FALSE(r.pseudo.has_value());
    if (r.query) {
      ++queries;
      REQUIRE(r.pseudo.has_value());
      agree += *r.pseudo == r.truth;
    }
  }
  CHECK(static_cast<double>(agree) / queries >= 0.9);

  std::ostringstream csv;
  write_embeddings_csv(csv, rows);
  auto ls = lines(csv.str());
  CHECK(ls.size() == rows.size() + 1);
  CHECK(ls[0].rfind("episode,role,gt,pseudo,f0,f1,", 0) == 0);
  CHECK(ls[1].rfind("0,support,0,,", 0) == 0);
  CHECK(ls[6].rfind("0,query,", 0) == 0);

  rows[3].features.pop_back();
  std::ostringstream bad;
  CHECK_THROWS_AS(write_embeddings_csv(bad, rows), std::runtime_error);

  // through the command line
  auto run = run_training(cfg, {dir.path / "run", std::nullopt, nullptr});
  REQUIRE(cli({"export-embeddings", "--checkpoint", run.final_checkpoint.string(), "--episodes", "4", "--out",
               (dir.path / "emb.csv").string()}) == 0);
  CHECK(lines(slurp(dir.path / "emb.csv")).size() == 4 * 20 + 1);
}

TEST_CASE("bench reports both variants") {
  auto cfg = RunConfig::parse(kQuick);
  auto r = run_bench(cfg, 20, 2);
  CHECK(r.iterations == 20);
  CHECK(r.bypass_modulator_calls == 0);
  CHECK(r.task_modulator_calls == 22 * cfg.adapt.meta_batch);
  CHECK(r.task_mean_ms > 0.0);
  CHECK(r.bypass_mean_ms > 0.0);
  CHECK(std::isfinite(r.overhead_pct));
  auto j = nlohmann::json::parse(bench_json(r));
  CHECK(j.contains("task_mean_ms"));
  CHECK(j.contains("bypass_mean_ms"));
  CHECK(j.contains("overhead_pct"));
  CHECK_THROWS_AS(run_bench(cfg, 19), std::invalid_argument);
}

TEST_CASE("label and matrix readers") {
  TempDir dir("readers");
  spit(dir.path / "m.csv", "1, 2.5 ,-3e2\n\n4,5,6\n");
  auto m = read_csv_matrix(dir.path / "m.csv");
  CHECK(m == std::vector<std::vector<double>>{{1, 2.5, -300}, {4, 5, 6}});
  spit(dir.path / "l.csv", "1\n\n-1\n3\n");
  auto l = read_label_column(dir.path / "l.csv");
  REQUIRE(l.size() == 4);
  CHECK(l[0] == 1);
  CHECK_FALSE(l[1].has_value());
  CHECK_FALSE(l[2].has_value());
  CHECK(l[3] == 3);
  spit(dir.path / "f.csv", "1.5\n");
  CHECK_THROWS_AS(read_label_column(dir.path / "f.csv"), std::runtime_error);
  CHECK_THROWS_AS(read_csv_matrix(dir.path / "missing.csv"), std::runtime_error);
}

}  // TEST_SUITE
