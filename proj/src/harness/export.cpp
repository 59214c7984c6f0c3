#include <charconv>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "tapl/harness.hpp"

namespace tapl::harness {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_double(const std::string& cell, const fs::path& path, std::size_t line) {
  const std::string t = trim(cell);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": not a number: '" + t + "'");
  }
  return v;
}

}  // namespace

std::vector<EmbeddingRow> export_embeddings(const RunConfig& cfg, const metaloop::MetaParams& params,
                                            const std::vector<episodes::Episode>& eps) {
  if (eps.empty()) return {};
  std::vector<EmbeddingRow> out;
  const auto sample = eps.front().support_x.shape();
  const auto pipeline = cfg.pipeline(Shape(sample.begin() + 1, sample.end()));
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const auto& ep = eps[e];
    auto fwd = metaloop::episode_forward(params, ep, pipeline, false);
    metaloop::audit_transductive(fwd);
    NoGradGuard ng;
    Tensor feats = nets::backbone_forward(pipeline.backbone, fwd.adapted, fwd.inputs).features;
    const std::size_t d = feats.dim(1);
    for (std::size_t i = 0; i < ep.size(); ++i) {
      EmbeddingRow r;
      r.episode = e;
      r.query = i >= ep.n_support();
      r.truth = r.query ? ep.query_labels[i - ep.n_support()] : ep.support_labels[i];
      if (r.query && fwd.prop.pseudo.defined()) {
        r.pseudo = static_cast<int>(fwd.prop.pseudo[i - ep.n_support()]);
      }
      auto v = feats.values().subspan(i * d, d);
      r.features.assign(v.begin(), v.end());
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_embeddings_csv(std::ostream& os, const std::vector<EmbeddingRow>& rows) {
  const std::size_t d = rows.empty() ? 0 : rows.front().features.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].features.size() != d) {
      throw std::runtime_error("export: row " + std::to_string(i) + " has " +
                               std::to_string(rows[i].features.size()) + " features, expected " +
                               std::to_string(d));
    }
  }
  os << "episode,role,gt,pseudo";
  for (std::size_t j = 0; j < d; ++j) os << ",f" << j;
  os << '\n';
  std::ostringstream line;
  line.precision(17);
  for (const auto& r : rows) {
    line.str({});
    line << r.episode << ',' << (r.query ? "query" : "support") << ',' << r.truth << ',';
    if (r.pseudo) line << *r.pseudo;
    for (double v : r.features) line << ',' << v;
    os << line.str() << '\n';
  }
}

PropagateOutput propagate_table(const std::vector<std::vector<double>>& logits,
                                const std::vector<std::optional<int>>& labels,
                                const std::optional<std::vector<std::vector<double>>>& affinity,
                                const PropagateOptions& opts) {
  const std::size_t n = logits.size();
  if (n < 2) throw std::runtime_error("propagate: need at least two rows");
  if (labels.size() != n) {
    throw std::runtime_error("propagate: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
  }
  const std::size_t width = logits.front().size();
  std::vector<double> z;
  for (std::size_t i = 0; i < n; ++i) {
    if (logits[i].size() != width) throw std::runtime_error("propagate: ragged logit row " + std::to_string(i));
    z.insert(z.end(), logits[i].begin(), logits[i].end());
  }
  const std::size_t n_way = opts.n_way ? opts.n_way : width;
  std::vector<double> y(n * n_way, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels[i]) continue;
    const int c = *labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n_way) {
      throw std::runtime_error("propagate: label " + std::to_string(c) + " on row " + std::to_string(i) +
                               " outside 0.." + std::to_string(n_way - 1));
    }
    y[i * n_way + static_cast<std::size_t>(c)] = 1.0;
  }

  Tensor s;
  if (affinity) {
    if (affinity->size() != n) throw std::runtime_error("propagate: affinity must be n x n");
    std::vector<double> w;
    for (const auto& row : *affinity) {
      if (row.size() != n) throw std::runtime_error("propagate: affinity must be n x n");
      w.insert(w.end(), row.begin(), row.end());
    }
    s = propagation::normalize(Tensor::constant({n, n}, std::move(w)));
  } else {
    const std::size_t k = opts.knn ? opts.knn : propagation::default_knn(n);
    s = propagation::build_graph(Tensor::constant({n, width}, std::move(z)), Tensor::ones({n}), k).s;
  }
  Tensor f = propagation::propagate(s, Tensor::constant({n, n_way}, std::move(y)),
                                    Tensor::scalar(propagation::alpha_to_raw(opts.alpha)));
  PropagateOutput out{f, {}};
  Tensor best = argmax_rows(f);
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels[i]) out.pseudo.emplace_back(i, static_cast<int>(best[i]));
  }
  return out;
}

std::vector<std::vector<double>> read_csv_matrix(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(parse_double(cell, path, lineno));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::optional<int>> read_label_column(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::optional<int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) {
      out.emplace_back();
      continue;
    }
    const double v = parse_double(t, path, lineno);
    if (v != static_cast<int>(v)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": label is not an integer");
    }
    if (v < 0) out.emplace_back();
    else out.emplace_back(static_cast<int>(v));
  }
  // a trailing newline would otherwise add nothing; trailing blank lines are unlabeled rows
  return out;
}

}  // namespace tapl::harness
