#include <cmath>
#include <memory>

#include "doctest.h"
#include "oracles.hpp"
#include "tapl/autodiff.hpp"
#include "tapl/rng.hpp"

using namespace tapl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool param = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return param ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor::constant(std::move(shape), std::move(v));
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("relu clamps negatives") {
  auto y = relu(Tensor::constant({3}, {-1, 0, 2}));
  CHECK(vec(y) == std::vector<double>{0, 0, 2});
}

TEST_CASE("linear_solve with the identity returns B") {
  Rng rng(1);
  for (std::size_t c : {1u, 2u, 5u}) {
    auto b = random_tensor({3, c}, rng, false);
    CHECK(vec(linear_solve(Tensor::identity(3), b)) == vec(b));
  }
}

TEST_CASE("softmax of equal entries is uniform") {
  auto y = softmax_rows(Tensor::constant({1, 3}, {0, 0, 0}));
  for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum of squares") {
  auto x = Tensor::parameter({3}, {1, 2, 3});
  auto g = grad(sum(mul(x, x)), x);
  CHECK(vec(g) == std::vector<double>{2, 4, 6});
}

TEST_CASE("second derivative of x^3 at 2 is 12") {
  auto x = Tensor::parameter({1}, {2});
  auto y = mul(mul(x, x), x);
  auto g = grad(y, x, true);
  CHECK(g.item() == doctest::Approx(12.0));
  auto gg = grad(g, x);
  CHECK(gg.item() == doctest::Approx(12.0).epsilon(1e-14));
}

TEST_CASE("derivative through linear_solve matches finite differences") {
  const oracle::Matrix s = {{0.0, 0.4, 0.3}, {0.4, 0.0, 0.2}, {0.3, 0.2, 0.0}};
  const oracle::Matrix y = {{1, 0}, {0, 1}, {0, 0}};
  auto total = [&](double alpha) {
    oracle::Matrix a = oracle::zeros(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a[i][j] = (i == j) - alpha * s[i][j];
    double t = 0.0;
    for (const auto& row : oracle::solve(a, y))
      for (double v : row) t += v;
    return t;
  };
  const double h = 1e-5;
  const double numeric = (total(0.5 + h) - total(0.5 - h)) / (2 * h);

  auto alpha = Tensor::parameter({1}, {0.5});
  auto st = Tensor::constant({3, 3}, {0.0, 0.4, 0.3, 0.4, 0.0, 0.2, 0.3, 0.2, 0.0});
  auto yt = Tensor::constant({3, 2}, {1, 0, 0, 1, 0, 0});
  auto a = sub(Tensor::identity(3), mul(broadcast_to(alpha, {3, 3}), st));
  auto g = grad(sum(linear_solve(a, yt)), alpha);
  CHECK(std::abs(g.item() - numeric) / std::abs(numeric) <= 1e-6);
}

TEST_CASE("gradcheck passes on a two-layer MLP cross-entropy") {
  Rng rng(3);
  auto x = random_tensor({4, 3}, rng, false);
  auto targets = Tensor::constant({4}, {0, 1, 1, 0});
  auto f = [&](const std::vector<Tensor>& p) {
    auto h = relu(add(matmul(x, p[0]), broadcast_to(p[1], {4, 5})));
    return cross_entropy(add(matmul(h, p[2]), broadcast_to(p[3], {4, 2})), targets);
  };
  auto report = gradcheck(f, {random_tensor({3, 5}, rng), random_tensor({5}, rng),
                              random_tensor({5, 2}, rng), random_tensor({2}, rng)},
                          1e-5, 1e-5);
  CHECK(report.passed);
  CHECK(report.entries.size() == 15 + 5 + 10 + 2);
}

TEST_CASE("gradcheck passes on sum of sigmoid") {
  Rng rng(4);
  auto report = gradcheck([](const std::vector<Tensor>& p) { return sum(sigmoid(p[0])); },
                          {random_tensor({7}, rng)}, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("argmax in the differentiated path is unreachable") {
  auto x = Tensor::parameter({2, 3}, {0.1, 0.5, 0.2, 0.9, 0.0, 0.3});
  auto y = sum(argmax_rows(x));
  CHECK_THROWS_AS(grad(y, x), UnreachableError);
  CHECK_THROWS_AS(gradcheck([](const std::vector<Tensor>& p) { return sum(argmax_rows(p[0])); }, {x}),
                  UnreachableError);
}

TEST_CASE("unconnected input is unreachable") {
  auto x = Tensor::parameter({2}, {1, 2});
  auto z = Tensor::parameter({2}, {1, 2});
  CHECK_THROWS_AS(grad(sum(x), z), UnreachableError);
}

TEST_CASE("argmax ties go to the lowest index") {
  auto a = argmax_rows(Tensor::constant({2, 3}, {0.5, 0.5, 0.0, 0.0, 1.0, 1.0}));
  CHECK(vec(a) == std::vector<double>{0, 1});
}

TEST_CASE("shape errors") {
  auto a = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = Tensor::constant({3, 2}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(linear_solve(a, b), ShapeError);
  CHECK_THROWS_AS(Tensor::constant({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("singular systems are rejected") {
  auto a = Tensor::constant({2, 2}, {1, 2, 2, 4});
  CHECK_THROWS_AS(linear_solve(a, Tensor::identity(2)), SingularMatrixError);
}

TEST_CASE("linear_solve agrees with Gauss-Jordan") {
  Rng rng(5);
  auto a = add(random_tensor({6, 6}, rng, false), scale(Tensor::identity(6), 4.0));
  auto b = random_tensor({6, 3}, rng, false);
  auto expect = oracle::solve(oracle::from_tensor(a), oracle::from_tensor(b));
  CHECK(oracle::max_abs_diff(oracle::from_tensor(linear_solve(a, b)), expect) < 1e-12);
}

TEST_CASE("sq_dist_matrix against direct sums") {
  Rng rng(6);
  auto x = random_tensor({5, 4}, rng, false);
  auto d = sq_dist_matrix(x);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double e = 0.0;
      for (std::size_t k = 0; k < 4; ++k) e += std::pow(x.at(i, k) - x.at(j, k), 2);
      CHECK(d.at(i, j) == doctest::Approx(e).epsilon(1e-12));
    }
}

TEST_CASE("conv2d against a direct loop") {
  Rng rng(7);
  auto x = random_tensor({2, 3, 5, 4}, rng, false);
  auto w = random_tensor({4, 3, 3, 3}, rng, false);
  auto y = conv2d(x, w, 1);
  REQUIRE(y.shape() == Shape{2, 4, 5, 4});
  auto xv = x.values();
  auto wv = w.values();
  double worst = 0.0;
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
          double acc = 0.0;
          for (int c = 0; c < 3; ++c)
            for (int di = 0; di < 3; ++di)
              for (int dj = 0; dj < 3; ++dj) {
                const int ii = i + di - 1, jj = j + dj - 1;
                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 4) continue;
                acc += xv[((b * 3 + c) * 5 + ii) * 4 + jj] * wv[((o * 3 + c) * 3 + di) * 3 + dj];
              }
          worst = std::max(worst, std::abs(acc - y[((b * 4 + o) * 5 + i) * 4 + j]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("max_pool2d takes 2x2 maxima") {
  auto x = Tensor::constant({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  CHECK(vec(max_pool2d(x)) == std::vector<double>{5, 8});
}

TEST_CASE("batchnorm normalizes each channel") {
  Rng rng(8);
  auto x = random_tensor({4, 2, 3, 3}, rng, false);
  auto y = batchnorm_channels(x, Tensor::ones({2}), Tensor::zeros({2}), 0.0);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 9; ++k) m += y[(b * 2 + c) * 9 + k];
    m /= 36;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 9; ++k) v += std::pow(y[(b * 2 + c) * 9 + k] - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 36 == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("broadcast_to and sum_to are adjoint") {
  Rng rng(9);
  auto x = random_tensor({3, 1}, rng, false);
  auto y = random_tensor({2, 3, 4}, rng, false);
  const double lhs = sum(mul(broadcast_to(x, {2, 3, 4}), y)).item();
  const double rhs = sum(mul(x, sum_to(y, {3, 1}))).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("no-grad mode and detach stop gradients but keep provenance") {
  auto x = Tensor::parameter({2}, {1, 2}, "secret");
  {
    NoGradGuard ng;
    CHECK_FALSE(exp(x).requires_grad());
  }
  auto d = x.detach();
  CHECK_FALSE(d.requires_grad());
  std::vector<Tensor> roots{add(d, Tensor::ones({2}))};
  CHECK(depends_on_tag(roots, "secret"));
  std::vector<Tensor> barrier{argmax_rows(reshape(x, {1, 2}))};
  CHECK(depends_on_tag(barrier, "secret"));
  std::vector<Tensor> clean{add(x, Tensor::ones({2})).clone_leaf(true)};
  CHECK_FALSE(depends_on_tag(clean, "secret"));
}

TEST_CASE("rsqrt_or_zero is zero on non-positive inputs") {
  auto y = rsqrt_or_zero(Tensor::constant({3}, {4, 0, -1}));
  CHECK(vec(y) == std::vector<double>{0.5, 0, 0});
}

}  // TEST_SUITE
