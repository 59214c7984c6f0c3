#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tapl/autodiff.hpp"

namespace tapl {

namespace {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank(std::string_view op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(x.shape()));
  }
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
  std::vector<double> out(x.numel());
  auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  return out;
}

template <class F>
std::vector<double> zip_values(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.numel());
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
  return out;
}

// Flat input index for every element of `out` when `in` is broadcast to it.
Index broadcast_index(std::string_view op, const Shape& in, const Shape& out) {
  if (in.size() > out.size()) throw ShapeError(op, in, out);
  const std::size_t r = out.size();
  const std::size_t offset = r - in.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t d = k + offset;
    if (in[k] != out[d] && in[k] != 1) throw ShapeError(op, in, out);
    in_stride[d] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(numel(out));
  std::vector<std::size_t> counter(r, 0);
  std::size_t flat_in = 0;
  for (std::size_t i = 0; i < idx->size(); ++i) {
    (*idx)[i] = flat_in;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      flat_in += in_stride[d];
      if (counter[d] < out[d]) break;
      flat_in -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

Tensor gather_named(const Tensor& x, Index index, Shape out_shape, std::string op);
Tensor scatter_named(const Tensor& x, Index index, Shape out_shape, std::string op);

Tensor gather_named(const Tensor& x, Index index, Shape out_shape, std::string op) {
  if (index->size() != numel(out_shape)) {
    throw ShapeError(op, "index count does not match output shape " + shape_str(out_shape));
  }
  std::vector<double> out(index->size());
  auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= v.size()) throw ShapeError(op, "index out of range");
    out[i] = v[j];
  }
  Shape in_shape = x.shape();
  std::string back_op = op == "broadcast_to" ? "sum_to" : "scatter_add";
  return make_node(std::move(op), std::move(out_shape), std::move(out), {x},
                   [index, in_shape, back_op](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{scatter_named(g, index, in_shape, back_op)};
                   });
}

Tensor scatter_named(const Tensor& x, Index index, Shape out_shape, std::string op) {
  if (index->size() != x.numel()) {
    throw ShapeError(op, "index count does not match input shape " + shape_str(x.shape()));
  }
  std::vector<double> out(numel(out_shape), 0.0);
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= out.size()) throw ShapeError(op, "index out of range");
    out[j] += v[i];
  }
  Shape in_shape = x.shape();
  std::string back_op = op == "sum_to" ? "broadcast_to" : "gather";
  return make_node(std::move(op), std::move(out_shape), std::move(out), {x},
                   [index, in_shape, back_op](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{gather_named(g, index, in_shape, back_op)};
                   });
}

Tensor one_hot(const Tensor& targets, std::size_t classes) {
  const std::size_t n = targets.numel();
  std::vector<double> v(n * classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    v[i * classes + static_cast<std::size_t>(targets[i])] = 1.0;
  }
  return Tensor::constant({n, classes}, std::move(v));
}

struct ConvGeom {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, pad, oh, ow;
};

ConvGeom conv_geom(std::string_view op, const Shape& x, const Shape& w, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError(op, x, w);
  if (x[1] != w[1]) throw ShapeError(op, x, w);
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) throw ShapeError(op, x, w);
  ConvGeom g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad, 0, 0};
  g.oh = g.h + 2 * pad - g.kh + 1;
  g.ow = g.w + 2 * pad - g.kw + 1;
  return g;
}

// Visits every (output position, input position, weight position) triple of
// a stride-1 padded convolution whose input position is in bounds.
template <class F>
void for_each_tap(const ConvGeom& g, F f) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_ch; ++o)
      for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::size_t wi = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
            for (std::size_t y = 0; y < g.oh; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const std::size_t out_row = ((b * g.out_ch + o) * g.oh + y) * g.ow;
              const std::size_t in_row =
                  ((b * g.in_ch + c) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t x = 0; x < g.ow; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                f(out_row + x, in_row + static_cast<std::size_t>(ix), wi);
              }
            }
          }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  return make_node("add", a.shape(), zip_values(a, b, std::plus<>{}), {a, b},
                   [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  return make_node("sub", a.shape(), zip_values(a, b, std::minus<>{}), {a, b},
                   [](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{g, neg(g)};
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  return make_node("mul", a.shape(), zip_values(a, b, std::multiplies<>{}), {a, b},
                   [a, b](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{mul(g, b), mul(g, a)};
                   });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same("div", a, b);
  return make_node("div", a.shape(), zip_values(a, b, std::divides<>{}), {a, b},
                   [b](const Tensor& g, const Tensor& out) {
                     return std::vector<Tensor>{div(g, b), neg(div(mul(g, out), b))};
                   });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  require_same("maximum", a, b);
  // Ties route the whole gradient to `a`.
  auto pick_a = zip_values(a, b, [](double x, double y) { return x >= y ? 1.0 : 0.0; });
  Tensor mask_a = Tensor::constant(a.shape(), pick_a);
  for (auto& m : pick_a) m = 1.0 - m;
  Tensor mask_b = Tensor::constant(a.shape(), std::move(pick_a));
  return make_node("maximum", a.shape(),
                   zip_values(a, b, [](double x, double y) { return std::max(x, y); }),
                   {a, b}, [mask_a, mask_b](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{mul(g, mask_a), mul(g, mask_b)};
                   });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double c) {
  return make_node("scale", x.shape(), map_values(x, [c](double v) { return c * v; }), {x},
                   [c](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{scale(g, c)};
                   });
}

Tensor add_scalar(const Tensor& x, double c) {
  return make_node("add_scalar", x.shape(), map_values(x, [c](double v) { return v + c; }),
                   {x}, [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g}; });
}

Tensor exp(const Tensor& x) {
  return make_node("exp", x.shape(), map_values(x, [](double v) { return std::exp(v); }), {x},
                   [](const Tensor& g, const Tensor& out) {
                     return std::vector<Tensor>{mul(g, out)};
                   });
}

Tensor log(const Tensor& x) {
  return make_node("log", x.shape(), map_values(x, [](double v) { return std::log(v); }), {x},
                   [x](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{div(g, x)};
                   });
}

Tensor relu(const Tensor& x) {
  Tensor mask =
      Tensor::constant(x.shape(), map_values(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  return make_node("relu", x.shape(), map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }),
                   {x}, [mask](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{mul(g, mask)};
                   });
}

Tensor sigmoid(const Tensor& x) {
  auto f = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return make_node("sigmoid", x.shape(), map_values(x, f), {x},
                   [](const Tensor& g, const Tensor& out) {
                     return std::vector<Tensor>{mul(g, mul(out, add_scalar(neg(out), 1.0)))};
                   });
}

Tensor rsqrt_or_zero(const Tensor& x) {
  auto f = [](double v) { return v > 0.0 ? 1.0 / std::sqrt(v) : 0.0; };
  return make_node("rsqrt_or_zero", x.shape(), map_values(x, f), {x},
                   [](const Tensor& g, const Tensor& out) {
                     return std::vector<Tensor>{scale(mul(g, mul(out, mul(out, out))), -0.5)};
                   });
}

// ---------------------------------------------------------------------------
// linear algebra and layout
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = va[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * vb[p * n + j];
    }
  return make_node("matmul", {m, n}, std::move(out), {a, b},
                   [a, b](const Tensor& g, const Tensor&) {
                     Tensor ga = a.requires_grad() ? matmul(g, transpose(b)) : Tensor{};
                     Tensor gb = b.requires_grad() ? matmul(transpose(a), g) : Tensor{};
                     return std::vector<Tensor>{ga, gb};
                   });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(r * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < r; ++j) (*idx)[i * r + j] = j * c + i;
  return gather_named(x, idx, {c, r}, "transpose");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  Shape in_shape = x.shape();
  return make_node("reshape", std::move(shape), std::vector<double>(x.values().begin(), x.values().end()),
                   {x}, [in_shape](const Tensor& g, const Tensor&) {
                     return std::vector<Tensor>{reshape(g, in_shape)};
                   });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  if (x.shape() == shape) return x;
  auto idx = broadcast_index("broadcast_to", x.shape(), shape);
  return gather_named(x, std::move(idx), std::move(shape), "broadcast_to");
}

Tensor sum_to(const Tensor& x, Shape shape) {
  if (x.shape() == shape) return x;
  auto idx = broadcast_index("sum_to", shape, x.shape());
  return scatter_named(x, std::move(idx), std::move(shape), "sum_to");
}

Tensor sum(const Tensor& x) {
  auto idx = std::make_shared<std::vector<std::size_t>>(x.numel(), 0);
  return scatter_named(x, std::move(idx), {}, "sum_to");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor gather(const Tensor& x, Index index, Shape out_shape, std::string op) {
  return gather_named(x, std::move(index), std::move(out_shape), std::move(op));
}

Tensor scatter_add(const Tensor& x, Index index, Shape out_shape) {
  return scatter_named(x, std::move(index), std::move(out_shape), "scatter_add");
}

Tensor rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() == 0 || begin + count > x.dim(0)) {
    throw ShapeError("rows", "range [" + std::to_string(begin) + ", " +
                                 std::to_string(begin + count) + ") outside shape " +
                                 shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / x.dim(0);
  auto idx = std::make_shared<std::vector<std::size_t>>(count * inner);
  std::iota(idx->begin(), idx->end(), begin * inner);
  Shape out = x.shape();
  out[0] = count;
  return gather_named(x, std::move(idx), std::move(out), "rows");
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Shape trailing(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  std::size_t total = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() == 0) throw ShapeError("concat", "scalar input; reshape to (1) first");
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != trailing) throw ShapeError("concat", parts[0].shape(), p.shape());
    offsets.push_back(total);
    total += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{total};
  shape.insert(shape.end(), trailing.begin(), trailing.end());
  std::vector<std::size_t> counts;
  for (const auto& p : parts) counts.push_back(p.dim(0));
  return make_node("concat", std::move(shape), std::move(out), parts,
                   [offsets, counts](const Tensor& g, const Tensor&) {
                     std::vector<Tensor> gs;
                     for (std::size_t i = 0; i < offsets.size(); ++i) {
                       gs.push_back(rows(g, offsets[i], counts[i]));
                     }
                     return gs;
                   });
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require_rank("softmax_rows", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  auto v = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, v[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += out[i * c + j] = std::exp(v[i * c + j] - m);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_node("softmax_rows", x.shape(), std::move(out), {x},
                   [n, c](const Tensor& g, const Tensor& s) {
                     Tensor dot = broadcast_to(sum_to(mul(g, s), {n, 1}), {n, c});
                     return std::vector<Tensor>{mul(s, sub(g, dot))};
                   });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.rank() != 1 || targets.dim(0) != n) {
    throw ShapeError("cross_entropy", logits.shape(), targets.shape());
  }
  if (n == 0) throw ShapeError("cross_entropy", "empty batch");
  for (std::size_t i = 0; i < n; ++i) {
    const double t = targets[i];
    if (t < 0 || t >= static_cast<double>(c) || t != std::floor(t)) {
      throw ShapeError("cross_entropy", "target " + std::to_string(t) +
                                            " is not a class index below " + std::to_string(c));
    }
  }
  auto v = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, v[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(v[i * c + j] - m);
    loss += std::log(z) + m - v[i * c + static_cast<std::size_t>(targets[i])];
  }
  loss /= static_cast<double>(n);
  return make_node("cross_entropy", {}, {loss}, {logits, targets},
                   [logits, targets, n, c](const Tensor& g, const Tensor&) {
                     Tensor diff = sub(softmax_rows(logits), one_hot(targets, c));
                     Tensor gb = broadcast_to(reshape(g, {1, 1}), {n, c});
                     return std::vector<Tensor>{
                         scale(mul(gb, diff), 1.0 / static_cast<double>(n)), Tensor{}};
                   });
}

Tensor argmax_rows(const Tensor& x) {
  require_rank("argmax_rows", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (c == 0) throw ShapeError("argmax_rows", "zero columns");
  std::vector<double> out(n);
  auto v = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    out[i] = static_cast<double>(best);
  }
  // No backward rule: the output is a gradient barrier but keeps provenance.
  return make_node("argmax_rows", {n}, std::move(out), {x}, nullptr);
}

// ---------------------------------------------------------------------------
// graph-specific
// ---------------------------------------------------------------------------

Tensor sq_dist_matrix(const Tensor& x) {
  require_rank("sq_dist_matrix", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(n * n, 0.0);
  auto v = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = v[i * d + k] - v[j * d + k];
        s += diff * diff;
      }
      out[i * n + j] = out[j * n + i] = s;
    }
  return make_node("sq_dist_matrix", {n, n}, std::move(out), {x},
                   [x, n, d](const Tensor& g, const Tensor&) {
                     Tensor gs = add(g, transpose(g));
                     Tensor r = broadcast_to(sum_to(gs, {n, 1}), {n, d});
                     return std::vector<Tensor>{scale(sub(mul(r, x), matmul(gs, x)), 2.0)};
                   });
}

Tensor linear_solve(const Tensor& a, const Tensor& b) {
  require_rank("linear_solve", a, 2);
  require_rank("linear_solve", b, 2);
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n || b.dim(0) != n) throw ShapeError("linear_solve", a.shape(), b.shape());
  const std::size_t c = b.dim(1);
  std::vector<double> lu(a.values().begin(), a.values().end());
  std::vector<double> x(b.values().begin(), b.values().end());
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(lu[i * n + k]) > std::abs(lu[piv * n + k])) piv = i;
    }
    if (!(std::abs(lu[piv * n + k]) >= 1e-12)) {
      throw SingularMatrixError("linear_solve: pivot " + std::to_string(lu[piv * n + k]) +
                                " at column " + std::to_string(k) + " is below 1e-12");
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[piv * n + j]);
      for (std::size_t j = 0; j < c; ++j) std::swap(x[k * c + j], x[piv * c + j]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu[i * n + k] / lu[k * n + k];
      if (f == 0.0) continue;
      for (std::size_t j = k; j < n; ++j) lu[i * n + j] -= f * lu[k * n + j];
      for (std::size_t j = 0; j < c; ++j) x[i * c + j] -= f * x[k * c + j];
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t j = 0; j < c; ++j) {
      double s = x[k * c + j];
      for (std::size_t p = k + 1; p < n; ++p) s -= lu[k * n + p] * x[p * c + j];
      x[k * c + j] = s / lu[k * n + k];
    }
  }
  // Adjoint identities: grad_B = A^-T grad_X, grad_A = -grad_B X^T.
  return make_node("linear_solve", {n, c}, std::move(x), {a, b},
                   [a](const Tensor& g, const Tensor& out) {
                     Tensor gb = linear_solve(transpose(a), g);
                     Tensor ga = a.requires_grad() ? neg(matmul(gb, transpose(out))) : Tensor{};
                     return std::vector<Tensor>{ga, gb};
                   });
}

// ---------------------------------------------------------------------------
// convolutional backbone ops
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  const ConvGeom g = conv_geom("conv2d", x.shape(), w.shape(), pad);
  std::vector<double> out(g.batch * g.out_ch * g.oh * g.ow, 0.0);
  auto vx = x.values();
  auto vw = w.values();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { out[o] += vw[k] * vx[i]; });
  Shape xs = x.shape(), ws = w.shape();
  return make_node("conv2d", {g.batch, g.out_ch, g.oh, g.ow}, std::move(out), {x, w},
                   [x, w, xs, ws, pad](const Tensor& go, const Tensor&) {
                     Tensor gx = x.requires_grad() ? conv2d_input_grad(go, w, xs, pad) : Tensor{};
                     Tensor gw = w.requires_grad() ? conv2d_weight_grad(x, go, ws, pad) : Tensor{};
                     return std::vector<Tensor>{gx, gw};
                   });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         std::size_t pad) {
  const ConvGeom g = conv_geom("conv2d_input_grad", input_shape, w.shape(), pad);
  if (grad_out.shape() != Shape{g.batch, g.out_ch, g.oh, g.ow}) {
    throw ShapeError("conv2d_input_grad", grad_out.shape(), Shape{g.batch, g.out_ch, g.oh, g.ow});
  }
  std::vector<double> out(numel(input_shape), 0.0);
  auto vg = grad_out.values();
  auto vw = w.values();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { out[i] += vw[k] * vg[o]; });
  Shape ws = w.shape();
  return make_node("conv2d_input_grad", input_shape, std::move(out), {grad_out, w},
                   [grad_out, w, ws, pad](const Tensor& h, const Tensor&) {
                     Tensor gg = grad_out.requires_grad() ? conv2d(h, w, pad) : Tensor{};
                     Tensor gw = w.requires_grad() ? conv2d_weight_grad(h, grad_out, ws, pad) : Tensor{};
                     return std::vector<Tensor>{gg, gw};
                   });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                          std::size_t pad) {
  const ConvGeom g = conv_geom("conv2d_weight_grad", x.shape(), weight_shape, pad);
  if (grad_out.shape() != Shape{g.batch, g.out_ch, g.oh, g.ow}) {
    throw ShapeError("conv2d_weight_grad", grad_out.shape(), Shape{g.batch, g.out_ch, g.oh, g.ow});
  }
  std::vector<double> out(numel(weight_shape), 0.0);
  auto vg = grad_out.values();
  auto vx = x.values();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { out[k] += vg[o] * vx[i]; });
  Shape xs = x.shape();
  return make_node("conv2d_weight_grad", weight_shape, std::move(out), {x, grad_out},
                   [x, grad_out, xs, pad](const Tensor& h, const Tensor&) {
                     Tensor gx = x.requires_grad() ? conv2d_input_grad(grad_out, h, xs, pad) : Tensor{};
                     Tensor gg = grad_out.requires_grad() ? conv2d(x, h, pad) : Tensor{};
                     return std::vector<Tensor>{gx, gg};
                   });
}

Tensor max_pool2d(const Tensor& x) {
  require_rank("max_pool2d", x, 4);
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("max_pool2d", "spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto idx = std::make_shared<std::vector<std::size_t>>(b * c * oh * ow);
  auto v = x.values();
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < b * c; ++bc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = bc * h * w;
        std::size_t best = base + (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t cand = base + (2 * y + dy) * w + 2 * xx + dx;
            if (v[cand] > v[best]) best = cand;
          }
        (*idx)[o++] = best;
      }
  return gather_named(x, std::move(idx), {b, c, oh, ow}, "max_pool2d");
}

Tensor batchnorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps) {
  if (x.rank() < 2) throw ShapeError("batchnorm_channels", "input needs a channel axis");
  const std::size_t c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batchnorm_channels", x.shape(), gamma.shape());
  }
  Shape stat(x.rank(), 1);
  stat[1] = c;
  const double count = static_cast<double>(x.numel() / c);
  Tensor mu = scale(sum_to(x, stat), 1.0 / count);
  Tensor centered = sub(x, broadcast_to(mu, x.shape()));
  Tensor var = scale(sum_to(mul(centered, centered), stat), 1.0 / count);
  Tensor inv = rsqrt_or_zero(add_scalar(var, eps));
  Tensor xhat = mul(centered, broadcast_to(inv, x.shape()));
  return add(mul(xhat, broadcast_to(reshape(gamma, stat), x.shape())),
             broadcast_to(reshape(beta, stat), x.shape()));
}

}  // namespace tapl
