#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tapl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

class ShapeError : public std::runtime_error {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b);
  ShapeError(std::string_view op, const std::string& what);
};

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown by grad() when a requested input receives no gradient from the
/// output (not connected, or connected only through a gradient barrier).
class UnreachableError : public GradError {
 public:
  using GradError::GradError;
};

// ---------------------------------------------------------------------------
// graph nodes
// ---------------------------------------------------------------------------

class Tensor;

/// Backward rule: maps the upstream gradient to one gradient per input.
/// An undefined Tensor in the result means "no gradient for this input".
/// The rule receives the node's own output so it never needs to capture it.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

struct Node {
  std::uint64_t id = 0;
  std::string op;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  // Every input is kept as provenance; only inputs that require grad take
  // part in backpropagation.
  std::vector<Tensor> inputs;
  BackwardFn backward;
  std::string tag;
};

/// Handle to a node of the dynamic computation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values,
                         std::string tag = {});
  static Tensor parameter(Shape shape, std::vector<double> values,
                          std::string tag = {});
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor identity(std::size_t n);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  const std::string& op() const { return node_->op; }
  const std::string& tag() const { return node_->tag; }
  Tensor& set_tag(std::string tag);

  /// Same values, no gradient. Provenance to this tensor is kept.
  Tensor detach() const;
  /// Fresh leaf with a copy of the values and no history at all.
  Tensor clone_leaf(bool requires_grad) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// grad mode
// ---------------------------------------------------------------------------

bool grad_enabled();

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Creates an op node. Used by the primitives; exposed for tests that want
/// to register custom ops.
Tensor make_node(std::string op, Shape shape, std::vector<double> value,
                 std::vector<Tensor> inputs, BackwardFn backward);

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// x^(-1/2) for x > 0, exactly 0 for x <= 0.
Tensor rsqrt_or_zero(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Numpy-style broadcast (trailing alignment, size-1 dims expand).
Tensor broadcast_to(const Tensor& x, Shape shape);
/// Sums x down to `shape`; the inverse of broadcast_to.
Tensor sum_to(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// out[i] = x[index[i]]; the op name is recorded as given.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index,
              Shape out_shape, std::string op = "gather");
/// out[index[i]] += x[i]
Tensor scatter_add(const Tensor& x,
                   std::shared_ptr<const std::vector<std::size_t>> index,
                   Shape out_shape);

/// Rows [begin, begin + count) along axis 0.
Tensor rows(const Tensor& x, std::size_t begin, std::size_t count);
/// Concatenation along axis 0; trailing dims must match.
Tensor concat(const std::vector<Tensor>& parts);

Tensor softmax_rows(const Tensor& x);
/// Mean over rows of -log softmax(logits)[target]. Targets are class indices
/// stored as doubles; they are provenance only and never receive gradient.
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);

/// D[i][j] = sum_k (x[i][k] - x[j][k])^2 for an n x d input.
Tensor sq_dist_matrix(const Tensor& x);

/// Solves A X = B by LU with partial pivoting. Throws SingularMatrixError
/// when a pivot falls below 1e-12 in magnitude.
Tensor linear_solve(const Tensor& a, const Tensor& b);

/// Row-wise argmax (lowest index on ties). Gradient barrier.
Tensor argmax_rows(const Tensor& x);

/// Stride-1 convolution with symmetric zero padding. x: B x C x H x W,
/// w: O x C x kh x kw.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w,
                         const Shape& input_shape, std::size_t pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out,
                          const Shape& weight_shape, std::size_t pad);

/// Non-overlapping 2x2 / stride 2 max pooling over B x C x H x W.
Tensor max_pool2d(const Tensor& x);

/// Per-channel normalization with batch statistics over every axis but 1,
/// followed by the affine map gamma * xhat + beta.
Tensor batchnorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps = 1e-5);

// ---------------------------------------------------------------------------
// differentiation
// ---------------------------------------------------------------------------

/// Gradients of a scalar output with respect to each tensor in `wrt`.
/// With create_graph the results are differentiable graph nodes.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph = false);
Tensor grad(const Tensor& output, const Tensor& wrt, bool create_graph = false);

/// True when any ancestor of `roots` (including through gradient barriers
/// and detached values) carries `tag`.
bool depends_on_tag(std::span<const Tensor> roots, std::string_view tag);

struct GradcheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool finite = true;
};

struct GradcheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t nonfinite = 0;
  std::vector<GradcheckEntry> entries;
};

using GraphBuilder = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central-difference check of grad() on `f` at `inputs`. Relative error is
/// |analytic - numeric| / max(1, |numeric|).
GradcheckReport gradcheck(const GraphBuilder& f, const std::vector<Tensor>& inputs,
                          double h = 1e-5, double tol = 1e-5);

}  // namespace tapl
