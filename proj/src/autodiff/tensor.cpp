#include "tapl/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace tapl {

namespace {

// Global so that ids stay increasing across threads: any input is created
// before the node consuming it, so descending id order is a valid reverse
// topological order.
std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> new_node(std::string op, Shape shape, std::vector<double> value) {
  if (numel(shape) != value.size()) {
    throw ShapeError(op, "value count " + std::to_string(value.size()) +
                             " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b)
    : std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b)) {}

ShapeError::ShapeError(std::string_view op, const std::string& what)
    : std::runtime_error(std::string(op) + ": " + what) {}

// ---------------------------------------------------------------------------

Tensor Tensor::constant(Shape shape, std::vector<double> values, std::string tag) {
  auto n = new_node("constant", std::move(shape), std::move(values));
  n->tag = std::move(tag);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values, std::string tag) {
  auto n = new_node("parameter", std::move(shape), std::move(values));
  n->requires_grad = true;
  n->tag = std::move(tag);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> values(tapl::numel(shape), v);
  return constant(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return constant({n, n}, std::move(v));
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item", "tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * node_->shape.at(1) + c];
}

Tensor& Tensor::set_tag(std::string tag) {
  node_->tag = std::move(tag);
  return *this;
}

Tensor Tensor::detach() const {
  auto n = new_node("detach", shape(), node_->value);
  n->inputs.push_back(*this);
  return Tensor(std::move(n));
}

Tensor Tensor::clone_leaf(bool requires_grad) const {
  auto n = new_node(requires_grad ? "parameter" : "constant", shape(), node_->value);
  n->requires_grad = requires_grad;
  n->tag = node_->tag;
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) {
  g_grad_enabled = enabled;
}

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Tensor make_node(std::string op, Shape shape, std::vector<double> value,
                 std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = new_node(std::move(op), std::move(shape), std::move(value));
  bool needs = false;
  if (g_grad_enabled && backward) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  n->requires_grad = needs;
  if (needs) n->backward = std::move(backward);
  n->inputs = std::move(inputs);
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph) {
  if (!output.defined()) throw GradError("grad: undefined output");
  if (output.numel() != 1) {
    throw GradError("grad: output must be scalar, got shape " + shape_str(output.shape()));
  }

  // Collect every node that can carry gradient back from the output.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<std::uint64_t> seen;
  if (output.requires_grad()) {
    std::vector<std::shared_ptr<Node>> stack{output.node()};
    seen.insert(output.id());
    while (!stack.empty()) {
      auto n = std::move(stack.back());
      stack.pop_back();
      if (n->backward) {
        for (const auto& in : n->inputs) {
          if (in.defined() && in.requires_grad() && seen.insert(in.id()).second) {
            stack.push_back(in.node());
          }
        }
      }
      order.push_back(std::move(n));
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });

  std::unordered_set<std::uint64_t> keep;
  for (const auto& w : wrt) {
    if (!w.defined()) throw GradError("grad: undefined wrt tensor");
    keep.insert(w.id());
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<std::uint64_t, Tensor> grads;
  if (output.requires_grad()) grads.emplace(output.id(), Tensor::ones(output.shape()));

  for (const auto& n : order) {
    auto it = grads.find(n->id);
    if (it == grads.end()) continue;
    if (!n->backward) continue;
    Tensor g = it->second;
    if (!keep.count(n->id)) grads.erase(it);
    auto in_grads = n->backward(g, Tensor(n));
    if (in_grads.size() != n->inputs.size()) {
      throw GradError("grad: backward of '" + n->op + "' returned " +
                      std::to_string(in_grads.size()) + " gradients for " +
                      std::to_string(n->inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < in_grads.size(); ++i) {
      const auto& in = n->inputs[i];
      const auto& gi = in_grads[i];
      if (!gi.defined() || !in.defined() || !in.requires_grad()) continue;
      if (gi.shape() != in.shape()) {
        throw ShapeError("grad(" + n->op + ")", gi.shape(), in.shape());
      }
      auto [slot, inserted] = grads.try_emplace(in.id(), gi);
      if (!inserted) slot->second = add(slot->second, gi);
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto it = grads.find(wrt[i].id());
    if (it == grads.end()) {
      std::string name = wrt[i].tag().empty() ? "" : " '" + wrt[i].tag() + "'";
      throw UnreachableError("grad: wrt tensor #" + std::to_string(i) + name +
                             " is not reachable from the output");
    }
    result.push_back(it->second);
  }
  return result;
}

Tensor grad(const Tensor& output, const Tensor& wrt, bool create_graph) {
  std::vector<Tensor> w{wrt};
  return grad(output, w, create_graph).front();
}

bool depends_on_tag(std::span<const Tensor> roots, std::string_view tag) {
  std::vector<const Node*> stack;
  std::unordered_set<const Node*> seen;
  for (const auto& r : roots) {
    if (r.defined() && seen.insert(r.node().get()).second) stack.push_back(r.node().get());
  }
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (n->tag == tag) return true;
    for (const auto& in : n->inputs) {
      if (in.defined() && seen.insert(in.node().get()).second) stack.push_back(in.node().get());
    }
  }
  return false;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck(const GraphBuilder& f, const std::vector<Tensor>& inputs,
                          double h, double tol) {
  GradcheckReport report;
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(in.clone_leaf(true));

  Tensor out = f(leaves);
  if (!std::isfinite(out.item())) ++report.nonfinite;
  auto analytic = grad(out, leaves, false);

  // Inputs stay trainable leaves so that f may differentiate internally.
  auto evaluate = [&](std::size_t which, std::size_t idx, double delta) {
    std::vector<Tensor> shifted = leaves;
    std::vector<double> v(leaves[which].values().begin(), leaves[which].values().end());
    v[idx] += delta;
    shifted[which] = Tensor::parameter(leaves[which].shape(), std::move(v));
    return f(shifted).item();
  };

  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t j = 0; j < leaves[i].numel(); ++j) {
      GradcheckEntry e;
      e.input = i;
      e.index = j;
      e.analytic = analytic[i][j];
      e.numeric = (evaluate(i, j, h) - evaluate(i, j, -h)) / (2.0 * h);
      e.finite = std::isfinite(e.analytic) && std::isfinite(e.numeric);
      if (e.finite) {
        e.rel_error = std::abs(e.analytic - e.numeric) / std::max(1.0, std::abs(e.numeric));
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      } else {
        ++report.nonfinite;
      }
      report.entries.push_back(e);
    }
  }
  report.passed = report.nonfinite == 0 && report.max_rel_error <= tol;
  return report;
}

}  // namespace tapl
