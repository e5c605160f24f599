#pragma once

// Dense f64 tensors with a reverse-mode gradient tape.
//
// Every op records its parents and a local backward closure when any input
// requires grad. backward() walks the recorded graph in reverse topological
// order. Leaf gradients accumulate across calls; callers zero them explicitly
// (zero_grad) between steps. Intermediate gradients are reset at the start of
// every backward pass, so calling backward twice on the same root doubles the
// leaf gradients and nothing else.
//
// Rank 0, 1 and 2 tensors are supported. There is no general broadcasting:
// the only implicit expansions are add_bias (row vector over a matrix),
// scale (scalar tensor over anything) and scale_rows (per-row factor).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace momoe {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return checked().data.size(); }

  // Row/column view used by the matrix ops: a rank-1 tensor is one row.
  std::size_t rows() const {
    const auto& s = shape();
    return s.size() == 2 ? s[0] : 1;
  }
  std::size_t cols() const {
    const auto& s = shape();
    if (s.size() == 2) return s[1];
    if (s.size() == 1) return s[0];
    return 1;
  }

  std::span<const double> data() const { return checked().data; }
  std::vector<double> values() const { return checked().data; }

  // In-place access for optimizers and initializers. Only leaves may be
  // mutated; interior values are owned by the recorded graph.
  std::span<double> mutable_data() {
    auto& n = checked();
    if (!n.is_leaf()) throw ContractError("tensor: cannot mutate the result of a recorded op");
    return n.data;
  }

  double item() const {
    if (size() != 1) throw ContractError("tensor: item() on a tensor of shape " + shape_str(shape()));
    return checked().data[0];
  }

  double operator[](std::size_t i) const { return checked().data.at(i); }
  double at(std::size_t r, std::size_t c) const { return checked().data.at(r * cols() + c); }

  bool requires_grad() const { return checked().requires_grad; }

  void set_requires_grad(bool on) {
    auto& n = checked();
    if (!n.is_leaf()) throw ContractError("tensor: requires_grad can only be set on leaves");
    n.requires_grad = on;
  }

  bool has_grad() const { return checked().grad.size() == size() && size() > 0; }

  std::span<const double> grad() const {
    const auto& n = checked();
    if (n.grad.size() != n.data.size()) throw ContractError("tensor: no gradient has been populated");
    return n.grad;
  }

  void zero_grad() {
    auto& n = checked();
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

  void clear_grad() { checked().grad.clear(); }

  Tensor detach() const { return Tensor(shape(), values(), false); }

  bool is_leaf() const { return checked().is_leaf(); }
  const char* op() const { return checked().op; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  detail::Node& checked() const {
    if (!node_) throw ContractError("tensor: use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(const Tensor& t, const char* op) {
  if (!all_finite(t.data())) {
    throw NonFiniteError(std::string(op) + ": non-finite input");
  }
}

inline Tensor record(Shape shape, std::vector<double> data, const char* op,
                     std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient buffer of parent i, or nullptr when that parent is not on the tape.
inline double* parent_grad(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  require_finite(a, op);
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return record(a.shape(), std::move(out), op, {a}, [deriv](Node& self) {
    double* ga = parent_grad(self, 0);
    if (!ga) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.data[i]);
  });
}

}  // namespace detail

/// Reverse-topological record of the ops reachable from a root. Each node
/// appears after all of its parents.
struct Graph {
  std::vector<std::shared_ptr<detail::Node>> nodes;

  static Graph trace(const Tensor& root) {
    Graph g;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto parent = node->parents[next++];
        if (parent->requires_grad && seen.insert(parent.get()).second) {
          stack.emplace_back(std::move(parent), 0);
        }
        continue;
      }
      g.nodes.push_back(node);
      stack.pop_back();
    }
    return g;
  }
};

inline void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward: root must be a scalar, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) {
    throw ContractError("backward: root was not produced from tensors that require grad");
  }
  Graph g = Graph::trace(root);
  for (auto& n : g.nodes) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    auto& n = **it;
    if (!n.is_leaf() && n.backward) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  detail::require_finite(a, "matmul");
  detail::require_finite(b, "matmul");
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* bl = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
  return detail::record({m, n}, std::move(c), "matmul", {a, b}, [m, k, n](detail::Node& self) {
    const double* gc = self.grad.data();
    const double* pa = self.parents[0]->data.data();
    const double* pb = self.parents[1]->data.data();
    if (double* ga = detail::parent_grad(self, 0)) {
      // dA = dC · Bᵀ
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double* bl = pb + l * n;
          const double* gi = gc + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bl[j];
          ga[i * k + l] += acc;
        }
      }
    }
    if (double* gb = detail::parent_grad(self, 1)) {
      // dB = Aᵀ · dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = gc + i * n;
        for (std::size_t l = 0; l < k; ++l) {
          const double av = pa[i * k + l];
          double* bl = gb + l * n;
          for (std::size_t j = 0; j < n; ++j) bl[j] += av * gi[j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return detail::record({n, m}, std::move(out), "transpose", {a}, [m, n](detail::Node& self) {
    double* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return detail::record(std::move(shape), a.values(), "reshape", {a}, [](detail::Node& self) {
    double* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes only)

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  detail::require_finite(a, "add");
  detail::require_finite(b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::record(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = detail::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  detail::require_finite(a, "sub");
  detail::require_finite(b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::record(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  detail::require_finite(a, "mul");
  detail::require_finite(b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::record(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "divide");
  detail::require_finite(a, "divide");
  detail::require_finite(b, "divide");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (y[i] == 0.0) throw NonFiniteError("divide: division by zero");
    out[i] = x[i] / y[i];
  }
  return detail::record(a.shape(), std::move(out), "divide", {a, b}, [](detail::Node& self) {
    const auto& y = self.parents[1]->data;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / y[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i] * self.data[i] / y[i];
  });
}

// Matrix plus a row vector repeated over rows; a rank-1 input is one row.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || bias.size() != a.cols() || a.rank() == 0) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(a.shape()));
  }
  detail::require_finite(a, "add_bias");
  detail::require_finite(bias, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data(), b = bias.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return detail::record(a.shape(), std::move(out), "add_bias", {a, bias}, [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

// Multiply every entry by a scalar tensor (which may itself be learnable).
inline Tensor scale(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale: factor must be a scalar, got " + shape_str(s.shape()));
  detail::require_finite(a, "scale");
  detail::require_finite(s, "scale");
  const double f = s.item();
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * x[i];
  return detail::record(a.shape(), std::move(out), "scale", {a, s}, [](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const double f = self.parents[1]->data[0];
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * f;
    if (double* g = detail::parent_grad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x[i];
      g[0] += acc;
    }
  });
}

inline Tensor scale(const Tensor& a, double f) {
  detail::require_finite(a, "scale");
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * x[i];
  return detail::record(a.shape(), std::move(out), "scale", {a}, [f](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * f;
  });
}

// Row i of a is multiplied by w[i]. A rank-1 `a` is a single row.
inline Tensor scale_rows(const Tensor& a, const Tensor& w) {
  if (w.size() != a.rows() || w.rank() > 1) {
    throw DimensionError("scale_rows: " + shape_str(w.shape()) + " factors for " +
                         shape_str(a.shape()));
  }
  detail::require_finite(a, "scale_rows");
  detail::require_finite(w, "scale_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data(), f = w.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = f[i] * x[i * n + j];
  return detail::record(a.shape(), std::move(out), "scale_rows", {a, w}, [m, n](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const auto& f = self.parents[1]->data;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * f[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += self.grad[i * n + j] * x[i * n + j];
        g[i] += acc;
      }
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(a, "add_scalar", [c](double x) { return x + c; },
                       [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(a, "square", [](double x) { return x * x; },
                       [](double x, double) { return 2.0 * x; });
}

// The derivative at 0 is taken as 0 rather than +inf.
inline Tensor sqrt(const Tensor& a) {
  for (double v : a.data())
    if (v < 0.0) throw NonFiniteError("sqrt: negative input");
  return detail::unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, "sigmoid",
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, "softplus", [](double x) { return softplus_value(x); },
      [](double x, double) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

// (e^z - 1) / z, continuous at z = 0 where it equals 1.
inline double expm1_over_value(double z) {
  if (std::abs(z) < 1e-5) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

inline double expm1_over_derivative(double z) {
  if (std::abs(z) < 1e-5) return 0.5 + z / 3.0 + z * z / 8.0;
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

inline Tensor expm1_over(const Tensor& a) {
  return detail::unary(a, "expm1_over", expm1_over_value,
                       [](double x, double) { return expm1_over_derivative(x); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  detail::require_finite(a, "sum");
  const auto x = a.data();
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  return detail::record({}, {s}, "sum", {a}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Euclidean norm of all entries. The subgradient at 0 is taken as 0.
inline Tensor norm(const Tensor& a) {
  detail::require_finite(a, "norm");
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return detail::record({}, {std::sqrt(s)}, "norm", {a}, [](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    const double r = self.data[0];
    if (!g || r == 0.0) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[0] * x[i] / r;
  });
}

// Per-row Euclidean norms of a matrix (a rank-1 input is one row).
inline Tensor row_norms(const Tensor& a) {
  detail::require_finite(a, "row_norms");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    out[i] = std::sqrt(s);
  }
  return detail::record({m}, std::move(out), "row_norms", {a}, [m, n](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < m; ++i) {
      const double r = self.data[i];
      if (r == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i] * x[i * n + j] / r;
    }
  });
}

// Parameter-free RMS normalization of each row: x / sqrt(mean(x^2) + eps).
inline Tensor rms_norm_rows(const Tensor& a, double eps = 1e-6) {
  detail::require_finite(a, "rms_norm_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.size()), inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    inv[i] = 1.0 / std::sqrt(s / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv[i];
  }
  return detail::record(a.shape(), std::move(out), "rms_norm_rows", {a},
                        [inv = std::move(inv), m, n](detail::Node& self) {
                          double* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < m; ++i) {
                            const double* y = self.data.data() + i * n;
                            const double* dy = self.grad.data() + i * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                            dot /= static_cast<double>(n);
                            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (dy[j] - y[j] * dot) * inv[i];
                          }
                        });
}

// Single entry of a tensor, as a scalar.
inline Tensor element(const Tensor& a, std::size_t index) {
  if (index >= a.size()) throw DimensionError("element: index out of range");
  return detail::record({}, {a.data()[index]}, "element", {a}, [index](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) g[index] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Softmax and TopK masking. These are the only ops that accept -inf.

namespace detail {

inline void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (std::isnan(in[j]) || in[j] == std::numeric_limits<double>::infinity()) {
      throw NonFiniteError("softmax: entries must be finite or -inf");
    }
    mx = std::max(mx, in[j]);
  }
  if (mx == -std::numeric_limits<double>::infinity()) {
    throw DegenerateInputError("softmax: every entry is -inf");
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = in[j] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

}  // namespace detail

// Softmax over the last dimension (each row of a matrix independently).
inline Tensor softmax(const Tensor& v) {
  if (v.rank() == 0) throw DimensionError("softmax: needs a vector or matrix");
  const std::size_t m = v.rows(), n = v.cols();
  std::vector<double> out(v.size());
  const double* in = v.data().data();
  for (std::size_t i = 0; i < m; ++i) detail::softmax_row(in + i * n, out.data() + i * n, n);
  return detail::record(v.shape(), std::move(out), "softmax", {v}, [m, n](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

// Indices of the k largest entries of one row, ties resolved toward the
// lower index. Returned in ascending index order.
inline std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// Keeps the k largest entries of each row and sets the rest to -inf. The
// selection is piecewise constant; gradients pass through the kept entries.
inline Tensor topk_mask(const Tensor& g, std::size_t k) {
  if (g.rank() == 0) throw DimensionError("topk_mask: needs a vector or matrix");
  const std::size_t m = g.rows(), n = g.cols();
  if (k < 1 || k > n) {
    throw ContractError("topk_mask: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  detail::require_finite(g, "topk_mask");
  const auto in = g.data();
  std::vector<double> out(in.size(), -std::numeric_limits<double>::infinity());
  std::vector<char> keep(in.size(), 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j : topk_indices(in.subspan(i * n, n), k)) {
      out[i * n + j] = in[i * n + j];
      keep[i * n + j] = 1;
    }
  }
  return detail::record(g.shape(), std::move(out), "topk_mask", {g},
                        [keep = std::move(keep)](detail::Node& self) {
                          double* ga = detail::parent_grad(self, 0);
                          if (!ga) return;
                          for (std::size_t i = 0; i < keep.size(); ++i)
                            if (keep[i]) ga[i] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Row gather / scatter used for sparse expert dispatch and embeddings.

inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  for (auto r : index)
    if (r >= m) throw DimensionError("gather_rows: row index out of range");
  const auto x = a.data();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(index[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  const std::size_t len = index.size();
  return detail::record({len, n}, std::move(out), "gather_rows", {a},
                        [index = std::move(index), n](detail::Node& self) {
                          double* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < index.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) g[index[i] * n + j] += self.grad[i * n + j];
                        });
}

// out[index[i]] += a[i] into a zero matrix with `rows` rows.
inline Tensor scatter_rows(const Tensor& a, std::vector<std::size_t> index, std::size_t rows) {
  detail::require_rank2(a, "scatter_rows");
  if (index.size() != a.shape()[0]) throw DimensionError("scatter_rows: index length mismatch");
  for (auto r : index)
    if (r >= rows) throw DimensionError("scatter_rows: row index out of range");
  detail::require_finite(a, "scatter_rows");
  const std::size_t n = a.shape()[1];
  const auto x = a.data();
  std::vector<double> out(rows * n, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[index[i] * n + j] += x[i * n + j];
  return detail::record({rows, n}, std::move(out), "scatter_rows", {a},
                        [index = std::move(index), n](detail::Node& self) {
                          double* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < index.size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[index[i] * n + j];
                        });
}

// Entries a[rows[i], col] as a vector.
inline Tensor gather_column(const Tensor& a, std::vector<std::size_t> rows, std::size_t col) {
  detail::require_rank2(a, "gather_column");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (col >= n) throw DimensionError("gather_column: column out of range");
  for (auto r : rows)
    if (r >= m) throw DimensionError("gather_column: row index out of range");
  const auto x = a.data();
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = x[rows[i] * n + col];
  const std::size_t len = rows.size();
  return detail::record({len}, std::move(out), "gather_column", {a},
                        [rows = std::move(rows), col, n](detail::Node& self) {
                          double* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < rows.size(); ++i) g[rows[i] * n + col] += self.grad[i];
                        });
}

// Mean next-token cross-entropy over rows of a logit matrix (natural log).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
  detail::require_finite(logits, "cross_entropy");
  const auto x = logits.data();
  std::vector<double> prob(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw DimensionError("cross_entropy: target out of range");
    detail::softmax_row(x.data() + i * n, prob.data() + i * n, n);
    double mx = x[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[i * n + j] - mx);
    loss += (mx + std::log(z)) - x[i * n + targets[i]];
  }
  loss /= static_cast<double>(m);
  return detail::record({}, {loss}, "cross_entropy", {logits},
                        [prob = std::move(prob), targets, m, n](detail::Node& self) {
                          double* g = detail::parent_grad(self, 0);
                          if (!g) return;
                          const double s = self.grad[0] / static_cast<double>(m);
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              g[i * n + j] += s * (prob[i * n + j] - (j == targets[i] ? 1.0 : 0.0));
                        });
}

// ---------------------------------------------------------------------------
// Seeded initialization. All draws come from one std::mt19937_64 in call order.

using Rng = std::mt19937_64;

inline Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace momoe
