#pragma once

// Tape-based reverse-mode differentiation over the small operation set the
// backbone needs. Values are immutable once recorded; backward walks the tape
// in reverse insertion order, which is a valid topological order because a
// node can only reference nodes recorded before it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bagnet/kernels.hpp"
#include "bagnet/tensor.hpp"

namespace bagnet {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Tape() = default;
  explicit Tape(bool check_finite) : check_finite_(check_finite) {}

  Var leaf(Tensor<T> value, bool requires_grad, std::string name = "leaf") {
    nodes_.push_back({std::move(name), std::move(value), {}, {}, requires_grad});
    return {nodes_.size() - 1};
  }

  Var record(std::string op, Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_.at(p).requires_grad;
    if (check_finite_ && !value.all_finite())
      throw NumericError("non-finite value produced by node #" + std::to_string(nodes_.size()) +
                         " (" + op + ")");
    nodes_.push_back({std::move(op), std::move(value), std::move(parents),
                      rg ? std::move(fn) : BackwardFn{}, rg});
    return {nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() root w.r.t. v; zero tensor if v was unreachable.
  Tensor<T> grad(Var v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Tensor<T>(nodes_.at(v.id).value.shape());
  }

  const Tensor<T>& grad_of(std::size_t i) const { return grads_.at(i); }

  void accumulate(std::size_t i, const Tensor<T>& g) {
    if (!nodes_[i].requires_grad) return;
    if (g.shape() != nodes_[i].value.shape())
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match node #" +
                       std::to_string(i) + " (" + nodes_[i].op + ") shape " +
                       shape_str(nodes_[i].value.shape()));
    auto& dst = grads_[i];
    if (dst.empty()) {
      dst = g;
      return;
    }
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
  }

  /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(Var root) {
    if (nodes_.at(root.id).value.size() != 1)
      throw ShapeError("backward: root must be a scalar, got " +
                       shape_str(nodes_[root.id].value.shape()));
    grads_.assign(nodes_.size(), Tensor<T>{});
    visit_order_.clear();
    if (!nodes_[root.id].requires_grad) return;
    grads_[root.id] = Tensor<T>(nodes_[root.id].value.shape(), T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      if (check_finite_ && !grads_[i].all_finite())
        throw NumericError("non-finite gradient at node #" + std::to_string(i) + " (" +
                           nodes_[i].op + ")");
      visit_order_.push_back(i);
      nodes_[i].backward(*this, i);
    }
  }

  /// Node ids whose backward closure ran during the last backward(), in call order.
  const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::vector<std::size_t> visit_order_;
  bool check_finite_ = false;
};

namespace ad {

template <class T>
Var conv2d_valid(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride = 1) {
  Tensor<T> out =
      kernels::conv2d_forward(tape.value(input), tape.value(weight), tape.value(bias), stride);
  return tape.record(
      "conv2d_valid", std::move(out), {input.id, weight.id, bias.id},
      [stride](Tape<T>& t, std::size_t self) {
        const auto& node = t.node(self);
        const auto& g = t.grad_of(self);
        const auto& x = t.node(node.parents[0]).value;
        const auto& w = t.node(node.parents[1]).value;
        if (t.node(node.parents[0]).requires_grad)
          t.accumulate(node.parents[0], kernels::conv2d_backward_input(g, w, x.shape(), stride));
        if (t.node(node.parents[1]).requires_grad)
          t.accumulate(node.parents[1], kernels::conv2d_backward_weight(g, x, w.shape(), stride));
        if (t.node(node.parents[2]).requires_grad)
          t.accumulate(node.parents[2], kernels::conv2d_backward_bias(g));
      });
}

template <class T>
Var relu(Tape<T>& tape, Var input) {
  return tape.record("relu", kernels::relu_forward(tape.value(input)), {input.id},
                     [](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       t.accumulate(node.parents[0],
                                    kernels::relu_backward(t.grad_of(self),
                                                           t.node(node.parents[0]).value));
                     });
}

template <class T>
Var spatial_gap(Tape<T>& tape, Var input) {
  return tape.record("spatial_gap", kernels::spatial_gap_forward(tape.value(input)), {input.id},
                     [](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       const auto& shape = t.node(node.parents[0]).value.shape();
                       const std::size_t n = shape[1] * shape[2];
                       const auto& g = t.grad_of(self);
                       Tensor<T> gi(shape);
                       for (std::size_t c = 0; c < shape[0]; ++c) {
                         const T share = g[c] / static_cast<T>(n);
                         for (std::size_t p = 0; p < n; ++p) gi[c * n + p] = share;
                       }
                       t.accumulate(node.parents[0], gi);
                     });
}

template <class T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  Tensor<T> out = kernels::linear_forward(tape.value(input), tape.value(weight), tape.value(bias));
  return tape.record("linear", std::move(out), {input.id, weight.id, bias.id},
                     [](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       const auto& g = t.grad_of(self);
                       const auto& x = t.node(node.parents[0]).value;
                       const auto& w = t.node(node.parents[1]).value;
                       const std::size_t k = w.dim(0), c = w.dim(1);
                       if (t.node(node.parents[0]).requires_grad) {
                         Tensor<T> gx({c});
                         for (std::size_t r = 0; r < k; ++r)
                           for (std::size_t i = 0; i < c; ++i) gx[i] += w[r * c + i] * g[r];
                         t.accumulate(node.parents[0], gx);
                       }
                       if (t.node(node.parents[1]).requires_grad) {
                         Tensor<T> gw(w.shape());
                         for (std::size_t r = 0; r < k; ++r)
                           for (std::size_t i = 0; i < c; ++i) gw[r * c + i] = g[r] * x[i];
                         t.accumulate(node.parents[1], gw);
                       }
                       t.accumulate(node.parents[2], g);
                     });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : logits.data()) mx = std::max(mx, v);
  Tensor<T> p(logits.shape());
  T z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p.data()) v /= z;
  return p;
}

/// -log softmax(logits)[label], max-subtracted.
template <class T>
T cross_entropy_value(const Tensor<T>& logits, std::size_t label) {
  if (logits.rank() != 1 || label >= logits.size())
    throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for logits " + shape_str(logits.shape()));
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : logits.data()) mx = std::max(mx, v);
  T z = 0;
  for (T v : logits.data()) z += std::exp(v - mx);
  return std::log(z) - (logits[label] - mx);
}

template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::size_t label) {
  const T loss = cross_entropy_value(tape.value(logits), label);
  return tape.record("softmax_cross_entropy", Tensor<T>({1}, {loss}), {logits.id},
                     [label](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       Tensor<T> g = softmax(t.node(node.parents[0]).value);
                       g[label] -= T(1);
                       const T up = t.grad_of(self)[0];
                       for (auto& v : g.data()) v *= up;
                       t.accumulate(node.parents[0], g);
                     });
}

/// Elementwise mean of equally shaped tensors.
template <class T>
Var mean_of(Tape<T>& tape, std::span<const Var> items) {
  if (items.empty()) throw ShapeError("mean_of: no inputs");
  const Shape shape = tape.value(items[0]).shape();
  Tensor<T> out(shape);
  std::vector<std::size_t> parents;
  for (Var v : items) {
    const auto& x = tape.value(v);
    if (x.shape() != shape)
      throw ShapeError("mean_of: shape " + shape_str(x.shape()) + " differs from " + shape_str(shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
    parents.push_back(v.id);
  }
  const T n = static_cast<T>(items.size());
  for (auto& v : out.data()) v /= n;
  return tape.record("mean_of", std::move(out), std::move(parents), [](Tape<T>& t, std::size_t self) {
    const auto& node = t.node(self);
    Tensor<T> g = t.grad_of(self);
    const T n = static_cast<T>(node.parents.size());
    for (auto& v : g.data()) v /= n;
    for (auto p : node.parents) t.accumulate(p, g);
  });
}

/// sum_i coeffs[i] * items[i] over single-element tensors.
template <class T>
Var weighted_sum(Tape<T>& tape, std::span<const Var> items, std::span<const T> coeffs) {
  if (items.size() != coeffs.size() || items.empty())
    throw ShapeError("weighted_sum: " + std::to_string(items.size()) + " items vs " +
                     std::to_string(coeffs.size()) + " coefficients");
  T s = 0;
  std::vector<std::size_t> parents;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& x = tape.value(items[i]);
    if (x.size() != 1) throw ShapeError("weighted_sum: item " + std::to_string(i) + " is not scalar");
    s += coeffs[i] * x[0];
    parents.push_back(items[i].id);
  }
  std::vector<T> c(coeffs.begin(), coeffs.end());
  return tape.record("weighted_sum", Tensor<T>({1}, {s}), std::move(parents),
                     [c](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       const T up = t.grad_of(self)[0];
                       for (std::size_t i = 0; i < node.parents.size(); ++i)
                         t.accumulate(node.parents[i], Tensor<T>({1}, {c[i] * up}));
                     });
}

template <class T>
Var sum_all(Tape<T>& tape, Var input) {
  T s = 0;
  for (T v : tape.value(input).data()) s += v;
  return tape.record("sum_all", Tensor<T>({1}, {s}), {input.id}, [](Tape<T>& t, std::size_t self) {
    const auto& node = t.node(self);
    t.accumulate(node.parents[0],
                 Tensor<T>(t.node(node.parents[0]).value.shape(), t.grad_of(self)[0]));
  });
}

/// Single element of a tensor as a [1] tensor.
template <class T>
Var select(Tape<T>& tape, Var input, std::size_t index) {
  const auto& x = tape.value(input);
  if (index >= x.size())
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  return tape.record("select", Tensor<T>({1}, {x[index]}), {input.id},
                     [index](Tape<T>& t, std::size_t self) {
                       const auto& node = t.node(self);
                       Tensor<T> g(t.node(node.parents[0]).value.shape());
                       g[index] = t.grad_of(self)[0];
                       t.accumulate(node.parents[0], g);
                     });
}

/// Smallest |x| over every relu input recorded on the tape (+inf if none).
template <class T>
T relu_margin(const Tape<T>& tape) {
  T m = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const auto& n = tape.node(i);
    if (n.op != "relu") continue;
    for (T v : tape.node(n.parents[0]).value.data()) m = std::min(m, std::abs(v));
  }
  return m;
}

}  // namespace ad
}  // namespace bagnet
