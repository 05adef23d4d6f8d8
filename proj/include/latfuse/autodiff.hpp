#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "latfuse/tensor.hpp"

namespace latfuse {

/// Handle to a node on a Tape. Cheap to copy; only meaningful together with
/// the tape that produced it.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run gradient tape. Each executed op appends one node holding the
/// forward value and a closure that pushes the node's gradient into its
/// inputs. Nodes are created in topological order, so one reverse sweep over
/// the node list visits every node exactly once.
///
/// A tape is rebuilt per forward pass and confined to a single thread.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  Var leaf(Tensor<S> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }

  /// Leaf using the tensor's own requires_grad flag.
  Var leaf(Tensor<S> value) {
    const bool rg = value.requires_grad;
    return push(std::move(value), rg, nullptr);
  }

  Var constant(Tensor<S> value) { return push(std::move(value), false, nullptr); }

  Var push(Tensor<S> value, bool requires_grad, BackwardFn fn) {
#ifndef NDEBUG
    if (!value.all_finite()) throw ContractError("tape: op produced a non-finite value");
#endif
    nodes_.push_back(Node{std::move(value), Tensor<S>{}, std::move(fn), requires_grad});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Tensor<S>& value(Var v) const { return node(v).value; }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Gradients of all requires_grad
  /// leaves are available through grad() afterwards.
  void backward(Var output) {
    Node& out = node(output);
    if (out.value.numel() != 1)
      throw ContractError("backward: output must be scalar, got shape " +
                          out.value.shape_string());
    for (auto& n : nodes_) n.grad = Tensor<S>{};
    grad_buffer(output).data[0] = S(1);
    for (std::int32_t id = output.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backward && !n.grad.data.empty()) n.backward(*this, Var{id});
    }
  }

  /// Gradient of v from the last backward() call (zeros if v does not
  /// influence the output).
  const Tensor<S>& grad(Var v) { return grad_buffer(v); }

  /// Mutable gradient accumulator, allocated to zeros on first use. Backward
  /// closures add into the buffers of their input nodes.
  Tensor<S>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.data.empty()) n.grad = Tensor<S>::zeros(n.value.shape);
    return n.grad;
  }

  void accumulate(Var v, const Tensor<S>& g) {
    Tensor<S>& buf = grad_buffer(v);
    detail::require_same_shape(buf, g, "accumulate");
    for (std::size_t i = 0; i < g.numel(); ++i) buf.data[i] += g.data[i];
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    BackwardFn backward;
    bool requires_grad;
  };

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("tape: invalid var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Forward values come from the plain tensor functions;
// each op attaches the matching vector-Jacobian closure.
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  Tensor<S> out = matmul(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, b](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    if (tt.requires_grad(a)) tt.accumulate(a, matmul(go, transpose(tt.value(b))));
    if (tt.requires_grad(b)) tt.accumulate(b, matmul(transpose(tt.value(a)), go));
  });
}

template <typename S>
Var transpose(Tape<S>& t, Var a) {
  Tensor<S> out = transpose(t.value(a));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a](Tape<S>& tt, Var self) {
    tt.accumulate(a, transpose(tt.grad_buffer(self)));
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  Tensor<S> out = add(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, b](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    if (tt.requires_grad(a)) tt.accumulate(a, go);
    if (tt.requires_grad(b)) tt.accumulate(b, go);
  });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  Tensor<S> out = mul(t.value(a), t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, b](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    if (tt.requires_grad(a)) tt.accumulate(a, mul(go, tt.value(b)));
    if (tt.requires_grad(b)) tt.accumulate(b, mul(go, tt.value(a)));
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S s) {
  Tensor<S> out = scale(t.value(a), s);
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, s](Tape<S>& tt, Var self) {
    tt.accumulate(a, scale(tt.grad_buffer(self), s));
  });
}

template <typename S>
Var add_bias_rows(Tape<S>& t, Var x, Var b) {
  Tensor<S> out = add_bias_rows(t.value(x), t.value(b));
  const bool rg = t.requires_grad(x) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [x, b](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    if (tt.requires_grad(x)) tt.accumulate(x, go);
    if (tt.requires_grad(b)) {
      Tensor<S>& gb = tt.grad_buffer(b);
      for (std::size_t r = 0; r < go.rows(); ++r)
        for (std::size_t c = 0; c < go.cols(); ++c) gb.data[c] += go.at(r, c);
    }
  });
}

/// Fully connected layer x.w + b, composed from matmul and the bias
/// broadcast so it is exactly their composition.
template <typename S>
Var linear(Tape<S>& t, Var x, Var w, Var b) {
  return add_bias_rows(t, matmul(t, x, w), b);
}

template <typename S>
Var sigmoid(Tape<S>& t, Var a) {
  Tensor<S> out = sigmoid(t.value(a));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const Tensor<S>& y = tt.value(self);
    Tensor<S> g(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      g.data[i] = go.data[i] * y.data[i] * (S(1) - y.data[i]);
    tt.accumulate(a, g);
  });
}

template <typename S>
Var tanh(Tape<S>& t, Var a) {
  Tensor<S> out = tanh(t.value(a));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const Tensor<S>& y = tt.value(self);
    Tensor<S> g(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i)
      g.data[i] = go.data[i] * (S(1) - y.data[i] * y.data[i]);
    tt.accumulate(a, g);
  });
}

template <typename S>
Var relu(Tape<S>& t, Var a) {
  Tensor<S> out = relu(t.value(a));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const Tensor<S>& x = tt.value(a);
    Tensor<S> g(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) g.data[i] = x.data[i] > S(0) ? go.data[i] : S(0);
    tt.accumulate(a, g);
  });
}

template <typename S>
Var softmax(Tape<S>& t, Var a, std::size_t axis) {
  Tensor<S> out = softmax(t.value(a), axis);
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, axis](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const Tensor<S>& y = tt.value(self);
    // dx = y * (dy - sum_k dy_k y_k) per slice
    const std::size_t len = y.shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= y.shape[i];
    for (std::size_t i = axis + 1; i < y.ndim(); ++i) inner *= y.shape[i];
    Tensor<S> g(y.shape);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        S acc = S(0);
        for (std::size_t k = 0; k < len; ++k)
          acc += go.data[base + k * inner] * y.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t p = base + k * inner;
          g.data[p] = y.data[p] * (go.data[p] - acc);
        }
      }
    }
    tt.accumulate(a, g);
  });
}

template <typename S>
Var gather_rows(Tape<S>& t, Var x, std::vector<std::size_t> idx) {
  Tensor<S> out = gather_rows(t.value(x), idx);
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  const std::size_t n_rows = t.value(x).rows();
  return t.push(std::move(out), true, [x, idx = std::move(idx), n_rows](Tape<S>& tt, Var self) {
    tt.accumulate(x, scatter_add_rows(tt.grad_buffer(self), idx, n_rows));
  });
}

template <typename S>
Var scatter_add_rows(Tape<S>& t, Var x, std::vector<std::size_t> idx, std::size_t out_rows) {
  Tensor<S> out = scatter_add_rows(t.value(x), idx, out_rows);
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [x, idx = std::move(idx)](Tape<S>& tt, Var self) {
    tt.accumulate(x, gather_rows(tt.grad_buffer(self), idx));
  });
}

template <typename S>
Var concat_rows(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& ta = t.value(a);
  const Tensor<S>& tb = t.value(b);
  ta.require_ndim(2);
  tb.require_ndim(2);
  if (ta.cols() != tb.cols())
    throw ShapeError("concat_rows: column mismatch " + ta.shape_string() + " vs " +
                     tb.shape_string());
  Tensor<S> out({ta.rows() + tb.rows(), ta.cols()});
  std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
  std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.numel());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  if (!rg) return t.push(std::move(out), false, nullptr);
  const std::size_t split = ta.rows();
  return t.push(std::move(out), true, [a, b, split](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const std::size_t c = go.cols();
    if (tt.requires_grad(a)) {
      Tensor<S>& ga = tt.grad_buffer(a);
      for (std::size_t i = 0; i < split * c; ++i) ga.data[i] += go.data[i];
    }
    if (tt.requires_grad(b)) {
      Tensor<S>& gb = tt.grad_buffer(b);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += go.data[split * c + i];
    }
  });
}

template <typename S>
Var row_norm(Tape<S>& t, Var x, S eps) {
  Tensor<S> out = row_norm(t.value(x), eps);
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [x, eps](Tape<S>& tt, Var self) {
    const Tensor<S>& go = tt.grad_buffer(self);
    const Tensor<S>& xin = tt.value(x);
    const Tensor<S>& y = tt.value(self);
    const std::size_t c = xin.cols();
    Tensor<S> g(xin.shape);
    for (std::size_t r = 0; r < xin.rows(); ++r) {
      S mean = S(0), var = S(0);
      for (std::size_t j = 0; j < c; ++j) mean += xin.at(r, j);
      mean /= static_cast<S>(c);
      for (std::size_t j = 0; j < c; ++j) {
        const S d = xin.at(r, j) - mean;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S inv_std = S(1) / std::sqrt(var + eps);
      S mean_dy = S(0), mean_dy_y = S(0);
      for (std::size_t j = 0; j < c; ++j) {
        mean_dy += go.at(r, j);
        mean_dy_y += go.at(r, j) * y.at(r, j);
      }
      mean_dy /= static_cast<S>(c);
      mean_dy_y /= static_cast<S>(c);
      for (std::size_t j = 0; j < c; ++j)
        g.at(r, j) = inv_std * (go.at(r, j) - mean_dy - y.at(r, j) * mean_dy_y);
    }
    tt.accumulate(x, g);
  });
}

template <typename S>
Var sum(Tape<S>& t, Var x) {
  Tensor<S> out = sum(t.value(x));
  if (!t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [x](Tape<S>& tt, Var self) {
    const S go = tt.grad_buffer(self).data[0];
    Tensor<S>& gx = tt.grad_buffer(x);
    for (auto& v : gx.data) v += go;
  });
}

// ---------------------------------------------------------------------------
// Parameter packs. Parameter structs are templates over their element type
// (Tensor<S> for storage, Var once lifted onto a tape) and expose visit/make
// over their members in a fixed order.
// ---------------------------------------------------------------------------

template <template <typename> class P, typename S>
P<Var> lift(Tape<S>& tape, const P<Tensor<S>>& params, bool requires_grad) {
  std::vector<Var> vars;
  params.visit([&](const Tensor<S>& t) { vars.push_back(tape.leaf(t, requires_grad)); });
  std::size_t i = 0;
  return P<Var>::make([&]() { return vars[i++]; });
}

template <template <typename> class P, typename S>
std::vector<Tensor<S>> collect(const P<Tensor<S>>& params) {
  std::vector<Tensor<S>> out;
  params.visit([&](const Tensor<S>& t) { out.push_back(t); });
  return out;
}

/// Rebuild a parameter pack of Vars from a flat leaf list, consuming from
/// `cursor` in visit order.
template <template <typename> class P>
P<Var> pack_vars(const std::vector<Var>& leaves, std::size_t& cursor) {
  return P<Var>::make([&]() { return leaves[cursor++]; });
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Central-difference check of a scalar-valued graph builder. `fn` receives a
/// fresh tape and one leaf per input tensor (same order) and returns the
/// scalar output Var. Returns max over all input coordinates of
/// |analytic - numeric| / max(1, |numeric|).
template <typename S, typename Fn>
S finite_diff_check(Fn&& fn, std::vector<Tensor<S>> inputs, S eps) {
  std::vector<Tensor<S>> analytic;
  {
    Tape<S> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var out = fn(tape, leaves);
    if (tape.value(out).numel() != 1)
      throw ContractError("finite_diff_check: fn must produce a scalar");
    tape.backward(out);
    for (Var v : leaves) analytic.push_back(tape.grad(v));
  }

  auto eval = [&]() -> S {
    Tape<S> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
    return tape.value(fn(tape, leaves)).data[0];
  };

  S max_err = S(0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const S saved = inputs[i].data[j];
      inputs[i].data[j] = saved + eps;
      const S f_plus = eval();
      inputs[i].data[j] = saved - eps;
      const S f_minus = eval();
      inputs[i].data[j] = saved;
      const S numeric = (f_plus - f_minus) / (S(2) * eps);
      const S err = std::abs(analytic[i].data[j] - numeric) / std::max(S(1), std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace latfuse
