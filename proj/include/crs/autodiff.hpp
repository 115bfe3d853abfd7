#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace crs {

/// Named, ordered collection of learnable tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor init) {
    if (index_.contains(name)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("ParameterSet: no parameter '" + std::string(name) + "'");
    return it->second;
  }

  Tensor& operator[](std::size_t i) { return values_.at(i); }
  const Tensor& operator[](std::size_t i) const { return values_.at(i); }
  Tensor& get(std::string_view name) { return values_[index(name)]; }
  const Tensor& get(std::string_view name) const { return values_[index(name)]; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : values_) n += t.size();
    return n;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Gradients aligned index-for-index with a ParameterSet.
using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const ParameterSet& ps) {
  Gradients g;
  g.reserve(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) g.push_back(Tensor::zeros(ps[i].shape()));
  return g;
}

inline void accumulate(Gradients& into, const Gradients& g, double weight = 1.0) {
  if (into.size() != g.size()) throw DimensionError("accumulate: gradient registries differ in size");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (into[i].shape() != g[i].shape()) throw DimensionError("accumulate: gradient shape mismatch");
    for (std::size_t k = 0; k < g[i].size(); ++k) into[i][k] += weight * g[i][k];
  }
}

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order and the
/// backward pass walks them in exact reverse. Parameters are referenced, not
/// copied, so the ParameterSet must outlive the tape and stay unmodified until
/// backward() returns.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) {
    ops::check_finite(t, "constant");
    Node n;
    n.owned = std::move(t);
    return push(std::move(n));
  }

  Var param(const ParameterSet& ps, std::size_t index) {
    Node n;
    n.ref = &ps[index];
    n.requires_grad = true;
    n.param_set = &ps;
    n.param_index = static_cast<long>(index);
    return push(std::move(n));
  }

  Var param(const ParameterSet& ps, std::string_view name) { return param(ps, ps.index(name)); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value(); }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  // ---- ops -------------------------------------------------------------

  Var matmul(Var a, Var b) {
    return unary_or_binary(ops::matmul(val(a), val(b)), "matmul", {a, b}, [a, b](Tape& t, const Tensor& g) {
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }

  /// a + b, with b optionally a [1,n] row broadcast over a's rows.
  Var add(Var a, Var b) {
    const bool broadcast = val(a).shape() != val(b).shape();
    return unary_or_binary(ops::add(val(a), val(b)), "add", {a, b}, [a, b, broadcast](Tape& t, const Tensor& g) {
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad(b);
        if (broadcast) {
          const std::size_t n = gb.size();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }

  Var sub(Var a, Var b) {
    return unary_or_binary(ops::sub(val(a), val(b)), "sub", {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    return unary_or_binary(ops::mul(val(a), val(b)), "mul", {a, b}, [a, b](Tape& t, const Tensor& g) {
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
      }
    });
  }

  Var scale(Var a, double c) {
    return unary_or_binary(ops::scale(val(a), c), "scale", {a}, [a, c](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
  }

  Var square(Var a) {
    return unary_or_binary(ops::map(val(a), [](double v) { return v * v; }), "square", {a},
                           [a](Tape& t, const Tensor& g) {
                             const Tensor& A = t.val(a);
                             Tensor& ga = t.grad(a);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * A[i] * g[i];
                           });
  }

  Var relu(Var a) {
    return unary_or_binary(ops::relu(val(a)), "relu", {a}, [a](Tape& t, const Tensor& g) {
      const Tensor& A = t.val(a);
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A[i] > 0.0) ga[i] += g[i];
    });
  }

  Var sigmoid(Var a) {
    const std::size_t self = nodes_.size();
    return unary_or_binary(ops::sigmoid(val(a)), "sigmoid", {a}, [a, self](Tape& t, const Tensor& g) {
      const Tensor& y = t.nodes_[self].value();
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  Var tanh(Var a) {
    const std::size_t self = nodes_.size();
    return unary_or_binary(ops::tanh(val(a)), "tanh", {a}, [a, self](Tape& t, const Tensor& g) {
      const Tensor& y = t.nodes_[self].value();
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }

  /// Row-wise softmax.
  Var softmax(Var a) {
    const std::size_t self = nodes_.size();
    return unary_or_binary(ops::softmax(val(a)), "softmax", {a}, [a, self](Tape& t, const Tensor& g) {
      const Tensor& y = t.nodes_[self].value();
      Tensor& ga = t.grad(a);
      const std::size_t m = y.rows(), n = y.cols();
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }

  /// Row-wise log-softmax.
  Var log_softmax(Var a) {
    const std::size_t self = nodes_.size();
    return unary_or_binary(ops::log_softmax(val(a)), "log_softmax", {a}, [a, self](Tape& t, const Tensor& g) {
      const Tensor& y = t.nodes_[self].value();
      Tensor& ga = t.grad(a);
      const std::size_t m = y.rows(), n = y.cols();
      for (std::size_t r = 0; r < m; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
      }
    });
  }

  /// Column-wise concatenation.
  Var concat(Var a, Var b) {
    return unary_or_binary(ops::concat(val(a), val(b)), "concat", {a, b}, [a, b](Tape& t, const Tensor& g) {
      const std::size_t m = t.val(a).rows(), p = t.val(a).cols(), q = t.val(b).cols();
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
      }
      if (t.needs(b)) {
        Tensor& gb = t.grad(b);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
      }
    });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    return unary_or_binary(ops::slice_cols(val(a), begin, end), "slice_cols", {a},
                           [a, begin, end](Tape& t, const Tensor& g) {
                             Tensor& ga = t.grad(a);
                             const std::size_t m = ga.rows(), n = ga.cols(), w = end - begin;
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t j = 0; j < w; ++j) ga[r * n + begin + j] += g[r * w + j];
                           });
  }

  /// Sum of all elements -> [1,1].
  Var sum(Var a) {
    double s = 0.0;
    for (double v : val(a).values()) s += v;
    return unary_or_binary(Tensor::scalar(s), "sum", {a}, [a](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad(a);
      for (auto& v : ga.values()) v += g[0];
    });
  }

  /// Per-row sum: [m,n] -> [m,1].
  Var sum_cols(Var a) {
    const Tensor& A = val(a);
    if (A.rank() != 2) throw DimensionError("sum_cols: expected rank-2, got " + shape_str(A.shape()));
    Tensor out = Tensor::zeros({A.rows(), 1});
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (double v : A.row_span(r)) out[r] += v;
    return unary_or_binary(std::move(out), "sum_cols", {a}, [a](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad(a);
      const std::size_t n = ga.cols();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i / n];
    });
  }

  /// Adds the scalar in b ([1,1]) to every element of a.
  Var add_scalar(Var a, Var b) {
    if (val(b).size() != 1) throw DimensionError("add_scalar: expected [1,1] operand, got " + shape_str(val(b).shape()));
    Tensor out = val(a);
    const double s = val(b)[0];
    for (auto& v : out.values()) v += s;
    return unary_or_binary(std::move(out), "add_scalar", {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (t.needs(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs(b)) {
        double s = 0.0;
        for (double v : g.values()) s += v;
        t.grad(b)[0] += s;
      }
    });
  }

  /// Gradients of the scalar `loss` with respect to every parameter of `ps`
  /// that was placed on this tape; untouched parameters get zeros.
  Gradients backward(Var loss, const ParameterSet& ps) {
    if (loss.tape != this || loss.id >= nodes_.size()) throw std::invalid_argument("backward: loss is not on this tape");
    const Tensor& L = nodes_[loss.id].value();
    if (L.size() != 1) throw DimensionError("backward: loss must be scalar, got shape " + shape_str(L.shape()));
    grads_.assign(nodes_.size(), Tensor{});
    grad(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || grads_[i].size() == 0) continue;
      n.backward(*this, grads_[i]);
    }
    Gradients out = zero_gradients(ps);
    for (std::size_t i = 0; i <= loss.id; ++i) {
      const Node& n = nodes_[i];
      if (n.param_set != &ps || grads_[i].size() == 0) continue;
      Tensor& dst = out[static_cast<std::size_t>(n.param_index)];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += grads_[i][k];
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    const ParameterSet* param_set = nullptr;
    long param_index = -1;
    std::function<void(Tape&, const Tensor&)> backward;

    const Tensor& value() const { return ref ? *ref : owned; }
  };

  const Tensor& val(Var v) const {
    if (v.tape != this) throw std::invalid_argument("Tape: variable belongs to a different tape");
    return nodes_.at(v.id).value();
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  Tensor& grad(Var v) {
    Tensor& g = grads_[v.id];
    if (g.size() == 0) g = Tensor::zeros(nodes_[v.id].value().shape());
    return g;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  template <class Backward>
  Var unary_or_binary(Tensor out, const char* op, std::initializer_list<Var> parents, Backward&& bw) {
    ops::check_finite(out, op);
    Node n;
    n.owned = std::move(out);
    for (Var p : parents) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    if (n.requires_grad) n.backward = std::forward<Backward>(bw);
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

struct LstmWeights {
  Var input;      // [in, 4H]
  Var recurrent;  // [H, 4H]
  Var bias;       // [1, 4H]
};

/// Standard LSTM cell, gate order (input, forget, candidate, output):
///   c' = f*c + i*g,  h' = o*tanh(c').
inline std::pair<Var, Var> lstm_cell(Tape& t, Var x, Var h, Var c, const LstmWeights& w) {
  const std::size_t hidden = h.shape()[1];
  if (w.recurrent.shape()[1] != 4 * hidden || w.input.shape()[1] != 4 * hidden)
    throw DimensionError("lstm_cell: weight width must be 4*hidden (" + std::to_string(4 * hidden) + "), got input " +
                         shape_str(w.input.shape()) + ", recurrent " + shape_str(w.recurrent.shape()));
  Var gates = t.add(t.add(t.matmul(x, w.input), t.matmul(h, w.recurrent)), w.bias);
  Var i = t.sigmoid(t.slice_cols(gates, 0, hidden));
  Var f = t.sigmoid(t.slice_cols(gates, hidden, 2 * hidden));
  Var g = t.tanh(t.slice_cols(gates, 2 * hidden, 3 * hidden));
  Var o = t.sigmoid(t.slice_cols(gates, 3 * hidden, 4 * hidden));
  Var c_next = t.add(t.mul(f, c), t.mul(i, g));
  Var h_next = t.mul(o, t.tanh(c_next));
  return {h_next, c_next};
}

/// Tape-free LSTM step over plain tensors (same equations as lstm_cell).
inline std::pair<Tensor, Tensor> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w_input,
                                           const Tensor& w_recurrent, const Tensor& bias) {
  const std::size_t hidden = h.cols();
  Tensor gates = ops::add(ops::add(ops::matmul(x, w_input), ops::matmul(h, w_recurrent)), bias);
  Tensor h_next = Tensor::zeros(h.shape());
  Tensor c_next = Tensor::zeros(c.shape());
  const std::size_t width = 4 * hidden;
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const double* gr = &gates[r * width];
    for (std::size_t j = 0; j < hidden; ++j) {
      const double i = ops::sigmoid_scalar(gr[j]);
      const double f = ops::sigmoid_scalar(gr[hidden + j]);
      const double g = std::tanh(gr[2 * hidden + j]);
      const double o = ops::sigmoid_scalar(gr[3 * hidden + j]);
      const double cn = f * c[r * hidden + j] + i * g;
      c_next[r * hidden + j] = cn;
      h_next[r * hidden + j] = o * std::tanh(cn);
    }
  }
  return {h_next, c_next};
}

}  // namespace crs
