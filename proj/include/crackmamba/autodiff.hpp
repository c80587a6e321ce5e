#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>

#include "crackmamba/tensor.hpp"

namespace crackmamba {

/// Learnable tensor. `frozen` parameters still receive gradients; the
/// optimizer is what skips them.
template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::string name;
  bool frozen = false;
  bool pretrained_analog = false;  // subject to the early-epoch freeze window

  void init(Tensor<Scalar> v) {
    value = std::move(v);
    grad = Tensor<Scalar>(value.shape());
  }
  void zero_grad() { grad.array().setZero(); }
};

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->val(id); }
  const Shape& shape() const { return value().shape(); }
  Index dim(int i) const { return value().dim(i); }
};

/// Reverse-mode tape: a dynamically recorded computation graph. Nodes are
/// appended in execution order, so reverse node order is a valid topological
/// order for backpropagation. First-order gradients only; single-threaded
/// per tape.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  Var<Scalar> input(Tensor<Scalar> value, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr, needs_grad});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to a parameter; gradients land in `p.grad` after backward().
  /// Repeated calls with the same parameter reuse one node, so shared
  /// weights accumulate naturally.
  Var<Scalar> param(Parameter<Scalar>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back(Node{p.value, {}, {}, nullptr, &p, true});
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return {this, id};
  }

  Var<Scalar> emit(Tensor<Scalar> value, std::vector<int> parents, BackwardFn fn) {
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
    nodes_.push_back(
        Node{std::move(value), {}, std::move(parents), needs ? std::move(fn) : nullptr, nullptr, needs});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<Scalar>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Gradient buffer of a node, allocated to zeros on first touch.
  Tensor<Scalar>& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  /// Accumulates into a parent's gradient if that parent participates.
  template <typename Expr>
  void accum(int id, const Expr& g) {
    if (wants_grad(id)) grad_ref(id).array() += g;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. `root` must
  /// be a scalar (shape [1]). Parameter gradients are accumulated into the
  /// bound Parameter objects (call zero_grad on them beforehand).
  void backward(Var<Scalar> root) {
    check_arg(root.tape == this, "backward: var belongs to another tape");
    check_arg(val(root.id).size() == 1, "backward: root must be a scalar");
    if (!wants_grad(root.id)) return;
    grad_ref(root.id).array().setConstant(Scalar(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& [p, id] : param_nodes_) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.grad.empty()) p->grad.array() += n.grad.array();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter<Scalar>* bound;
    bool needs_grad;
  };

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<Scalar>*, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_same_shape(t.val(a.id), t.val(b.id), "add");
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() + t.val(b.id).array();
  return t.emit(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_ref(self).array();
    t.accum(a, g);
    t.accum(b, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_same_shape(t.val(a.id), t.val(b.id), "sub");
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() - t.val(b.id).array();
  return t.emit(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_ref(self).array();
    t.accum(a, g);
    t.accum(b, -g);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_same_shape(t.val(a.id), t.val(b.id), "mul");
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() * t.val(b.id).array();
  return t.emit(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_ref(self).array();
    t.accum(a, g * t.val(b).array());
    t.accum(b, g * t.val(a).array());
  });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_same_shape(t.val(a.id), t.val(b.id), "div");
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() / t.val(b.id).array();
  return t.emit(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape<S>& t, int self) {
    const auto& g = t.grad_ref(self).array();
    const auto& bv = t.val(b).array();
    t.accum(a, g / bv);
    t.accum(b, -g * t.val(a).array() / (bv * bv));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() * c;
  return t.emit(std::move(out), {a.id}, [a = a.id, c](Tape<S>& t, int self) {
    t.accum(a, t.grad_ref(self).array() * c);
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array() + c;
  return t.emit(std::move(out), {a.id}, [a = a.id](Tape<S>& t, int self) {
    t.accum(a, t.grad_ref(self).array());
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out({1});
  out[0] = t.val(a.id).array().sum();
  return t.emit(std::move(out), {a.id}, [a = a.id](Tape<S>& t, int self) {
    t.accum(a, t.grad_ref(self)[0]);
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  const S n = static_cast<S>(a.value().size());
  return scale(sum_all(a), S(1) / n);
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.val(a.id).shape());
  out.array() = t.val(a.id).array().max(S(0));
  return t.emit(std::move(out), {a.id}, [a = a.id](Tape<S>& t, int self) {
    t.accum(a, t.grad_ref(self).array() *
                   (t.val(a).array() > S(0)).template cast<S>());
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.val(a.id).shape());
  out.array() = S(1) / (S(1) + (-t.val(a.id).array()).exp());
  return t.emit(std::move(out), {a.id}, [a = a.id](Tape<S>& t, int self) {
    const auto& y = t.val(self).array();
    t.accum(a, t.grad_ref(self).array() * y * (S(1) - y));
  });
}

template <typename S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Tensor<S> out(t.val(a.id).shape());
  const auto sig = (S(1) / (S(1) + (-t.val(a.id).array()).exp())).eval();
  out.array() = t.val(a.id).array() * sig;
  return t.emit(std::move(out), {a.id}, [a = a.id](Tape<S>& t, int self) {
    const auto& x = t.val(a).array();
    const auto sig = (S(1) / (S(1) + (-x).exp())).eval();
    t.accum(a, t.grad_ref(self).array() * (sig + x * sig * (S(1) - sig)));
  });
}

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  Tape<S>& t = *a.tape;
  return t.emit(t.val(a.id).reshaped(std::move(shape)), {a.id}, [a = a.id](Tape<S>& t, int self) {
    t.accum(a, t.grad_ref(self).array());
  });
}

}  // namespace crackmamba
