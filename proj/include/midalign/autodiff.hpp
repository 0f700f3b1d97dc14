#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tape owns every intermediate value produced while evaluating an
// expression. Each recorded node keeps its value, a lazily allocated gradient
// and a closure that pushes the node's gradient into its inputs. Nodes are
// appended in evaluation order, so a reverse sweep is a valid topological
// order. Everything is templated on the scalar so the same model code runs in
// 32-bit for training and in 64-bit for finite-difference checks.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "midalign/errors.hpp"

namespace midalign::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using NamedArrays = std::map<std::string, Matrix<Scalar>>;

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Owned constant; never receives a gradient.
  Var<Scalar> constant(Mat value) {
    Node node;
    node.op = "constant";
    node.value = std::move(value);
    return push(std::move(node));
  }

  /// Frozen array owned elsewhere. `value` must outlive the tape.
  Var<Scalar> reference(const Mat& value) {
    Node node;
    node.op = "reference";
    node.external = &value;
    return push(std::move(node));
  }

  /// Trainable leaf owned elsewhere. backward() adds its gradient into `grad_sink`.
  Var<Scalar> parameter(const Mat& value, Mat* grad_sink) {
    Node node;
    node.op = "parameter";
    node.external = &value;
    node.requires_grad = true;
    node.sink = grad_sink;
    return push(std::move(node));
  }

  /// Records the result of a primitive. The backward closure is dropped when
  /// no input requires a gradient.
  Var<Scalar> record(const char* op, Mat value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (const auto& in : inputs) node.requires_grad = node.requires_grad || in.requires_grad();
    if (node.requires_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  const Mat& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node, zero-initialised on first use.
  Mat& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const Mat& v = value(id);
      n.grad = Mat::Zero(v.rows(), v.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Adds `e` into the gradient of a node; the first contribution is
  /// assigned directly instead of being added to a zero array.
  template <typename Expr>
  void accumulate(std::size_t id, const Expr& e) {
    Node& n = nodes_[id];
    if (n.has_grad) {
      n.grad.noalias() += e;
    } else {
      n.grad.noalias() = e;
      n.has_grad = true;
    }
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Gradients of
  /// parameter leaves are added into their sinks.
  void backward(Var<Scalar> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw InputError("backward() expects a scalar loss");
    }
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw NumericError("non-finite loss; first non-finite value produced by '" +
                         first_non_finite(loss.id()) + "'");
    }
    if (!loss.requires_grad()) return;
    grad(loss.id()).setConstant(Scalar(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      if (n.backward) {
        // The closure may allocate gradients of earlier nodes; `n` stays valid
        // because no node is appended during the sweep.
        n.backward(*this, n.grad);
      }
      if (n.sink) *n.sink += n.grad;
    }
  }

 private:
  struct Node {
    const char* op = "";
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Mat* sink = nullptr;
  };

  Var<Scalar> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::string first_non_finite(std::size_t last) const {
    for (std::size_t i = 0; i <= last; ++i) {
      if (!value(i).allFinite()) {
        return std::string(nodes_[i].op) + "' (node " + std::to_string(i) + ")";
      }
    }
    return "unknown";
  }

  std::vector<Node> nodes_;
};

/// Value and gradient of a scalar function of named arrays. `loss_fn` receives
/// the tape and one trainable Var per array and returns the scalar loss.
template <typename Scalar, typename LossFn>
std::pair<Scalar, NamedArrays<Scalar>> value_and_grad(LossFn&& loss_fn,
                                                       const NamedArrays<Scalar>& params) {
  NamedArrays<Scalar> grads;
  for (const auto& [name, array] : params) {
    grads[name] = Matrix<Scalar>::Zero(array.rows(), array.cols());
  }
  Tape<Scalar> tape;
  std::map<std::string, Var<Scalar>> vars;
  for (const auto& [name, array] : params) vars[name] = tape.parameter(array, &grads[name]);
  Var<Scalar> loss = loss_fn(tape, vars);
  tape.backward(loss);
  return {loss.item(), std::move(grads)};
}

template <typename Scalar, typename LossFn>
NamedArrays<Scalar> gradient(LossFn&& loss_fn, const NamedArrays<Scalar>& params) {
  return value_and_grad<Scalar>(std::forward<LossFn>(loss_fn), params).second;
}

}  // namespace midalign::ad
