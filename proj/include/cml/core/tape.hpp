#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cml/core/errors.hpp"
#include "cml/core/tensor.hpp"

namespace cml::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Backward rule: given the upstream gradient (same shape as the node's value)
// and a mask of which inputs need a gradient, return one gradient per input.
// Rules are written in terms of recorded ops, so running them while the tape
// is recording produces a differentiable gradient graph.
using BackwardFn =
    std::function<std::vector<std::optional<Var>>(const Var& grad_out, const std::vector<bool>& need)>;

struct Node {
  Tensor value;
  std::vector<std::size_t> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// node ids are a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, "leaf"});
    return {this, nodes_.size() - 1};
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. The backward rule is kept only when some input
  // requires a gradient and the tape is recording.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.inputs.reserve(inputs.size());
    bool any = false;
    for (const auto& v : inputs) {
      if (v.tape != this) throw ContractError(std::string(op) + ": input from a different tape");
      n.inputs.push_back(v.id);
      any = any || nodes_[v.id].requires_grad;
    }
    n.requires_grad = any && recording_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool recording() const noexcept { return recording_; }

  // Suspends gradient recording for its lifetime.
  class NoGrad {
   public:
    explicit NoGrad(Tape& t) : tape_(t), prev_(t.recording_) { t.recording_ = false; }
    ~NoGrad() { tape_.recording_ = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  // d loss / d wrt[j] for each j. Unreachable inputs get a zero tensor.
  // With create_graph the returned gradients are themselves differentiable.
  std::vector<Var> gradients(Var loss, std::span<const Var> wrt, bool create_graph = false) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    if (!nodes_[loss.id].value.is_scalar()) {
      throw ContractError("backward: loss must be scalar, got " + nodes_[loss.id].value.shape());
    }
    const std::size_t end = loss.id + 1;
    std::vector<char> needed(end, 0);
    std::vector<char> is_wrt(end, 0);
    for (const auto& w : wrt) {
      if (w.tape != this) throw ContractError("backward: wrt variable from a different tape");
      if (w.id < end) needed[w.id] = is_wrt[w.id] = 1;
    }
    for (std::size_t i = 0; i < end; ++i) {
      if (needed[i] || !nodes_[i].requires_grad) continue;
      for (auto in : nodes_[i].inputs) {
        if (needed[in]) {
          needed[i] = 1;
          break;
        }
      }
    }

    std::optional<NoGrad> guard;
    if (!create_graph) guard.emplace(*this);

    std::vector<std::optional<Var>> grads(end);
    grads[loss.id] = constant(Tensor::scalar(1.0));
    std::vector<bool> need_inputs;
    for (std::size_t i = end; i-- > 0;) {
      if (!needed[i] || !grads[i]) continue;
      // Copy what we need: the backward rule appends nodes and may grow the deque.
      const std::vector<std::size_t> inputs = nodes_[i].inputs;
      if (inputs.empty() || !nodes_[i].backward) continue;
      need_inputs.assign(inputs.size(), false);
      bool any = false;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        need_inputs[j] = needed[inputs[j]] != 0;
        any = any || need_inputs[j];
      }
      if (!any) continue;
      BackwardFn fn = nodes_[i].backward;
      auto in_grads = fn(*grads[i], need_inputs);
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        if (!need_inputs[j] || !in_grads[j]) continue;
        auto& slot = grads[inputs[j]];
        slot = slot ? accumulate(*slot, *in_grads[j]) : *in_grads[j];
      }
      if (!create_graph && !is_wrt[i]) grads[i].reset();
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      if (w.id < end && grads[w.id]) {
        out.push_back(*grads[w.id]);
      } else {
        const auto& v = nodes_[w.id].value;
        out.push_back(constant(Tensor(v.rows(), v.cols())));
      }
    }
    return out;
  }

  // Convenience: plain gradient tensors.
  std::vector<Tensor> gradient_values(Var loss, std::span<const Var> wrt) {
    auto vars = gradients(loss, wrt, false);
    std::vector<Tensor> out;
    out.reserve(vars.size());
    for (const auto& v : vars) out.push_back(v.value());
    return out;
  }

 private:
  Var accumulate(const Var& a, const Var& b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (!x.same_shape(y)) throw ShapeError("gradient accumulation " + x.shape() + " vs " + y.shape());
    Tensor sum = x;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += y[i];
    return record("add", std::move(sum), {a, b},
                  [](const Var& g, const std::vector<bool>&) -> std::vector<std::optional<Var>> {
                    return {g, g};
                  });
  }

  std::deque<Node> nodes_;
  bool recording_ = true;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

}  // namespace cml::ad
