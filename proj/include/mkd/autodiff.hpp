#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mkd/tensor.hpp"

namespace mkd::ad {

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is
/// already topologically sorted; backward() walks it once in reverse.
///
/// A node requires a gradient iff it is a trainable leaf or depends on one.
/// Nodes that do not require a gradient never store a backward closure, so
/// running a network through a graph with frozen parameters costs a plain
/// forward pass.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool trainable);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Gradient accumulated at `v` by the last backward(); zeros if none reached it.
  Tensor grad(Var v) const;

  /// Mutable gradient buffer for use inside backward closures. Lazily zeroed.
  Tensor& grad_buffer(Var v);

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one element.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

// Differentiable operations. All image-like tensors are (C, H, W).

Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad);
Var add(Graph& g, Var a, Var b);
Var relu(Graph& g, Var x);
Var leaky_relu(Graph& g, Var x, double slope);
Var tanh(Graph& g, Var x);
/// Logistic function; outputs are kept inside [clamp, 1 - clamp].
Var sigmoid(Graph& g, Var x, double clamp = 0.0);
/// Per-channel normalization to zero mean / unit variance (no affine terms).
Var instance_norm(Graph& g, Var x, double eps = 1e-5);
/// Nearest-neighbour 2x upsampling.
Var upsample2x(Graph& g, Var x);
/// Channel concatenation.
Var concat(Graph& g, Var a, Var b);
/// Softmax over the channel axis at every pixel.
Var softmax_channels(Graph& g, Var logits);
/// Scalar weighted sum Σ w_i · s_i of one-element nodes.
Var weighted_sum(Graph& g, std::span<const Var> scalars, std::span<const double> weights);
/// Copy of the value with no gradient path back to `x`.
Var detach(Graph& g, Var x);

}  // namespace mkd::ad
