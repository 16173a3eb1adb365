#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "transllm/tensor.hpp"

namespace transllm::ad {

struct Node;
using NodeRef = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. `backprop` reads this node's gradient
/// and accumulates into its parents' gradients.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodeRef> parents;
  std::function<void(Node&)> backprop;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Handle to a tape node. Cheap to copy; the graph is freed when the last
/// handle to its sink goes out of scope.
class Var {
 public:
  Var() = default;
  explicit Var(NodeRef n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }
  NodeRef node() const { return node_; }
  Node* raw() const { return node_.get(); }

  double scalar() const { return node_->value[0]; }

 private:
  NodeRef node_;
};

/// While a guard is alive no graph is recorded: ops compute values only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

Var constant(Tensor value);
Var parameter(Tensor value);

/// Runs the reverse sweep from a scalar loss. Gradients accumulate: call
/// zero_grad on parameters between batches.
void backward(const Var& loss);

void zero_grad(const std::vector<Var>& params);

// ---- elementwise (equal shapes unless noted) --------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var abs(const Var& a);
Var log(const Var& a);
Var clamp_max(const Var& a, double cap);
/// Elementwise product with a fixed tensor (no gradient through the mask).
Var mul_const(const Var& a, const Tensor& m);
Var add_const(const Var& a, const Tensor& c);

// ---- linear algebra ---------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// x: R x C, bias: C -> adds bias to every row.
Var add_row_vector(const Var& x, const Var& bias);
/// x: A x N x C, m: N x C -> adds m to every leading slice.
Var add_slice_broadcast(const Var& x, const Var& m);

// ---- shape ------------------------------------------------------------------
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const std::vector<Var>& parts);
/// channel concat of two A x N x C tensors -> A x N x 2C
Var concat_channels(const Var& a, const Var& b);
Var row(const Var& a, std::size_t i);
Var slice_rows(const Var& a, std::size_t r0, std::size_t r1);
/// x: T x N x C -> T x C slice for one node.
Var slice_node(const Var& x, std::size_t node);

// ---- reductions -------------------------------------------------------------
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var dot(const Var& a, const Var& b);

// ---- nonlinear blocks -------------------------------------------------------
/// 1-D vector softmax.
Var softmax(const Var& a);
/// Row softmax of an S x S score matrix restricted to j <= i.
Var causal_softmax_rows(const Var& scores);
/// Row softmax restricted to mask(i,j) != 0. Mask rows must be non-empty.
Var masked_softmax_rows(const Var& scores, const Tensor& mask);
/// Row-wise layer norm; gamma/beta length = columns.
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var cumsum(const Var& a);

// ---- sequence / table -------------------------------------------------------
/// Gather rows of `table` (V x d) by id -> S x d.
Var embedding_rows(const Var& table, const std::vector<int>& ids);
/// Mean next-token cross entropy: logits S x V, targets[s] = class to predict
/// at position s, or -1 to skip. Errors if no position has a target.
Var cross_entropy_positions(const Var& logits, const std::vector<int>& targets);

/// Causal dilated 1-D convolution over the leading (time) axis, applied per
/// node: x T x N x Cin, w kernel x Cin x Cout, b Cout -> T x N x Cout.
/// Inputs before t=0 are zero (left padding).
Var conv1d_causal(const Var& x, const Var& w, const Var& b, std::size_t dilation);

/// Linear remap of the time axis: x K x N x C, w K x T -> T x N x C.
Var time_project(const Var& x, const Var& w);

struct GatHeadParams {
  Var w;      // C x dh
  Var a_src;  // dh
  Var a_dst;  // dh
};

/// Multi-head graph attention for one time step. h: N x C; attention of node i
/// is restricted to {j : adj(i,j) != 0} plus i itself; heads are concatenated.
Var graph_attention(const Var& h, const Tensor& adj, const std::vector<GatHeadParams>& heads,
                    double leaky_slope);

}  // namespace transllm::ad
