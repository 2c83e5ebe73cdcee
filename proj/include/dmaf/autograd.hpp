#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Tensors carry no batch dimension: feature maps are [C, H, W], token
// sequences are [N, D]. Every op builds a node that owns its value, keeps
// shared pointers to its inputs and a closure that scatters the node's
// gradient into them. backward() walks the graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dmaf::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return value.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  double item() const;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
  void zero_grad() { grad.clear(); }
};

// Leaves.
Var constant(Shape shape, std::vector<double> values);
Var zeros(Shape shape);
Var scalar(double v);
Var parameter(Shape shape, std::vector<double> values);
Var detach(const Var& x);

// Building blocks for fused ops defined outside this file: the node's
// requires_grad is inherited from `parents`; grad_of() returns null for inputs
// that do not take part in differentiation.
Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents);
std::vector<double>* grad_of(const Var& x);

// Runs reverse-mode accumulation from a scalar root (seeded with `seed`).
void backward(const Var& root, double seed = 1.0);

// --- elementwise ---------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a * s where s holds a single element.
Var scale_by(const Var& a, const Var& s);
Var add_n(const std::vector<Var>& xs);
Var leaky_relu(const Var& x, double slope);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var reshape(const Var& x, Shape shape);

// --- reductions ----------------------------------------------------------
Var sum(const Var& x);
Var mean(const Var& x);
// Mean of squared differences over all entries.
Var mse(const Var& a, const Var& b);

// --- spatial ops on [C, H, W] --------------------------------------------
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var upsample_nearest2x(const Var& x);
// Bilinear resize with half-pixel centers and edge clamping.
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var concat_channels(const std::vector<Var>& xs);

// --- token ops on [N, D] -------------------------------------------------
// [C, H, W] -> [H*W, C] and back.
Var map_to_tokens(const Var& x);
Var tokens_to_map(const Var& t, int h, int w);
Var concat_rows(const std::vector<Var>& xs);
Var slice_rows(const Var& x, int begin, int count);
// y = x W^T + b, W is [Dout, Din].
Var linear(const Var& x, const Var& weight, const Var& bias);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Scaled dot-product attention split over `heads` equal slices of D.
// key_mask[j] == false sends every logit towards key j to -inf.
// If `probs_out` is non-null it receives the [heads, Nq, Nk] attention weights.
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<bool>& key_mask, std::vector<double>* probs_out = nullptr);

// --- modality fusion ---------------------------------------------------------
// Softmax over M single-channel maps [1, H, W] per location, restricted to
// active maps. Returns [M, H, W]; inactive rows are exactly zero.
Var masked_softmax_stack(const std::vector<Var>& logits, const std::vector<bool>& active);
// sum_m feats[m] * weights[m] with weights [M, H, W] broadcast over channels.
Var weighted_fusion(const std::vector<Var>& feats, const Var& weights);

}  // namespace dmaf::ag
