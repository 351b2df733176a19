#pragma once

#include <functional>
#include <vector>

#include "rffi/nn/tensor.hpp"

namespace rffi::nn {

using NodeId = int32_t;

// Reverse-mode tape. Ops append nodes in topological order; backward() walks
// the tape in reverse, accumulating into parent gradients. Gradients are only
// allocated (and backward closures only run) along paths that reach a leaf
// created with requires_grad = true, so inference pays nothing for the tape.
//
// Determinism: every kernel writes each output element from exactly one
// loop iteration with a fixed inner reduction order, so results are bit-equal
// across runs and thread counts.
class Graph {
 public:
  NodeId input(Tensor v, bool requires_grad = false);
  NodeId constant(Tensor v) { return input(std::move(v), false); }

  const Tensor& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // x:[N,Ci,H,W] w:[Co,Ci,kh,kw] b:[Co] (b may be -1 for none)
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad);
  // x:[N,Ci,H,W] w:[Ci,Co,kh,kw] b:[Co]; out spatial = (in-1)*stride - 2*pad + k
  NodeId conv_transpose2d(NodeId x, NodeId w, NodeId b, int stride, int pad);
  // x:[N,F] w:[O,F] b:[O]
  NodeId linear(NodeId x, NodeId w, NodeId b);
  NodeId relu(NodeId x);
  // x:[N,C,H,W]; gamma,beta:[C]; C divisible by groups
  NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, int groups, float eps = 1e-5f);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, float s);
  NodeId global_avg_pool(NodeId x);  // [N,C,H,W] -> [N,C]
  NodeId reshape(NodeId x, std::vector<int> shape);
  // center-crop larger dims, edge-replicate pad smaller dims to (out_h, out_w)
  NodeId crop_pad2d(NodeId x, int out_h, int out_w);
  NodeId gather_rows(NodeId x, std::vector<int> rows);
  NodeId mean_rows(NodeId x);  // [N,F] -> [F]

  // scalar losses (output shape {1})
  // focal_gamma > 0 selects focal loss (no smoothing); otherwise CE with
  // label_smoothing in [0, 1)
  NodeId softmax_ce(NodeId logits, std::vector<int> labels, float label_smoothing,
                    float focal_gamma);
  // lambda * (1 - cos(feat, v)); feat:[F], v unit vector
  NodeId cosine_align_loss(NodeId feat, Tensor v, float lambda);
  // mean over dim-0 slices of the sum of squared errors
  NodeId sse_mean(NodeId pred, Tensor target);
  // sum_d max(KL_d, tau) with KL_d the batch-averaged diagonal-Gaussian KL
  NodeId kl_free_bits(NodeId mu, NodeId logvar, float tau_fb);
  // mu + exp(logvar/2) * eta, eta fixed
  NodeId reparam(NodeId mu, NodeId logvar, Tensor eta);

  void backward(NodeId loss);

  size_t size() const { return nodes_.size(); }
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backward_fn;
  };

  NodeId push(Tensor value, bool requires_grad, std::function<void(Graph&)> fn);
  Tensor& grad_acc(NodeId id);  // allocates zeros on first touch
  bool any_grad(std::initializer_list<NodeId> ids) const;

  std::vector<Node> nodes_;
  friend struct GraphDetail;
};

// Standalone forward kernels, shared with the graph ops and usable directly.
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad);
Tensor conv_transpose2d_forward(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
                                int pad);
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* b);

}  // namespace rffi::nn
