/* Copyright 2026 The IQT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef IQT_AUTODIFF_HPP_
#define IQT_AUTODIFF_HPP_

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace iqt::ad {

// (N, C, X, Y, Z); Z is the fastest-varying index.
using Shape = std::array<int, 5>;

std::string to_string(const Shape& s);
std::size_t element_count(const Shape& s);

template <typename T>
struct Tensor {
  Shape shape{0, 0, 0, 0, 0};
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(const Shape& s, T fill = T(0)) : shape(s), data(element_count(s), fill) {}
  Tensor(const Shape& s, std::vector<T> values);

  std::size_t size() const { return data.size(); }
  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  std::size_t spatial() const {
    return static_cast<std::size_t>(shape[2]) * static_cast<std::size_t>(shape[3]) *
           static_cast<std::size_t>(shape[4]);
  }
};

enum class OpKind {
  kLeaf,
  kConv3,          // inputs: x, w (Cout, Cin, 3, 3, 3) [, bias (Cout)]
  kConv1,          // inputs: x, w (Cout, Cin, 1, 1, 1) [, bias (Cout)]
  kConvTranspose,  // inputs: x, w (Cin, Cout, sx, sy, sz) [, bias (Cout)]; kernel == stride
  kMaxPool,        // inputs: x; window divides the pooled axes
  kRelu,
  kBatchNorm,      // inputs: x, gamma, beta [, running_mean, running_var]
  kConcat,         // inputs: two or more tensors joined along channels
  kAdd,            // inputs: a, b of equal shape
  kMse,            // inputs: estimate, target; scalar output
  kChannelMask,    // inputs: x, mask (m, C, 1, 1, 1); sample n uses row n / (N / m)
};

const char* op_name(OpKind kind);

struct OpParams {
  std::array<int, 3> window{1, 1, 1};  // pool window or transpose-conv stride
  bool training = true;                // batch norm: batch statistics vs running stats
  double eps = 1e-5;
};

// Reverse-mode tape. Nodes are appended in execution order, so the node list
// is already a topological order.
template <typename T>
class Graph {
 public:
  using NodeId = int;

  NodeId leaf(Tensor<T> value, bool requires_grad);
  NodeId apply(OpKind kind, std::vector<NodeId> inputs, const OpParams& params = {});

  NodeId conv3(NodeId x, NodeId w, NodeId bias = -1);
  NodeId conv1(NodeId x, NodeId w, NodeId bias = -1);
  NodeId conv_transpose(NodeId x, NodeId w, std::array<int, 3> stride, NodeId bias = -1);
  NodeId max_pool(NodeId x, std::array<int, 3> window);
  NodeId relu(NodeId x);
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, double eps);
  NodeId batch_norm_inference(NodeId x, NodeId gamma, NodeId beta, NodeId mean, NodeId var,
                              double eps);
  NodeId concat(std::vector<NodeId> parts);
  NodeId add(NodeId a, NodeId b);
  NodeId mse(NodeId estimate, NodeId target);
  NodeId channel_mask(NodeId x, NodeId mask);

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  // Leaf values may be edited in place; call replay() afterwards.
  Tensor<T>& leaf_value(NodeId id);
  // Gradient after backward(); zeros when the node received none.
  const Tensor<T>& grad(NodeId id) const;
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  std::size_t size() const { return nodes_.size(); }

  // Per-channel batch mean and biased variance of a training-mode batch norm.
  std::span<const T> batch_mean(NodeId bn) const;
  std::span<const T> batch_var(NodeId bn) const;

  // Accumulates d(loss)/d(node) into every node that requires a gradient.
  // Throws ArgumentError when the loss is not a single element.
  void backward(NodeId loss);
  void zero_grad();
  // Recomputes every non-leaf value in order.
  void replay();
  // Hash of all ReLU activation patterns and pooling argmax choices.
  std::uint64_t activation_signature() const;

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    OpParams params;
    bool requires_grad = false;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<T> saved;             // batch norm: x_hat, then mean and inv std
    std::vector<T> stats;             // batch norm: mean, biased var
    std::vector<std::uint32_t> argmax;
  };

  void forward(Node& node);
  void propagate(Node& node);
  Tensor<T>& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
};

// Central-difference check of d(loss)/d(leaf). Runs backward itself, then
// perturbs each listed entry (all entries when empty) by +-eps and replays.
// When the activation pattern differs between the two sides, eps is divided
// by 10 up to three times so the difference does not straddle a kink.
// Returns max |g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8).
double gradient_check(Graph<double>& graph, Graph<double>::NodeId loss,
                      Graph<double>::NodeId leaf, double eps,
                      std::span<const std::size_t> entries = {});

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace iqt::ad

#endif  // IQT_AUTODIFF_HPP_
