#pragma once

// Reverse-mode differentiation over a static graph of dense tensor ops.
//
// A Graph is built fresh for every evaluation: leaves are added first, each
// op appends one node whose inputs must already exist, so insertion order is
// a topological order. backward() walks that order once in reverse.

#include <cstddef>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmclip/tensor.hpp"

namespace mmclip {

enum class OpKind {
  leaf,
  matmul,          // [M,K] x [K,N] -> [M,N]
  conv2d,          // [N,C,H,W] * [O,C,K,K] -> [N,O,H',W'], stride 1
  add,             // same shape, or rank-1 operand broadcast along axis 1
  relu,
  clip_upper,      // min(h, z), z same shape or one bound per axis-1 channel
  mean_pool,       // non-overlapping window over the two trailing axes
  flatten,         // [N,...] -> [N,prod(...)]
  affine_norm,     // x * scale_c + shift_c along axis 1
  softmax_ce,      // mean cross-entropy of [N,C] logits against labels
  mse,             // mean squared difference of two same-shape tensors
  scalar_combine,  // sum_i weight_i * sum(input_i)
  class_margin,    // per row: logit[c] - max_{k != c} logit[k]
};

std::string_view op_name(OpKind kind);

struct OpParams {
  std::size_t padding = 0;       // conv2d
  std::size_t window = 2;        // mean_pool
  std::vector<int> labels;       // softmax_ce targets, class_margin classes
  std::vector<double> weights;   // scalar_combine
};

/// Handle to a node of one particular Graph.
struct NodeRef {
  std::size_t index = 0;
  friend bool operator==(NodeRef, NodeRef) = default;
};

class Gradients {
 public:
  const Tensor& operator[](NodeRef leaf) const;
  bool contains(NodeRef leaf) const { return grads_.contains(leaf.index); }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Graph;
  std::unordered_map<std::size_t, Tensor> grads_;
};

class Graph {
 public:
  /// Adds an input. Only differentiable leaves receive gradients.
  NodeRef leaf(Tensor value, bool differentiable = false);

  /// Generic op entry point; the named helpers below forward here.
  NodeRef apply(OpKind kind, std::span<const NodeRef> inputs,
                OpParams params = {});

  NodeRef matmul(NodeRef a, NodeRef b);
  NodeRef conv2d(NodeRef x, NodeRef w, std::size_t padding = 0);
  NodeRef add(NodeRef a, NodeRef b);
  NodeRef relu(NodeRef x);
  NodeRef clip_upper(NodeRef h, NodeRef z);
  NodeRef mean_pool(NodeRef x, std::size_t window);
  NodeRef flatten(NodeRef x);
  NodeRef affine_norm(NodeRef x, NodeRef scale, NodeRef shift);
  NodeRef softmax_ce(NodeRef logits, std::vector<int> labels);
  NodeRef mse(NodeRef a, NodeRef b);
  NodeRef scalar_combine(std::span<const NodeRef> terms,
                         std::vector<double> weights);
  NodeRef class_margin(NodeRef logits, std::vector<int> classes);

  const Tensor& value(NodeRef node) const;
  std::size_t size() const { return nodes_.size(); }

  /// d(output)/d(leaf) for every differentiable leaf that output depends on
  /// (and zero tensors for those it does not). Output must hold one value.
  Gradients backward(NodeRef output) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeRef> inputs;
    OpParams params;
    Tensor value;
    bool differentiable = false;  // leaf flag
    bool needs_grad = false;      // some differentiable leaf feeds this node
  };

  const Node& node(NodeRef ref) const;
  Tensor evaluate(OpKind kind, std::span<const NodeRef> inputs,
                  const OpParams& params) const;
  void propagate(const Node& n, const Tensor& grad,
                 std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
};

}  // namespace mmclip
