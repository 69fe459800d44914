#pragma once

// Tape-based reverse-mode differentiation over the kernel operation set.
//
// A Graph records every operation eagerly: building a node computes its value
// immediately and stores whatever activations the backward pass needs. Nodes
// are appended in execution order, so the node vector is a topological order.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cprompt/core.hpp"
#include "cprompt/kernel.hpp"

namespace cprompt::kernel {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
  friend auto operator<=>(NodeId, NodeId) = default;
};

// Gradients keyed by leaf node index.
using GradientMap = std::map<std::uint32_t, Tensor>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves. `leaf_ref` borrows the tensor, which must outlive the graph.
  NodeId leaf(Tensor value);
  NodeId leaf_ref(const Tensor& value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, float factor);
  NodeId sum(NodeId a);
  NodeId row_softmax(NodeId x);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, float eps = kLayerNormEps);
  NodeId gelu(NodeId x);
  // Multi-head scaled dot-product attention with a causal mask; q, k, v are
  // [T x d] with heads laid out as contiguous column blocks.
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, std::size_t n_heads);
  NodeId gather_rows(NodeId table, std::span<const std::int32_t> ids);
  NodeId concat_rows(NodeId top, NodeId bottom);
  NodeId slice_rows(NodeId x, std::size_t begin, std::size_t end);
  NodeId nll(NodeId logits, std::span<const std::int32_t> targets);
  NodeId mean(std::span<const NodeId> scalars);

  const Tensor& value(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  bool is_leaf(NodeId id) const;
  const std::string& op_name(NodeId id) const;
  std::span<const NodeId> inputs(NodeId id) const;

  // d(root)/d(leaf) for every requested leaf. Only nodes on a path to a
  // requested leaf are differentiated.
  GradientMap backward(NodeId root, std::span<const NodeId> wanted) const;

  // Recomputes every non-leaf node from its inputs and reports whether all
  // recomputed values match the recorded ones bitwise.
  bool replay_matches() const;

 private:
  using ForwardFn = std::function<Tensor(const Graph&, std::vector<Tensor>& saved)>;
  using BackwardFn = std::function<void(const Graph&, const std::vector<Tensor>& saved,
                                        const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Tensor value;
    const Tensor* borrowed = nullptr;
    std::vector<Tensor> saved;
    ForwardFn forward;
    BackwardFn backward;
  };

  NodeId record(std::string op, std::vector<NodeId> inputs, ForwardFn forward, BackwardFn backward);
  void check(NodeId id) const;

  std::vector<Node> nodes_;
};

}  // namespace cprompt::kernel
