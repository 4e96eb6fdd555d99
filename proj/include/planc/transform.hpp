// SPDX-License-Identifier: Apache-2.0
//
// Functional-equivalence rewrites of single operators with partition
// tracking on the operators' tensor views.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "planc/graph.hpp"

namespace planc {

enum class PartitionKind { dim_slice, value_slice, replica };

// How one replacement operand's view relates to the original operand's view.
struct PartitionSpec {
  PartitionKind kind = PartitionKind::replica;
  int dim = -1;  // dim_slice only
  int index = 0;
  int count = 1;

  static PartitionSpec dim_slice(int dim, int index, int count) {
    return {PartitionKind::dim_slice, dim, index, count};
  }
  static PartitionSpec value_slice(int index, int count) {
    return {PartitionKind::value_slice, -1, index, count};
  }
  static PartitionSpec replica(int index, int count) {
    return {PartitionKind::replica, -1, index, count};
  }
  bool is_trivial() const { return count == 1; }
};

// DimSlice narrows the dim's interval by equal subdivision; ValueSlice and
// Replica multiply the respective counts with mixed-radix index arithmetic.
Mask compose_mask(const Mask& current, const PartitionSpec& spec);

struct OperandSpecs {
  std::vector<PartitionSpec> inputs;
  std::vector<PartitionSpec> outputs;
};

// A rewrite rule for one operator: n replacements, each operand of
// replacement i related to the original operand by a PartitionSpec.
struct TransformAlgo {
  std::string name;
  int count = 1;
  std::function<bool(const PlanGraph&, const OpNode&)> applicable;
  std::function<OperandSpecs(const PlanGraph&, const OpNode&, int)> specs;
};

// Built-in algorithm library (matmul, elementwise, reduce-op,
// embedding-lookup/grad, identity; annotated ops via their annotation).
// `out_dim` refers to the operator's first-output dimension being split.
TransformAlgo split_algo(int out_dim, int n);
TransformAlgo value_split_algo(int n);
TransformAlgo replica_algo(int n);
// Vocabulary-sharded embedding: table rows split n ways, outputs become
// partial values summed across shards.
TransformAlgo shard_embed_algo(int n);

// Replaces `op_id` with algo.count new ops (ids "<op>/<i>"), composing each
// operand mask with the algo's spec. Other ops' views are untouched;
// happen-before edges incident to the op fan out to all replacements.
// Returns the new op ids in replacement order.
std::vector<std::string> op_trans(PlanGraph& g, const std::string& op_id,
                                  const TransformAlgo& algo);

// One SplitAlgo per spatially partitionable output dim, one ValueSplitAlgo
// per reduction group, and a ReplicaAlgo, derived from the op's annotation.
std::vector<TransformAlgo> derive_algos_from_annotation(const OpNode& op,
                                                        int n = 2);

// Transforms the backward ops paired to `forward_op` (still present in g)
// consistently with `algo`: data-dim slices map to the same slices on the
// gradients, replicated weights map to value-split weight gradients. Call
// before transforming the forward op itself.
std::vector<std::string> adapt_backward(PlanGraph& g,
                                        const std::string& forward_op,
                                        const TransformAlgo& algo);

}  // namespace planc
