// SPDX-License-Identifier: Apache-2.0
//
// Dataflow-graph IR: persistent tensors, masked views, operators, devices,
// and the plan graph that the compiler passes rewrite and annotate.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "planc/util.hpp"

namespace planc {

enum class TensorKind { weight, activation, gradient, optimizer_state };

enum class OpDirection { forward, backward, optimizer };

// Compute kinds come from the input document; the kinds from `split` on are
// reserved for materialization and rejected by the loader.
enum class OpKind {
  matmul,
  elementwise,
  reduce_op,
  embedding_lookup,
  embedding_grad,
  identity,
  split,
  concat,
  reduce_assemble,
  send,
  recv,
  collective,
  free_buffer,
};

enum class EwFn { add, mul, max };

enum class TensorSide { producer_output, consumer_input };

const char* to_string(TensorKind k);
const char* to_string(OpKind k);
const char* to_string(OpDirection d);

// Half-open interval [lo, hi) of element indices along one dimension.
struct Interval {
  std::int64_t lo = 0;
  std::int64_t hi = 0;

  std::int64_t length() const { return hi - lo; }
  bool operator==(const Interval&) const = default;
};

using Region = std::vector<Interval>;

std::int64_t region_volume(const Region& r);
bool region_contains(const Region& outer, const Region& inner);
std::optional<Region> region_intersect(const Region& a, const Region& b);
std::string region_to_string(const Region& r);

// Which portion of the pTensor a view covers: an axis-aligned box plus
// partial-value and replica coordinates. count == 1 means "not split that
// way". A value count c > 1 asserts that the sum of all c siblings over the
// same region equals the pTensor's values there.
struct Mask {
  Region region;
  int value_index = 0;
  int value_count = 1;
  int replica_index = 0;
  int replica_count = 1;

  bool operator==(const Mask&) const = default;
};

Mask full_mask(const std::vector<std::int64_t>& shape);

// Region-only intersection. Value/replica coordinates are consulted by
// dependency derivation, not intersected here.
std::optional<Region> mask_intersect(const Mask& a, const Mask& b);

struct PTensor {
  int id = 0;
  std::vector<std::int64_t> shape;
  std::int64_t elem_size = 4;
  TensorKind kind = TensorKind::activation;
  // Links a gradient tensor to the tensor it is the gradient of; used by
  // backward transformation inference.
  std::optional<int> grad_of;

  std::int64_t volume() const;
  std::int64_t bytes() const { return volume() * elem_size; }
  int rank() const { return static_cast<int>(shape.size()); }
};

struct VTensor {
  int id = 0;
  int ptensor = 0;
  Mask mask;
  TensorSide side = TensorSide::consumer_input;
  std::string owner_op;

  std::int64_t bytes(const PTensor& pt) const {
    return region_volume(mask.region) * pt.elem_size;
  }
};

enum class DimClass { spatial, reduce, frozen };

// Einops-style legality annotation: a class per operand dimension, links
// from output dims to the input dims they co-partition with, and groups of
// input dims that form one reduction axis.
struct DimAnnotation {
  std::vector<std::vector<DimClass>> operands;
  // {out_dim, in_operand, in_dim}; several triples may share one out_dim.
  std::vector<std::array<int, 3>> co_partition;
  // Each group lists {in_operand, in_dim} pairs that split together as one
  // reduction variable. Reduce dims not covered form singleton groups.
  std::vector<std::vector<std::array<int, 2>>> reduce_groups;
  std::optional<int> batch_dim;  // output dim carrying the batch
};

// Optional per-op parameters carried by the document's "attrs" object.
struct OpAttrs {
  std::optional<int> axis;  // reduce-op reduction axis
  bool transpose_a = false;
  bool transpose_b = false;
  std::optional<int> layer;          // stage grouping
  std::optional<std::string> role;   // "embedding" | "stage"
  std::optional<int> pass_index;     // chained-forward pass (1-based)
  std::optional<int> batch_dim;      // overrides annotation batch dim
  bool recompute = false;            // outputs freed early and regenerated
};

struct OpNode {
  std::string id;
  OpKind kind = OpKind::identity;
  EwFn ew = EwFn::add;
  std::vector<int> inputs;   // vtensor ids, consumer-input side
  std::vector<int> outputs;  // vtensor ids, producer-output side
  OpDirection direction = OpDirection::forward;
  double flops = 0;
  std::optional<DimAnnotation> dim_annotation;
  OpAttrs attrs;
  std::optional<std::string> backward_of;
  std::optional<int> micro_batch;
  int doc_order = 0;       // original document position, kept by replacements
  bool inserted = false;   // true for materialization-phase ops

  // Materialization metadata.
  int channel = -1;        // send/recv pairing
  int coll_group = -1;     // collective step instance
  int free_vtensor = -1;   // buffer released by a free op
  std::string comm_primitive;

  bool is_comm_kind() const {
    return kind == OpKind::send || kind == OpKind::recv ||
           kind == OpKind::collective;
  }
  bool is_reserved_kind() const {
    return kind == OpKind::split || kind == OpKind::concat ||
           kind == OpKind::reduce_assemble || is_comm_kind() ||
           kind == OpKind::free_buffer;
  }
};

struct Device {
  int id = 0;
  int group = 0;
  std::int64_t memory_capacity = 0;
};

struct LinkParams {
  double bandwidth = 1.0;  // bytes/s
  double latency = 0.0;    // s
};

struct ClusterSpec {
  std::vector<Device> devices;
  LinkParams intra_link;
  LinkParams inter_link;
  double device_throughput = 1.0;  // flops/s

  bool has_device(int id) const;
  const Device& device(int id) const;
  int group_of(int id) const { return device(id).group; }
  std::vector<int> group_devices(int group) const;
  const LinkParams& link_between(int dev_a, int dev_b) const {
    return group_of(dev_a) == group_of(dev_b) ? intra_link : inter_link;
  }
  // Uniform N-device cluster split into groups of group_size.
  static ClusterSpec uniform(int n, int group_size, std::int64_t memory,
                             LinkParams intra, LinkParams inter,
                             double throughput);
};

struct HappenBefore {
  std::string before;
  std::string after;
};

// The execution-flow graph all phases rewrite. pTensors are immutable after
// construction; passes only add/replace operators and vTensors.
struct PlanGraph {
  std::map<int, PTensor> ptensors;
  std::map<int, VTensor> vtensors;
  std::vector<OpNode> ops;  // document / creation order
  std::vector<HappenBefore> happen_before;
  std::map<std::string, int> assignment;  // op id -> device id
  std::vector<std::string> warnings;

  int next_vtensor_id = 1;
  int next_channel = 0;
  int next_coll_group = 0;

  bool has_op(const std::string& id) const;
  OpNode& op(const std::string& id);
  const OpNode& op(const std::string& id) const;
  VTensor& vt(int id);
  const VTensor& vt(int id) const;
  const PTensor& pt(int id) const;
  const PTensor& pt_of(const VTensor& v) const { return pt(v.ptensor); }

  int add_vtensor(int ptensor, Mask mask, TensorSide side,
                  const std::string& owner);
  void add_op(OpNode op);
  // Removes the op and its vtensors; happen-before edges must be re-attached
  // by the caller beforehand.
  void erase_op(const std::string& id);

  std::vector<const OpNode*> producers_of(int ptensor) const;
  std::vector<const OpNode*> consumers_of(int ptensor) const;

  // pTensors with no producing op; satisfied by initial placement.
  bool is_graph_input(int ptensor) const;

  void warn(const std::string& msg);
};

// Parses the JSON graph document. Unknown fields are rejected; declared
// optional fields are attrs, backward_of, dim_annotation on ops and grad_of
// on ptensors. Every op receives one vTensor per operand with a full mask.
PlanGraph load_graph(const std::string& document);

// Checked variant used on vTensors: both views must link to one pTensor.
std::optional<Region> mask_intersect_checked(const PlanGraph& g, int vt_a,
                                             int vt_b);

}  // namespace planc
