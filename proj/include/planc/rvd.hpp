// SPDX-License-Identifier: Apache-2.0
//
// RVD communication planning: recognizing evenly partitioned tensor sets as
// replica/value/dimension descriptors and synthesizing shortest-cost
// collective sequences over the descriptor transition graph.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "planc/materialize.hpp"

namespace planc {

// R(r)V(v)D(d1..dn) tensor set on an ordered device group. Slot order is
// replica-major, then value, then row-major over the dims; group[slot] is
// the device holding that slot's piece.
struct RvdDescriptor {
  int r = 1;
  int v = 1;
  std::vector<int> d;
  std::vector<int> group;
  std::vector<std::int64_t> shape;  // pTensor extents
  std::int64_t elem_size = 4;
  // Set by to_rvd: the view occupying each slot.
  std::vector<int> slot_vts;

  int slots() const;
  std::int64_t piece_bytes() const;
  Region slot_region(int slot) const;
  // (replica, value, dim coords) of a slot.
  void slot_coords(int slot, int& replica, int& value,
                   std::vector<int>& coords) const;
  std::string to_string() const;
  bool same_shape(const RvdDescriptor& o) const {
    return r == o.r && v == o.v && d == o.d;
  }
};

enum class CommPrimitive {
  local_split,
  all_gather,
  all_reduce,
  reduce_scatter,
  all_to_all,
  group_copy,
  rd_scatter,
  relabel,  // slot permutation; point-to-point copies when data must move
};

const char* to_string(CommPrimitive p);

struct CommStep {
  CommPrimitive primitive = CommPrimitive::local_split;
  std::vector<std::vector<int>> subgroups;  // participant devices
  int k = 1;
  int axis = -1;  // dimension-touching primitives
  double cost = 0;
  std::int64_t message_bytes = 0;  // n in the cost formula
  bool inter_group = false;
  RvdDescriptor result;  // descriptor after the step (with device order)
  // relabel only: {src_device, dst_device} moves.
  std::vector<std::array<int, 2>> moves;
};

// Per-primitive modeled time over k participants, message n bytes on a link.
double primitive_cost(CommPrimitive p, int k, std::int64_t n_bytes,
                      const LinkParams& link);

// Recognizes a perfect (r, v, d) grid over the full pTensor mapped
// one-to-one onto distinct devices; returns nothing for irregular sets.
std::optional<RvdDescriptor> to_rvd(const PlanGraph& g,
                                    const std::vector<int>& vtensors,
                                    const std::map<int, int>& device_of_vt);

// Every legal single-step successor of `s` (intra-group primitives, plus
// cross-group edges toward `peer_group` when given).
std::vector<CommStep> transition_rules(const RvdDescriptor& s,
                                       const ClusterSpec& cluster,
                                       const std::vector<int>* peer_group =
                                           nullptr);

// Slot permutation turning a same-shape state into `dst`: point-to-point
// copies wherever a device holds different content than its target slot.
// Zero moves means a free relabel; nullopt when the states are not
// permutations of each other.
std::optional<CommStep> goal_relabel(const RvdDescriptor& state,
                                     const RvdDescriptor& dst,
                                     const ClusterSpec& cluster);

struct RvdPath {
  std::vector<CommStep> steps;
  double cost = 0;
};

// Dijkstra over descriptor states (shape plus slot layout) from src to dst
// on one device group. Unreachable within the search budget -> nullopt.
std::optional<RvdPath> search_intra(const RvdDescriptor& src,
                                    const RvdDescriptor& dst,
                                    const ClusterSpec& cluster);

// Source and destination on disjoint groups: bridges the two intra graphs
// with group-copy and rd-scatter edges. Identical groups fall back to
// search_intra.
std::optional<RvdPath> search_inter(const RvdDescriptor& src,
                                    const RvdDescriptor& dst,
                                    const ClusterSpec& cluster);

// Text dump of the transition graph reachable from `src` and of a path.
std::string dump_transition_graph(const RvdDescriptor& src,
                                  const ClusterSpec& cluster, int max_states);
std::string dump_path(const RvdDescriptor& src, const RvdPath& path);

// Replaces naive split/send/recv/concat/reduce chains with searched
// collective sequences wherever both tensor sides form descriptors and the
// searched plan does not cost more. Returns the number of replaced families.
int pattern_match_collectives(MaterializedPlan& plan,
                              const ClusterSpec& cluster);

// Modeled communication cost of the naive materialized ops serving one
// pTensor family (used for the replacement decision and reporting).
double naive_family_cost(const MaterializedPlan& plan,
                         const ClusterSpec& cluster,
                         const std::vector<std::string>& ops);

}  // namespace planc
