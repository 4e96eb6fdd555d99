// SPDX-License-Identifier: Apache-2.0
//
// Rewrites a validated plan graph so every consumer input is constructible:
// split / send-recv / concat / reduce insertion, plus memory-release ops.

#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "planc/graph.hpp"
#include "planc/schedule.hpp"

namespace planc {

struct TransferPiece {
  int source_vt = 0;       // producer-output view the piece comes from
  int dest_vt = 0;         // consumer-input view the piece serves
  Region region;           // overlap
  bool cross_device = false;
};

// A lowered collective step instance shared by its per-device ops.
struct CollectiveGroup {
  int id = 0;
  std::string primitive;
  int k = 1;
  std::int64_t message_bytes = 0;  // n in the step's cost formula
  bool inter_group = false;
  std::vector<std::string> ops;  // one per participant device
};

// Graph plus the woven order and resolved data feeds. The feeds map binds
// every consumer-input view to the producer-output view that supplies it
// (exact mask match after materialization). Per-device orders are
// projections of the single woven global order, which keeps cross-device
// pairings free of ordering inversions by construction.
struct MaterializedPlan {
  PlanGraph graph;
  std::vector<std::string> global_order;
  std::map<int, int> feeds;  // consumer vt -> producer vt
  std::map<int, CollectiveGroup> coll_groups;
  std::vector<std::string> diagnostics;

  std::map<int, std::vector<std::string>> device_order() const;
};

// Materializes the chosen dependency edges: producer-side splits for strict
// sub-regions, send/recv pairs across devices, concat or reduce-assemble on
// the consumer side. Exact same-device matches insert nothing. Throws
// UsageError naming the region when a consumer portion has no producer.
MaterializedPlan materialize(const PlanGraph& g, const ClusterSpec& cluster,
                             const CompletedOrder& order);

// Inserts a free op after the last reader of each buffer on its device.
// Weights and optimizer state are never freed. Views produced by ops marked
// recompute are freed after their last forward-phase reader and regenerated
// by a cloned op immediately before their first backward-phase reader.
void insert_frees(MaterializedPlan& plan);

}  // namespace planc
