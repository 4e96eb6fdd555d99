// SPDX-License-Identifier: Apache-2.0

#include "planc/compile.hpp"

namespace planc {

CompileResult compile(PlanGraph graph, const ClusterSpec& cluster,
                      const StrategyConfig& strategy,
                      bool enable_pattern_match) {
  CompileResult result;
  result.strategy_info = apply_strategy(graph, cluster, strategy);

  auto validation = validate(graph, cluster);
  if (!validation.feasible) {
    if (!validation.report) {
      throw InternalError("infeasible validation without a report");
    }
    if (validation.budget_exceeded) {
      validation.report->choice_vector.insert(
          validation.report->choice_vector.begin(),
          "possibly infeasible (search budget)");
    }
    throw InfeasibleError(*validation.report);
  }

  auto order = complete_order(graph, cluster, validation);
  auto mplan = materialize(graph, cluster, order);

  {
    // Modeled communication cost before/after collective pattern matching.
    std::vector<std::string> all_inserted;
    for (const auto& op : mplan.graph.ops) {
      if (op.inserted) all_inserted.push_back(op.id);
    }
    result.naive_comm_cost = naive_family_cost(mplan, cluster, all_inserted);
  }
  if (enable_pattern_match) {
    result.replaced_families = pattern_match_collectives(mplan, cluster);
  }
  {
    std::vector<std::string> all_inserted;
    double coll_cost = 0;
    for (const auto& op : mplan.graph.ops) {
      if (op.inserted) all_inserted.push_back(op.id);
    }
    for (const auto& [id, grp] : mplan.coll_groups) {
      CommPrimitive prim = CommPrimitive::all_reduce;
      for (int p = 0; p <= static_cast<int>(CommPrimitive::relabel); ++p) {
        if (grp.primitive == to_string(static_cast<CommPrimitive>(p))) {
          prim = static_cast<CommPrimitive>(p);
        }
      }
      coll_cost += primitive_cost(
          prim, grp.k, grp.message_bytes,
          grp.inter_group ? cluster.inter_link : cluster.intra_link);
    }
    result.matched_comm_cost =
        naive_family_cost(mplan, cluster, all_inserted) + coll_cost;
  }

  insert_frees(mplan);
  for (const auto& w : mplan.graph.warnings) result.diagnostics.push_back(w);
  for (const auto& d : mplan.diagnostics) result.diagnostics.push_back(d);

  result.plan = lower(mplan, cluster);
  return result;
}

}  // namespace planc
