// SPDX-License-Identifier: Apache-2.0
//
// End-to-end driver: strategy -> validate -> complete -> materialize ->
// collective pattern matching -> frees -> lowering.

#pragma once

#include <optional>
#include <string>

#include "planc/refexec.hpp"
#include "planc/rvd.hpp"
#include "planc/simulate.hpp"
#include "planc/strategies.hpp"

namespace planc {

struct CompileResult {
  ExecutionPlan plan;
  StrategyInfo strategy_info;
  int replaced_families = 0;
  double naive_comm_cost = 0;    // modeled comm cost before pattern matching
  double matched_comm_cost = 0;  // and after
  std::vector<std::string> diagnostics;
};

struct InfeasibleError : std::runtime_error {
  CycleReport report;
  explicit InfeasibleError(CycleReport r)
      : std::runtime_error("infeasible schedule: " + r.to_string()),
        report(std::move(r)) {}
};

// Throws InfeasibleError with the cycle report when validation fails.
CompileResult compile(PlanGraph graph, const ClusterSpec& cluster,
                      const StrategyConfig& strategy,
                      bool enable_pattern_match = true);

}  // namespace planc
