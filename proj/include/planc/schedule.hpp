// SPDX-License-Identifier: Apache-2.0
//
// Space-time scheduling: device assignment, happen-before ordering,
// mask-derived data dependencies, feasibility validation, and completion of
// per-device total orders.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "planc/graph.hpp"

namespace planc {

enum class DepMode { all_of, any_of };

struct DepEdge {
  std::string producer;
  std::string consumer;
  DepMode mode = DepMode::all_of;
  Region region;
  int group = 0;  // edges sharing a group are alternatives (any-of)
  // Producer-side coordinates the edge satisfies.
  int value_index = 0;
  int value_count = 1;
  int producer_vt = 0;
  int consumer_vt = 0;
};

void op_assign(PlanGraph& g, const ClusterSpec& cluster,
               const std::string& op_id, int device);
void op_order(PlanGraph& g, const std::string& before,
              const std::string& after);

// One edge per overlapping producer/consumer view pair on a pTensor.
// Value-part producers covering a region yield an all-of family (every
// summand required); replica producers of identical regions form one any-of
// group and share a group id.
std::vector<DepEdge> derive_data_deps(const PlanGraph& g);

struct CycleReport {
  // "opA -[data|order]-> opB" steps of one concrete cycle.
  struct Step {
    std::string from;
    std::string to;
    bool data = false;  // data dependency vs happen-before
  };
  std::vector<Step> cycle;
  // The any-of alternative vector under test when the cycle was found.
  std::vector<std::string> choice_vector;

  std::string to_string() const;
};

struct ValidationResult {
  bool feasible = false;
  // Chosen producer per any-of group id (groups of size 1 included).
  std::map<int, std::string> chosen;
  std::optional<CycleReport> report;
  bool budget_exceeded = false;  // "possibly infeasible (search budget)"
};

// Builds the full dependency graph (data deps plus happen-before) and
// searches replica-choice combinations for an acyclic configuration.
// Heuristic choice first (consumer's device, lowest device id, lowest op
// id); exhaustive enumeration as fallback up to 4096 combinations.
ValidationResult validate(const PlanGraph& g, const ClusterSpec& cluster);

struct CompletedOrder {
  std::vector<std::string> global;              // one linear extension
  std::map<int, std::vector<std::string>> per_device;
  std::map<int, std::string> chosen;            // any-of group -> producer
  std::vector<DepEdge> deps;                    // derived edges (all groups)
};

// Deterministic topological sort of the full dependency graph under the
// validated choice; ties broken by (micro_batch, document order, op id).
// Requires a feasible validation result.
CompletedOrder complete_order(const PlanGraph& g, const ClusterSpec& cluster,
                              const ValidationResult& validation);

}  // namespace planc
